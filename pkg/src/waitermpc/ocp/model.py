"""Direct transcription of the balancing MPC and its Gauss-Newton QP.

Decision variables per interval are the state ``x_k`` and ``z_k = [u_k, xi_k]``
(jerk input and contact forces).  The cost of node ``k`` is
``dt/2 * L(x_k, u_k, xi_k)``; every constraint except the dynamics is soft:
inequalities get one slack per row penalized by ``w s^2``, equalities become
the least-squares term ``w h^2`` (two one-sided slacks of an equality row).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from ..balance import gi_wrenches_jnp
from ..kinematics import KinematicChain, discrete_matrices, ee_body_motion, fk_pose, sphere_centers
from .problem import BalanceConstraints, Mode, OCPDefinition, SceneModel
from .qp import StructuredQP

_FAR = 1e3  # distance reported for padded / inactive geometry
_OBSTACLE_BLOCK = 4  # obstacle arrays are padded to a multiple of this to limit recompiles


def _segment_distance(p, a, b):
    ab = b - a
    t = jnp.clip(jnp.dot(p - a, ab) / jnp.maximum(jnp.dot(ab, ab), 1e-12), 0.0, 1.0)
    return jnp.linalg.norm(p - (a + t * ab))


def tube_distance(p, samples, first):
    """Distance from ``p`` to the polyline through ``samples[first:]``."""
    a, b = samples[:-1], samples[1:]
    d = jax.vmap(lambda aa, bb: _segment_distance(p, aa, bb))(a, b)
    idx = jnp.arange(a.shape[0])
    d = jnp.where(idx >= jnp.minimum(first, a.shape[0] - 1), d, _FAR)
    return jnp.min(d)


def _penalty(g, w) -> float:
    # hard rows (w = inf) cost nothing when satisfied and inf when violated
    v = np.maximum(g, 0.0)
    return float(np.sum(np.where(v > 0, w * v**2, 0.0)))


@dataclass
class NodeValues:
    """Model quantities at every node, with Jacobians w.r.t. the state."""

    r_e: np.ndarray  # (K+1, 3)
    J_r: np.ndarray  # (K+1, 3, n)  w.r.t. q
    eq: np.ndarray  # (K+1, n_eq) state-dependent part of the equality rows
    J_eq: np.ndarray  # (K+1, n_eq, 3n)
    coll: np.ndarray  # (K+1, n_coll) signed distances
    J_coll: np.ndarray  # (K+1, n_coll, n)
    tube: np.ndarray  # (K+1,) tube distance minus clearance
    J_tube: np.ndarray  # (K+1, n)


def _node_values(params, mode, n, x, obs_c, obs_r, samples, first, clearance, active):
    arrs = params["arrs"]
    links, offsets, radii = params["links"], params["offsets"], params["radii"]

    def ee_pos(q):
        return fk_pose(arrs, q)[1]

    def eq_state(x):
        q, v, a = x[:n], x[n : 2 * n], x[2 * n :]
        if mode == Mode.UPWARD.value:
            R, _ = fk_pose(arrs, q)
            return R[:2, 2]
        if mode in (Mode.FULL.value, Mode.ROBUST.value):
            R, _, varpi, varpi_dot = ee_body_motion(arrs, q, v, a)
            w = gi_wrenches_jnp(
                R, varpi_dot, varpi, params["mass"], params["com"], params["inertia"], params["gravity"]
            )
            return w.ravel() * params["scale"]
        return jnp.zeros(0)

    def coll(q, obs_c, obs_r):
        if links.shape[0] == 0:
            return jnp.zeros(0)
        c = sphere_centers(arrs, links, offsets, q)
        d = jnp.linalg.norm(c[:, None, :] - obs_c[None, :, :], axis=-1)
        return (d - radii[:, None] - obs_r[None, :]).ravel()

    def tube(q, samples, first, clearance, active):
        d = tube_distance(ee_pos(q), samples, first) - clearance
        return jnp.where(active, d, _FAR)

    q = x[:n]
    return (
        ee_pos(q),
        jax.jacfwd(ee_pos)(q),
        eq_state(x),
        jax.jacfwd(eq_state)(x),
        coll(q, obs_c, obs_r),
        jax.jacfwd(coll)(q, obs_c, obs_r),
        tube(q, samples, first, clearance, active),
        jax.grad(tube)(q, samples, first, clearance, active),
    )


@partial(jax.jit, static_argnums=(1, 2))
def _node_eval(params, mode, n, X, obs_c, obs_r, samples, first, clearance, active):
    """Node quantities for every state in ``X``; shared by all models with equal shapes."""
    f = lambda x, f0, a: _node_values(params, mode, n, x, obs_c, obs_r, samples, f0, clearance, a)
    return jax.vmap(f)(X, first, active)


class OCPModel:
    """Transcribed problem for one chain, definition and balancing constraint set."""

    def __init__(self, chain: KinematicChain, ocp: OCPDefinition, cons: BalanceConstraints):
        self.chain = chain
        self.ocp = ocp
        self.cons = cons
        n = chain.dof
        self.n = n
        self.nx = 3 * n
        self.nu = n
        self.nf = cons.n_forces
        self.nz = self.nu + self.nf
        self.K = ocp.K
        self.A, self.Bu = discrete_matrices(ocp.dt, n)
        self.B = np.hstack([self.Bu, np.zeros((self.nx, self.nf))])
        self.n_eq = cons.n_equality_rows
        self._setup_linear_rows()
        self._setup_balance()
        self._eval = self._make_eval()

    # --- constant rows -------------------------------------------------------

    def _setup_linear_rows(self):
        c = self.chain
        nx, nz, nu = self.nx, self.nz, self.nu
        rows_x, rows_z, bounds = [], [], []
        ex, ez = np.eye(nx), np.eye(nz)
        for i in np.flatnonzero(np.isfinite(c.x_upper)):
            rows_x.append(ex[i]), rows_z.append(np.zeros(nz)), bounds.append(c.x_upper[i])
        for i in np.flatnonzero(np.isfinite(c.x_lower)):
            rows_x.append(-ex[i]), rows_z.append(np.zeros(nz)), bounds.append(-c.x_lower[i])
        self.n_xlim = len(bounds)
        for i in np.flatnonzero(np.isfinite(c.u_upper)):
            rows_x.append(np.zeros(nx)), rows_z.append(ez[i]), bounds.append(c.u_upper[i])
        for i in np.flatnonzero(np.isfinite(c.u_lower)):
            rows_x.append(np.zeros(nx)), rows_z.append(-ez[i]), bounds.append(-c.u_lower[i])
        # force cone rows: -F xi <= 0
        if self.cons.n_cone_rows:
            arr = self.cons.arrangement
            F = np.eye(arr.N) if self.cons.scalar else arr.pyramid_matrix(self.cons.mu)
            for row in F:
                rows_x.append(np.zeros(nx))
                rows_z.append(np.r_[np.zeros(nu), -row])
                bounds.append(0.0)
        self.lin_Cx = np.array(rows_x).reshape(-1, nx)
        self.lin_Cz = np.array(rows_z).reshape(-1, nz)
        self.lin_b = np.array(bounds)

    def _setup_balance(self):
        cons = self.cons
        self.W_eq_z = np.zeros((self.n_eq, self.nz))
        if cons.mode in (Mode.FULL, Mode.ROBUST):
            arr = cons.arrangement
            ia = arr.inertial_arrays()
            mass = ia["mass"]
            self._mass, self._com, self._inertia = mass, ia["com"], ia["inertia"]
            self._sqrtN = np.sqrt(arr.N)
            self._gravity = arr.gravity
            inv_m = np.repeat(1.0 / mass, 6)
            self.W_eq_z[:, self.nu :] = inv_m[:, None] * arr.wrench_matrix(cons.scalar)
            self._inv_m = inv_m

    # --- nonlinear node functions -------------------------------------------

    def _make_eval(self):
        links, offsets, radii = self.chain.sphere_arrays()
        params = {
            "arrs": self.chain.arrays(),
            "links": jnp.asarray(links, dtype=int),
            "offsets": jnp.asarray(offsets),
            "radii": jnp.asarray(radii),
        }
        if self.cons.mode in (Mode.FULL, Mode.ROBUST):
            params.update(
                mass=jnp.asarray(self._mass), com=jnp.asarray(self._com), inertia=jnp.asarray(self._inertia),
                gravity=jnp.asarray(self._gravity), scale=jnp.asarray(self._inv_m / self._sqrtN),
            )
        mode = self.cons.mode.value

        def run(*args):
            return _node_eval(params, mode, self.n, *args)

        return run

    def _scene_arrays(self, scene: SceneModel | None):
        K = self.K
        obs_c, obs_r = (scene or SceneModel()).obstacle_arrays()
        pad = (-len(obs_r)) % _OBSTACLE_BLOCK if len(obs_r) else _OBSTACLE_BLOCK
        obs_c = np.vstack([obs_c, np.tile([_FAR, _FAR, _FAR], (pad, 1))])
        obs_r = np.r_[obs_r, np.ones(pad)]
        tube = scene.tube if scene is not None else None
        if tube is None:
            samples = np.tile([_FAR, _FAR, _FAR], (K + 1, 1)) + np.arange(K + 1)[:, None]
            active = np.zeros(K + 1, dtype=bool)
            clearance = 0.0
        else:
            samples = tube.positions
            active = np.ones(K + 1, dtype=bool) if tube.active is None else tube.active
            clearance = self.ocp.tube_clearance + tube.radius
        return obs_c, obs_r, samples, active, clearance

    def evaluate(self, X, scene: SceneModel | None = None) -> NodeValues:
        obs_c, obs_r, samples, active, clearance = self._scene_arrays(scene)
        out = self._eval(
            jnp.asarray(X), jnp.asarray(obs_c), jnp.asarray(obs_r), jnp.asarray(samples),
            jnp.arange(self.K + 1), clearance, jnp.asarray(active),
        )
        out = [np.asarray(o) for o in out]
        K1 = self.K + 1
        return NodeValues(
            r_e=out[0], J_r=out[1], eq=out[2].reshape(K1, -1), J_eq=out[3].reshape(K1, -1, self.nx),
            coll=out[4].reshape(K1, -1), J_coll=out[5].reshape(K1, -1, self.n),
            tube=out[6], J_tube=out[7],
        )

    # --- residuals -----------------------------------------------------------

    def equality_residual(self, vals: NodeValues, Z) -> np.ndarray:
        """Soft equality rows at nodes 0..K-1 (balance residual or tray-normal components)."""
        return vals.eq[:-1] + Z @ self.W_eq_z.T

    def inequality_rows(self, X, Z, vals: NodeValues, scene=None):
        """Rows ``g <= 0`` per interval node and for the terminal node, with weights."""
        K = self.K
        g_lin = X[:-1] @ self.lin_Cx.T + Z @ self.lin_Cz.T - self.lin_b
        n_coll = vals.coll.shape[1]
        g = np.concatenate([g_lin, -vals.coll[:-1], -vals.tube[:-1, None]], axis=1)
        xl = slice(0, self.n_xlim)
        gN = np.concatenate([X[-1] @ self.lin_Cx[xl].T - self.lin_b[xl], -vals.coll[-1], -vals.tube[-1:]])
        n_cone = self.cons.n_cone_rows
        w_path = np.r_[
            np.full(len(self.lin_b) - n_cone, self.ocp.slack_weight),
            np.full(n_cone, self.ocp.force_slack_weight),
            np.full(n_coll, self.ocp.slack_weight),
            self.ocp.tube_weight,
        ]
        w_term = np.r_[np.full(self.n_xlim + n_coll, self.ocp.slack_weight), self.ocp.tube_weight]
        return g, np.broadcast_to(w_path, (K, len(w_path))), gN, w_term

    def cost(self, X, Z, r_d, scene=None) -> float:
        """Soft-constrained objective (slacks at their optimal values)."""
        vals = self.evaluate(X, scene)
        dt = self.ocp.dt
        er = vals.r_e - r_d
        J = 0.5 * dt * np.einsum("ki,ij,kj->", er, self.ocp.W_r, er)
        J += 0.5 * dt * np.einsum("ki,ij,kj->", X, self.ocp.W_x, X)
        U, F = Z[:, : self.nu], Z[:, self.nu :]
        J += 0.5 * dt * (np.einsum("ki,ij,kj->", U, self.ocp.W_u, U) + self.ocp.w_f * np.sum(F**2))
        h = self.equality_residual(vals, Z)
        J += self.ocp.slack_weight * np.sum(h**2)
        g, w, gN, wN = self.inequality_rows(X, Z, vals, scene)
        J += _penalty(g, w) + _penalty(gN, wN)
        return float(J)

    # --- Gauss-Newton QP -------------------------------------------------------

    def build_qp(self, X, Z, r_d, scene: SceneModel | None = None, x0=None) -> tuple[StructuredQP, NodeValues]:
        """QP in the deviations (dx, dz) about the trajectory (X, Z)."""
        ocp = self.ocp
        K, n, nx, nz, nu = self.K, self.n, self.nx, self.nz, self.nu
        dt = ocp.dt
        ws = ocp.slack_weight
        vals = self.evaluate(X, scene)
        # cost
        Jr = np.zeros((K + 1, 3, nx))
        Jr[:, :, :n] = vals.J_r
        WJ = ocp.W_r @ Jr
        Q = dt * (np.swapaxes(Jr, 1, 2) @ WJ + ocp.W_x)
        er = vals.r_e - r_d
        q = dt * (np.einsum("kji,kj->ki", WJ, er) + X @ ocp.W_x)
        Rz = np.zeros((nz, nz))
        Rz[:nu, :nu] = ocp.W_u
        Rz[nu:, nu:] = ocp.w_f * np.eye(self.nf)
        R = np.broadcast_to(dt * Rz, (K, nz, nz)).copy()
        r = dt * Z @ Rz
        S = np.zeros((K, nz, nx))
        # soft equalities as least squares
        if self.n_eq:
            h = self.equality_residual(vals, Z)
            Jx = vals.J_eq[:-1]
            Jz = self.W_eq_z
            Q[:-1] += 2 * ws * np.swapaxes(Jx, 1, 2) @ Jx
            S += 2 * ws * (Jz.T @ Jx)
            R += 2 * ws * (Jz.T @ Jz)
            q[:-1] += 2 * ws * np.einsum("kji,kj->ki", Jx, h)
            r += 2 * ws * h @ Jz
        # inequalities
        g, w, gN, wN = self.inequality_rows(X, Z, vals, scene)
        n_lin = len(self.lin_b)
        n_coll = vals.coll.shape[1]
        m = g.shape[1]
        Cx = np.zeros((K, m, nx))
        Cz = np.zeros((K, m, nz))
        Cx[:, :n_lin] = self.lin_Cx
        Cz[:, :n_lin] = self.lin_Cz
        Cx[:, n_lin : n_lin + n_coll, :n] = -vals.J_coll[:-1]
        Cx[:, -1, :n] = -vals.J_tube[:-1]
        CxN = np.zeros((len(gN), nx))
        CxN[: self.n_xlim] = self.lin_Cx[: self.n_xlim]
        CxN[self.n_xlim : self.n_xlim + n_coll, :n] = -vals.J_coll[-1]
        CxN[-1, :n] = -vals.J_tube[-1]
        # dynamics defects
        c = X[:-1] @ self.A.T + Z @ self.B.T - X[1:]
        x0d = np.zeros(nx) if x0 is None else np.asarray(x0) - X[0]
        qp = StructuredQP(
            A=np.broadcast_to(self.A, (K, nx, nx)),
            B=np.broadcast_to(self.B, (K, nx, nz)),
            c=c, Q=Q, q=q, S=S, R=R, r=r,
            Cx=Cx, Cz=Cz, d=-g, w=np.array(w),
            CxN=CxN, dN=-gN, wN=np.array(wN),
            x0=x0d,
        )
        return qp, vals


def collision_distances(chain: KinematicChain, x, scene: SceneModel, ocp: OCPDefinition | None = None) -> np.ndarray:
    """Signed distances of every (robot sphere, obstacle) pair, then the tube row if present.

    The tube entry is the EE's distance to the predicted ball path minus the
    clearance ``d + r_ball``.
    """
    q = np.asarray(getattr(x, "q", x), dtype=float)[: chain.dof]
    arrs = chain.arrays()
    links, offsets, radii = chain.sphere_arrays()
    out = []
    obs_c, obs_r = scene.obstacle_arrays()
    if len(links) and len(obs_r):
        c = np.asarray(sphere_centers(arrs, jnp.asarray(links), jnp.asarray(offsets), q))
        d = np.linalg.norm(c[:, None, :] - obs_c[None, :, :], axis=-1)
        out.append((d - radii[:, None] - obs_r[None, :]).ravel())
    if scene.tube is not None:
        d_clear = (ocp.tube_clearance if ocp is not None else 0.35) + scene.tube.radius
        p = np.asarray(fk_pose(arrs, q)[1])
        out.append(np.array([float(tube_distance(p, jnp.asarray(scene.tube.positions), 0)) - d_clear]))
    return np.concatenate(out) if out else np.zeros(0)
