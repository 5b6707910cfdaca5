"""Minimum statically-feasible friction coefficients of an arrangement.

Find the tray orientation and contact forces that hold every object at rest
with the smallest (weighted) friction coefficients.  Contacts are grouped so
that each group shares one coefficient.  Position does not matter, so only
roll and pitch are optimized; yaw stays at zero.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import linprog

from .balance import Arrangement, BalanceError, _margin_lp, contact_utilization, required_wrenches
from .kinematics import EEState, _rpy_to_matrix, rpy_to_matrix
from .ocp.qp import solve_dense_qp

log = logging.getLogger(__name__)

_MAX_TILT = 1.2  # rad; keeps away from the pitch singularity of the Euler angles


class MinMuError(RuntimeError):
    pass


@dataclass
class MinMuProblem:
    arrangement: Arrangement
    alpha: np.ndarray | None = None  # per contact

    def __post_init__(self):
        arr = self.arrangement
        if self.alpha is None:
            nominal = np.array([c.mu_nominal for c in arr.contacts])
            self.alpha = np.where(nominal > 0, 1.0 / np.where(nominal > 0, nominal, 1.0), 1.0)
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (arr.N,)).copy()
        if np.any(self.alpha <= 0):
            raise BalanceError("weights must be positive")

    @property
    def groups(self) -> list:
        return self.arrangement.groups

    def group_weights(self) -> np.ndarray:
        """Objective weight of each group's coefficient (sum over its contacts)."""
        gid = self.arrangement.contact_groups()
        return np.bincount(gid, weights=self.alpha, minlength=len(self.groups))

    def objective(self, mu_groups) -> float:
        mu = np.asarray(mu_groups, dtype=float)
        return float(0.5 * np.sum(self.group_weights() * mu**2))


@dataclass
class MinMuSolution:
    mu: np.ndarray  # per group
    theta: np.ndarray  # roll, pitch, yaw
    xi: np.ndarray  # full-mode witness forces
    objective: float
    kkt_residual: float = 0.0
    converged: bool = True
    groups: tuple = ()

    @property
    def R(self) -> np.ndarray:
        return rpy_to_matrix(self.theta)

    def mu_per_contact(self, arr: Arrangement) -> np.ndarray:
        return self.mu[arr.contact_groups()]

    def object_tilts(self, arr: Arrangement) -> np.ndarray:
        """Angle [rad] between each object's support normal and the world vertical."""
        return object_tilts(arr, self.R)


def object_tilts(arr: Arrangement, R) -> np.ndarray:
    out = np.zeros(len(arr.objects))
    for i in range(len(arr.objects)):
        p = next(p for p in arr.patches if p.supported == i)
        n = R @ p.normal
        out[i] = np.arccos(np.clip(n[2], -1.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# SQP


class _Model:
    """Scaled constraint functions in y = [roll, pitch, mu (G), xi (3N)]."""

    def __init__(self, problem: MinMuProblem):
        arr = problem.arrangement
        self.G = len(problem.groups)
        self.N = arr.N
        self.n = 2 + self.G + 3 * self.N
        masses = np.array([o.mass for o in arr.objects])
        g = np.linalg.norm(arr.gravity)
        self.scale = float(masses.sum() * g)
        W = arr.wrench_matrix() / self.scale
        gid = arr.contact_groups()
        normals = np.array([c.normal for c in arr.contacts])
        tangents = np.array([c.tangent for c in arr.contacts])
        grav = arr.gravity / self.scale
        self.a = problem.group_weights()
        G = self.G

        def split(y):
            return y[:2], y[2 : 2 + G], y[2 + G :]

        def eq(y):
            th, _, xi = split(y)
            R = _rpy_to_matrix(jnp.array([th[0], th[1], 0.0]))
            force = -(masses[:, None] * (R.T @ grav)[None, :])
            b = jnp.concatenate([force, jnp.zeros_like(force)], axis=1).ravel()
            return W @ xi - b

        def ineq(y):
            _, mu, xi = split(y)
            f = xi.reshape(-1, 3)
            fn = jnp.einsum("ij,ij->i", normals, f)
            ft = jnp.einsum("ijk,ij->ik", tangents, f)
            m = mu[gid] * fn
            rows = jnp.stack(
                [fn, m - ft[:, 0] - ft[:, 1], m - ft[:, 0] + ft[:, 1], m + ft[:, 0] - ft[:, 1], m + ft[:, 0] + ft[:, 1]],
                axis=1,
            ).ravel()
            return jnp.concatenate([rows, mu, _MAX_TILT - th_abs(y)])

        def th_abs(y):
            return jnp.concatenate([y[:2], -y[:2]])

        def lagrangian(y, nu, lam):
            _, mu, _ = split(y)
            return 0.5 * jnp.sum(self.a * mu**2) + nu @ eq(y) - lam @ ineq(y)

        self.eq = jax.jit(eq)
        self.ineq = jax.jit(ineq)
        self.jeq = jax.jit(jax.jacfwd(eq))
        self.jineq = jax.jit(jax.jacfwd(ineq))
        self.hess = jax.jit(jax.hessian(lagrangian))

    def grad_f(self, y):
        g = np.zeros(self.n)
        g[2 : 2 + self.G] = self.a * y[2 : 2 + self.G]
        return g

    def f(self, y):
        mu = y[2 : 2 + self.G]
        return 0.5 * float(np.sum(self.a * mu**2))


def _violation(ce, ci) -> float:
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(-ci, 0.0)))


def _sqp(model: _Model, y0, tol=1e-7, max_iter=200, prox=1e-4):
    y = np.asarray(y0, dtype=float).copy()
    rho = 1.0
    nu = np.zeros(len(np.asarray(model.eq(y))))
    lam = np.zeros(len(np.asarray(model.ineq(y))))
    kkt = np.inf
    for it in range(max_iter):
        ce = np.asarray(model.eq(y))
        ci = np.asarray(model.ineq(y))
        Je = np.asarray(model.jeq(y))
        Ji = np.asarray(model.jineq(y))
        gf = model.grad_f(y)
        stat = gf + Je.T @ nu - Ji.T @ lam
        kkt = max(
            float(np.max(np.abs(stat))),
            float(np.max(np.abs(ce))),
            float(np.max(np.maximum(-ci, 0.0))),
            float(np.max(np.abs(lam * ci))),
        )
        if kkt <= tol:
            return y, nu, lam, kkt, True, it
        H = np.asarray(model.hess(y, nu, lam))
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        H = (V * np.maximum(w, prox)) @ V.T
        sol = solve_dense_qp(H, gf, Je, -ce, -Ji, ci, tol=1e-10)
        d = sol.x
        rho = max(rho, 1.5 * float(np.max(np.abs(np.r_[sol.y, sol.lam, 0.0]))))
        phi0 = model.f(y) + rho * _violation(ce, ci)
        deriv = gf @ d - rho * _violation(ce, ci)
        alpha = 1.0
        while alpha > 1e-8:
            yn = y + alpha * d
            phi = model.f(yn) + rho * _violation(np.asarray(model.eq(yn)), np.asarray(model.ineq(yn)))
            if phi <= phi0 + 1e-4 * alpha * min(deriv, 0.0):
                break
            alpha *= 0.5
        y = y + alpha * d
        nu = sol.y
        lam = sol.lam
    return y, nu, lam, kkt, False, max_iter


def _initial_forces(arr: Arrangement, theta, mu_groups) -> np.ndarray:
    e = EEState.at_rest(rpy_to_matrix(theta))
    W = arr.wrench_matrix()
    b = required_wrenches(e, arr)
    t, xi = _margin_lp(W, b, arr.pyramid_matrix(mu_groups[arr.contact_groups()]))
    if xi is None:
        xi = np.linalg.lstsq(W, b, rcond=None)[0]
    return xi


def _snap_to_zero(model: _Model, arr: Arrangement, theta, mu, xi, threshold: float = 1e-4, rounds: int = 3):
    """Set near-zero coefficients to exactly zero when balance allows it.

    The interior-point subproblems approach the degenerate ``mu = 0`` vertex
    only at the rate of the complementarity tolerance, leaving the tilt off
    by about the same amount.  Each round solves an LP for the smallest tilt
    correction under the linearized gravity direction and accepts it once
    the exact LP at the corrected tilt is feasible.
    """
    small = mu < threshold
    if not small.any():
        return theta, mu, xi
    snapped = np.where(small, 0.0, mu)
    F = arr.pyramid_matrix(snapped[arr.contact_groups()])
    W = arr.wrench_matrix()
    th = np.asarray(theta, dtype=float).copy()
    for _ in range(rounds):
        e = EEState.at_rest(rpy_to_matrix(th))
        t, w = _margin_lp(W, required_wrenches(e, arr), F)
        if t is not None and t >= -1e-9:
            return th, snapped, w
        # b(th + d) ~ b(th) + B d, in units of the total weight
        y = np.r_[th[:2], snapped, np.zeros(3 * arr.N)]
        b0 = -np.asarray(model.eq(y))
        B = np.asarray(model.jeq(y))[:, :2] * -1.0
        nx = 3 * arr.N
        c = np.r_[np.zeros(nx + 2), np.ones(2)]
        A_eq = np.hstack([W / model.scale, -B, np.zeros((W.shape[0], 2))])
        I2 = np.eye(2)
        A_ub = np.block([[-F, np.zeros((F.shape[0], 4))], [np.zeros((2, nx)), I2, -I2], [np.zeros((2, nx)), -I2, -I2]])
        res = linprog(c, A_ub=A_ub, b_ub=np.zeros(A_ub.shape[0]), A_eq=A_eq, b_eq=b0,
                      bounds=[(None, None)] * (nx + 2) + [(0, None)] * 2, method="highs")
        if res.status != 0 or np.max(np.abs(res.x[nx : nx + 2])) > 1e-3:
            break
        th[:2] += res.x[nx : nx + 2]
    return np.asarray(theta, dtype=float), mu, xi


def solve_min_mu(problem: MinMuProblem, tol: float = 1e-7, starts=None) -> MinMuSolution:
    """Minimize 1/2 sum alpha_i mu_i^2 over tray orientation, forces and coefficients."""
    arr = problem.arrangement
    model = _Model(problem)
    G = model.G
    nominal = np.array([arr.contacts[arr.contact_groups().tolist().index(g)].mu_nominal for g in range(G)])
    mu0 = np.maximum(nominal, 0.1)
    if starts is None:
        d = np.deg2rad(5.0)
        starts = [(0.0, 0.0), (d, 0.0), (-d, 0.0), (0.0, d), (0.0, -d)]
    best = None
    for th in starts:
        xi0 = _initial_forces(arr, np.r_[th, 0.0], mu0) / model.scale
        y0 = np.r_[th, mu0, xi0]
        y, nu, lam, kkt, ok, iters = _sqp(model, y0, tol=tol)
        ce = np.asarray(model.eq(y))
        ci = np.asarray(model.ineq(y))
        feas = max(float(np.max(np.abs(ce))), float(np.max(np.maximum(-ci, 0.0))))
        obj = model.f(y)
        log.debug("start %s: %d iterations, obj %.3e kkt %.1e feas %.1e", th, iters, obj, kkt, feas)
        cand = (feas > 1e-6, not ok, round(obj, 10), tuple(np.round(y[:2], 9)))
        if best is None or cand < best[0]:
            best = (cand, y, kkt, ok, feas)
    _, y, kkt, ok, feas = best
    if feas > 1e-6:
        raise MinMuError("no statically feasible orientation found; arrangement infeasible for any friction")
    mu = np.maximum(y[2 : 2 + G], 0.0)
    theta = np.r_[y[:2], 0.0]
    xi = y[2 + G :] * model.scale
    theta, mu, xi = _snap_to_zero(model, arr, theta, mu, xi)
    return MinMuSolution(
        mu=mu,
        theta=theta,
        xi=xi,
        objective=problem.objective(mu),
        kkt_residual=float(kkt),
        converged=bool(ok),
        groups=tuple(problem.groups),
    )


# ---------------------------------------------------------------------------
# brute-force oracle


class _GridOracle:
    def __init__(self, problem: MinMuProblem):
        self.arr = problem.arrangement
        self.W = self.arr.wrench_matrix()
        self.gid = self.arr.contact_groups()
        self.G = len(problem.groups)
        self.a = problem.group_weights()
        self.lp_calls = 0

    def feasible(self, b, mu_groups):
        self.lp_calls += 1
        t, xi = _margin_lp(self.W, b, self.arr.pyramid_matrix(np.asarray(mu_groups)[self.gid]))
        if t is None or t < -1e-9:
            return None
        return xi

    def ray_min(self, b, d, s_hi, tol):
        """Smallest s with mu = s*d feasible (inf if not feasible at s_hi)."""
        xi = self.feasible(b, s_hi * d)
        if xi is None:
            return np.inf, None
        lo, hi = 0.0, s_hi

        def tighten(xi, hi):
            util = contact_utilization(xi, self.arr, np.asarray(d)[self.gid])
            util = np.where(np.isfinite(util), util, np.inf)
            return min(hi, float(np.max(util)) if util.size else hi)

        hi = tighten(xi, hi)
        best_xi = xi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            xi = self.feasible(b, mid * d)
            if xi is None:
                lo = mid
            else:
                hi = tighten(xi, mid)
                best_xi = xi
        return hi, best_xi

    def point(self, theta, J_best, mu_cap, tol):
        """Best (objective, mu, xi) at a fixed orientation, or None when it cannot beat J_best."""
        b = required_wrenches(EEState.at_rest(rpy_to_matrix(theta)), self.arr)
        if np.isfinite(J_best):
            corner = np.sqrt(2.0 * J_best / self.a)
            if self.feasible(b, corner + tol) is None:
                return None
        if self.G == 1:
            s, xi = self.ray_min(b, np.ones(1), mu_cap, tol)
            if not np.isfinite(s):
                return None
            mu = np.array([s])
            return 0.5 * float(self.a @ mu**2), mu, xi
        # componentwise minima (others at the cap) bound every feasible point below
        mins = np.zeros(self.G)
        gidx = np.arange(self.G)
        if self.feasible(b, np.full(self.G, mu_cap)) is None:
            return None
        for g in range(self.G):
            others = np.where(gidx == g, 0.0, mu_cap)
            if self.feasible(b, others) is not None:
                continue
            lo, hi = 0.0, mu_cap
            mask = self.gid == g
            while hi - lo > tol:
                if 0.5 * float(self.a @ np.where(gidx == g, lo, mins) ** 2) >= J_best:
                    return None
                mid = 0.5 * (lo + hi)
                xi = self.feasible(b, np.where(gidx == g, mid, mu_cap))
                if xi is None:
                    lo = mid
                else:
                    util = contact_utilization(xi, self.arr, np.where(mask, 1.0, mu_cap))
                    hi = min(mid, float(np.max(util[mask])))
            mins[g] = hi
        if 0.5 * float(self.a @ mins**2) >= J_best:
            return None
        xi = self.feasible(b, mins + tol)
        if xi is not None:
            return 0.5 * float(self.a @ mins**2), mins, xi
        if self.G > 2:
            raise MinMuError("brute-force oracle supports at most two sharing groups")
        # two groups: minimize over ray directions by golden-section on the angle
        def ray_value(phi):
            d = np.array([np.cos(phi), np.sin(phi)])
            s, xi = self.ray_min(b, d, mu_cap / max(d.min(), 1e-3), tol)
            mu = s * d
            return 0.5 * float(self.a @ mu**2), mu, xi

        phis = np.linspace(0.02, np.pi / 2 - 0.02, 9)
        vals = [ray_value(p) for p in phis]
        k = int(np.argmin([v[0] for v in vals]))
        lo, hi = phis[max(k - 1, 0)], phis[min(k + 1, len(phis) - 1)]
        gr = (np.sqrt(5) - 1) / 2
        best = vals[k]
        c1, c2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
        v1, v2 = ray_value(c1), ray_value(c2)
        for _ in range(14):
            if v1[0] < v2[0]:
                hi, c2, v2 = c2, c1, v1
                c1 = hi - gr * (hi - lo)
                v1 = ray_value(c1)
            else:
                lo, c1, v1 = c1, c2, v2
                c2 = lo + gr * (hi - lo)
                v2 = ray_value(c2)
            best = min(best, v1, v2, key=lambda v: v[0])
        return best


def min_mu_bruteforce(
    problem: MinMuProblem, resolution: float = np.deg2rad(0.1), span: float = np.deg2rad(25.0), mu_cap: float = 2.0
) -> MinMuSolution:
    """Grid search over roll/pitch with bisection on mu; an independent oracle.

    The grid is refined coarse to fine around the incumbent down to
    ``resolution``.  Orientations that cannot beat the incumbent are pruned
    with a single feasibility check.
    """
    if len(problem.groups) > 2:
        raise MinMuError("brute-force oracle supports at most two sharing groups")
    oracle = _GridOracle(problem)
    tol = 1e-5
    best = (np.inf, None, None, None)

    def visit(points):
        nonlocal best
        for th in points:
            res = oracle.point(np.r_[th, 0.0], best[0], mu_cap, tol)
            if res is not None and res[0] < best[0] - 1e-12:
                best = (res[0], res[1], res[2], np.asarray(th))

    step = np.deg2rad(2.5)
    ax = np.arange(-span, span + 1e-12, step)
    # visit from the centre outward so good incumbents appear early
    pts = sorted(itertools.product(ax, ax), key=lambda p: (p[0] ** 2 + p[1] ** 2, p))
    visit(pts)
    if best[3] is None:
        raise MinMuError("arrangement infeasible on the whole orientation grid")
    while step > resolution + 1e-12:
        step = max(step / 4.0, resolution)
        c = best[3]
        ax = np.arange(-3, 4) * step
        visit([(c[0] + i, c[1] + j) for i in ax for j in ax if i or j])
    J, mu, xi, th = best
    log.debug("brute force used %d LP calls", oracle.lp_calls)
    return MinMuSolution(mu=mu, theta=np.r_[th, 0.0], xi=xi, objective=J, groups=tuple(problem.groups))
