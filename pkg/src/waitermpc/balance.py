"""Balanced-object model: wrenches, friction pyramids, ZMP and an LP oracle.

Geometry is expressed in the end-effector (tray) frame.  Objects are assumed
to stick to the tray, so each object's motion follows from the EE state.
Each contact force is stored once, as the force acting on the *supported*
body; the supporting body (another object, or the tray) receives its negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import jax.numpy as jnp
import numpy as np
from scipy.optimize import linprog

from .kinematics import GRAVITY, EEState, skew

TRAY = -1

# rows of the pyramid matrix in (normal, t1, t2) coordinates, mu column apart
_PYRAMID_SIGNS = np.array([[0.0, 0.0], [-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])


class BalanceError(ValueError):
    pass


class OracleError(RuntimeError):
    """The LP solver failed for a reason other than infeasibility."""


@dataclass
class RigidObject:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    contact_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.com = np.asarray(self.com, dtype=float)
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.mass <= 0:
            raise BalanceError(f"object {self.name!r}: mass must be positive")
        J = self.inertia
        if J.shape != (3, 3) or not np.allclose(J, J.T, atol=1e-12):
            raise BalanceError(f"object {self.name!r}: inertia must be a symmetric 3x3 matrix")
        lam = np.linalg.eigvalsh(J)
        if lam[0] < -1e-12:
            raise BalanceError(f"object {self.name!r}: inertia is not positive semidefinite")
        tol = 1e-9 * max(lam[-1], 1e-12)
        if lam[2] > lam[0] + lam[1] + tol:
            raise BalanceError(f"object {self.name!r}: inertia violates the triangle inequality")


def box_inertia(mass: float, dims) -> np.ndarray:
    """Inertia about the centroid of a uniform box with side lengths (w, d, h)."""
    w, d, h = dims
    return mass / 12.0 * np.diag([d**2 + h**2, w**2 + h**2, w**2 + d**2])


@dataclass
class ContactPoint:
    position: np.ndarray  # EE frame
    normal: np.ndarray  # points into the supported body
    tangent: np.ndarray  # 3x2 orthonormal basis of the contact plane
    mu: float
    mu_nominal: float
    supporter: int  # object index, or TRAY
    supported: int
    patch: int = 0

    def __post_init__(self):
        n, S = self.normal, self.tangent
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise BalanceError("contact normal must be a unit vector")
        if np.abs(S.T @ S - np.eye(2)).max() > 1e-9 or np.abs(S.T @ n).max() > 1e-9:
            raise BalanceError("contact tangent basis must be orthonormal and normal to n")
        if self.mu < 0:
            raise BalanceError("friction coefficient must be non-negative")


@dataclass
class Patch:
    """Polygonal contact patch; a contact point sits at every vertex."""

    vertices: np.ndarray  # (k, 3), ordered around the polygon
    normal: np.ndarray
    mu: float
    mu_nominal: float
    supporter: int
    supported: int
    group: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        if self.vertices.ndim != 2 or self.vertices.shape[0] < 3:
            raise BalanceError("a patch needs at least three vertices")

    def tangent_basis(self) -> np.ndarray:
        # first tangent follows the EE x-axis (y-axis for planes normal to x)
        n = self.normal
        e = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        t1 = e - n * (n @ e)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        return np.column_stack([t1, t2])

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def polygon2d(self) -> np.ndarray:
        """Vertices in (t1, t2) coordinates about the centroid."""
        return (self.vertices - self.centroid()) @ self.tangent_basis()

    def shrunk(self, margin: float) -> "Patch":
        """Offset every edge of the (convex) patch inward by ``margin``."""
        if margin <= 0:
            return replace(self)
        S = self.tangent_basis()
        c = self.centroid()
        P = self.polygon2d()
        k = len(P)
        # inward edge normals in 2-D; orientation taken from the signed area
        area = 0.5 * sum(P[i, 0] * P[(i + 1) % k, 1] - P[(i + 1) % k, 0] * P[i, 1] for i in range(k))
        sgn = 1.0 if area > 0 else -1.0
        normals, offsets = [], []
        for i in range(k):
            e = P[(i + 1) % k] - P[i]
            m = sgn * np.array([-e[1], e[0]]) / np.linalg.norm(e)
            normals.append(m)
            offsets.append(m @ P[i] + margin)
        out = []
        for i in range(k):
            A = np.array([normals[i - 1], normals[i]])
            b = np.array([offsets[i - 1], offsets[i]])
            out.append(np.linalg.solve(A, b))
        out = np.asarray(out)
        # make sure the offset did not invert the polygon
        for i in range(k):
            if normals[i] @ (np.zeros(2) - out[i]) < -1e-12:
                raise BalanceError("support margin larger than the patch")
        return replace(self, vertices=c + out @ S.T)


@dataclass
class Arrangement:
    objects: list
    patches: list
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.contacts = []
        for obj in self.objects:
            obj.contact_ids = []
        for k, p in enumerate(self.patches):
            for b in (p.supporter, p.supported):
                if b != TRAY and not 0 <= b < len(self.objects):
                    raise BalanceError(f"patch {k} references unknown body {b}")
            if p.supported == TRAY or p.supported == p.supporter:
                raise BalanceError(f"patch {k}: supported body must be an object")
            if not p.group:
                p.group = f"patch{k}"
            S = p.tangent_basis()
            for v in p.vertices:
                cid = len(self.contacts)
                self.contacts.append(
                    ContactPoint(v.copy(), p.normal.copy(), S, p.mu, p.mu_nominal, p.supporter, p.supported, k)
                )
                self.objects[p.supported].contact_ids.append(cid)
                if p.supporter != TRAY:
                    self.objects[p.supporter].contact_ids.append(cid)
        for obj in self.objects:
            pts = np.array([self.contacts[i].position for i in obj.contact_ids]).reshape(-1, 3)
            if len(pts) < 3 or np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-9) < 2:
                raise BalanceError(f"object {obj.name!r} needs three non-collinear contact points")

    @property
    def N(self) -> int:
        return len(self.contacts)

    @property
    def groups(self) -> list:
        seen = []
        for p in self.patches:
            if p.group not in seen:
                seen.append(p.group)
        return seen

    def contact_groups(self) -> np.ndarray:
        """Index into :attr:`groups` for every contact."""
        names = self.groups
        return np.array([names.index(self.patches[c.patch].group) for c in self.contacts], dtype=int)

    def mu_vector(self) -> np.ndarray:
        return np.array([c.mu for c in self.contacts])

    def with_mu(self, mu_per_contact) -> "Arrangement":
        """Copy with friction replaced; ``mu_per_contact`` is indexed by contact."""
        mu = np.broadcast_to(np.asarray(mu_per_contact, dtype=float), (self.N,))
        patches = []
        for k, p in enumerate(self.patches):
            ids = [i for i, c in enumerate(self.contacts) if c.patch == k]
            patches.append(replace(p, mu=float(mu[ids[0]])))
        return Arrangement([replace(o) for o in self.objects], patches, self.gravity.copy())

    def shrunk(self, margin: float) -> "Arrangement":
        return Arrangement(
            [replace(o) for o in self.objects], [p.shrunk(margin) for p in self.patches], self.gravity.copy()
        )

    # --- constant matrices ---------------------------------------------------

    def wrench_matrix(self, scalar: bool = False) -> np.ndarray:
        """Map contact forces to the stacked per-object contact wrenches (6 n_obj rows)."""
        m = 1 if scalar else 3
        W = np.zeros((6 * len(self.objects), m * self.N))
        for i, c in enumerate(self.contacts):
            basis = c.normal[:, None] if scalar else np.eye(3)
            cols = slice(m * i, m * (i + 1))
            for body, sign in ((c.supported, 1.0), (c.supporter, -1.0)):
                if body == TRAY:
                    continue
                r = c.position - self.objects[body].com
                W[6 * body : 6 * body + 3, cols] += sign * basis
                W[6 * body + 3 : 6 * body + 6, cols] += sign * skew(r) @ basis
        return W

    def pyramid_matrix(self, mu=None) -> np.ndarray:
        """Block-diagonal stack of the 5x3 pyramid matrices; ``F xi >= 0`` inside."""
        mu = self.mu_vector() if mu is None else np.broadcast_to(mu, (self.N,))
        F = np.zeros((5 * self.N, 3 * self.N))
        for i, c in enumerate(self.contacts):
            F[5 * i : 5 * i + 5, 3 * i : 3 * i + 3] = pyramid_rows(c.normal, c.tangent, mu[i])
        return F

    def inertial_arrays(self) -> dict:
        return {
            "mass": np.array([o.mass for o in self.objects]),
            "com": np.array([o.com for o in self.objects]),
            "inertia": np.array([o.inertia for o in self.objects]),
        }


def pyramid_rows(normal, tangent, mu: float) -> np.ndarray:
    """The 5x3 matrix whose rows are ``f_n >= 0`` and ``mu f_n +- t1 +- t2 >= 0``."""
    M = np.zeros((5, 3))
    M[0, 0] = 1.0
    M[1:, 0] = mu
    M[:, 1:] = _PYRAMID_SIGNS
    return M @ np.vstack([normal, tangent.T])


# ---------------------------------------------------------------------------
# wrenches


def gravito_inertial_wrench(e: EEState, obj: RigidObject, gravity=GRAVITY) -> np.ndarray:
    w, om, omd = e.vdot, e.omega, e.omegadot
    c = obj.com
    g_body = e.R.T @ gravity
    f = -obj.mass * (w - g_body) - obj.mass * (np.cross(omd, c) + np.cross(om, np.cross(om, c)))
    tau = -(obj.inertia @ omd + np.cross(om, obj.inertia @ om))
    return np.concatenate([f, tau])


def gi_wrenches_jnp(R, varpi_dot, varpi, mass, com, inertia, gravity):
    """Stacked gravito-inertial wrenches of all objects (jax version)."""
    vd, om, omd = varpi_dot[:3], varpi[3:], varpi_dot[3:]
    g_body = R.T @ gravity
    lin = vd - g_body
    rot = jnp.cross(omd[None], com) + jnp.cross(om[None], jnp.cross(om[None], com))
    f = -mass[:, None] * (lin[None] + rot)
    Jw = jnp.einsum("kij,j->ki", inertia, om)
    tau = -(jnp.einsum("kij,j->ki", inertia, omd) + jnp.cross(om[None], Jw))
    return jnp.concatenate([f, tau], axis=1).reshape(-1)


def _full_forces(forces, arr: Arrangement) -> np.ndarray:
    forces = np.asarray(forces, dtype=float)
    if forces.shape == (arr.N,):
        return (forces[:, None] * np.array([c.normal for c in arr.contacts])).reshape(-1)
    if forces.shape == (3 * arr.N,):
        return forces
    raise BalanceError(f"force vector of length {forces.size} does not match {arr.N} contacts")


def contact_wrench(forces, arr: Arrangement, obj_id: int) -> np.ndarray:
    """Total contact wrench on one object, about its CoM (accepts scalar or full forces)."""
    if not 0 <= obj_id < len(arr.objects):
        raise BalanceError(f"unknown object id {obj_id}")
    xi = _full_forces(forces, arr)
    W = arr.wrench_matrix()
    return W[6 * obj_id : 6 * obj_id + 6] @ xi


def friction_pyramid_residual(f, cp: ContactPoint) -> np.ndarray:
    return pyramid_rows(cp.normal, cp.tangent, cp.mu) @ np.asarray(f, dtype=float)


def balance_residual(e: EEState, forces, arr: Arrangement, scaled: bool = True) -> np.ndarray:
    """Newton-Euler residual of every object, stacked.

    With ``scaled`` each object's rows are ``(w_C + w_GI / sqrt(N)) / m``, the
    form used inside the controller; otherwise ``w_C + w_GI``.
    """
    xi = _full_forces(forces, arr)
    wc = arr.wrench_matrix() @ xi
    out = []
    for k, obj in enumerate(arr.objects):
        wgi = gravito_inertial_wrench(e, obj, arr.gravity)
        if scaled:
            out.append((wc[6 * k : 6 * k + 6] + wgi / np.sqrt(arr.N)) / obj.mass)
        else:
            out.append(wc[6 * k : 6 * k + 6] + wgi)
    return np.concatenate(out)


def required_wrenches(e: EEState, arr: Arrangement) -> np.ndarray:
    """Contact wrenches ``-w_GI`` every object needs, stacked."""
    return -np.concatenate([gravito_inertial_wrench(e, o, arr.gravity) for o in arr.objects])


# ---------------------------------------------------------------------------
# zero-moment point


@dataclass
class SupportPlane:
    point: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray  # 3x2
    polygon: np.ndarray  # (k, 2) in tangent coordinates about ``point``

    @classmethod
    def from_patch(cls, patch: Patch) -> "SupportPlane":
        return cls(patch.centroid(), patch.normal, patch.tangent_basis(), patch.polygon2d())


def support_plane(arr: Arrangement, obj_id: int) -> SupportPlane:
    """Plane of the first patch supporting the object."""
    for p in arr.patches:
        if p.supported == obj_id:
            return SupportPlane.from_patch(p)
    raise BalanceError(f"object {obj_id} has no supporting patch")


def zmp(e: EEState, obj: RigidObject, plane: SupportPlane, gravity=GRAVITY) -> np.ndarray:
    """Zero-moment point of the required contact wrench, in plane coordinates [m]."""
    w = -gravito_inertial_wrench(e, obj, gravity)
    f, tau = w[:3], w[3:]
    fn = plane.normal @ f
    if fn <= 0:
        raise BalanceError("object unloaded: required normal force is not positive")
    tau_o = tau - np.cross(plane.point - obj.com, f)
    d = np.cross(plane.normal, tau_o) / fn
    return plane.tangent.T @ d


def polygon_margin(p2, polygon) -> float:
    """Signed distance from a point to the boundary of a convex polygon (positive inside)."""
    P = np.asarray(polygon)
    k = len(P)
    area = 0.5 * sum(P[i, 0] * P[(i + 1) % k, 1] - P[(i + 1) % k, 0] * P[i, 1] for i in range(k))
    sgn = 1.0 if area > 0 else -1.0
    best = np.inf
    for i in range(k):
        e = P[(i + 1) % k] - P[i]
        m = sgn * np.array([-e[1], e[0]]) / np.linalg.norm(e)
        best = min(best, m @ (np.asarray(p2) - P[i]))
    return float(best)


# ---------------------------------------------------------------------------
# LP feasibility oracle


@dataclass
class OracleResult:
    feasible: bool
    forces: np.ndarray | None
    margin: float  # largest uniform slack of the pyramid rows (force units)


_MARGIN_CAP = 1e3


def _margin_lp(W, b, F, tol=1e-9):
    """max t s.t. W xi = b, F xi >= t, t <= cap.  Returns (t, xi) or (None, None)."""
    nx = W.shape[1]
    c = np.zeros(nx + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-F, np.ones((F.shape[0], 1))])
    A_eq = np.hstack([W, np.zeros((W.shape[0], 1))])
    bounds = [(None, None)] * nx + [(None, _MARGIN_CAP)]
    # HiGHS occasionally ends in an "unknown" state on degenerate instances; retry
    # with the other algorithms and a slightly looser tolerance before giving up
    for method, t in (("highs", tol), ("highs-ipm", tol), ("highs-ds", 10 * tol)):
        res = linprog(
            c,
            A_ub=A_ub,
            b_ub=np.zeros(F.shape[0]),
            A_eq=A_eq,
            b_eq=b,
            bounds=bounds,
            method=method,
            options={"primal_feasibility_tolerance": t, "dual_feasibility_tolerance": t},
        )
        if res.status in (0, 2):
            break
    if res.status == 2:
        return None, None
    if res.status != 0:
        raise OracleError(f"LP solver failed: {res.message}")
    return float(res.x[-1]), res.x[:-1]


def oracle_matrices(arr: Arrangement, scalar: bool = False, mu=None):
    W = arr.wrench_matrix(scalar)
    if scalar:
        F = np.eye(arr.N)
    else:
        F = arr.pyramid_matrix(mu)
    return W, F


def feasibility_oracle(
    e: EEState, arr: Arrangement, scalar: bool = False, mu=None, tol: float = 1e-8
) -> OracleResult:
    """Decide whether contact forces exist that balance every object at EE state ``e``.

    Constraints are the unscaled Newton-Euler equations with the pyramids of
    ``arr`` (or of ``mu`` when given).  In ``scalar`` mode each force is a
    non-negative multiple of its normal, the zero-friction parameterization.
    """
    W, F = oracle_matrices(arr, scalar, mu)
    b = required_wrenches(e, arr)
    t, xi = _margin_lp(W, b, F)
    if t is None or t < -tol:
        return OracleResult(False, None, -np.inf if t is None else t)
    return OracleResult(True, xi, t)


def contact_utilization(xi, arr: Arrangement, mu=None) -> np.ndarray:
    """Per-contact ``||f_t||_1 / (mu f_n)`` of full-mode forces."""
    mu = arr.mu_vector() if mu is None else np.broadcast_to(mu, (arr.N,))
    f = np.asarray(xi).reshape(-1, 3)
    out = np.zeros(arr.N)
    for i, c in enumerate(arr.contacts):
        fn = c.normal @ f[i]
        ft = np.abs(c.tangent.T @ f[i]).sum()
        if ft <= 1e-12:
            out[i] = 0.0
        elif fn <= 1e-12 or mu[i] == 0:
            out[i] = np.inf
        else:
            out[i] = ft / (mu[i] * fn)
    return out


def friction_utilization(e: EEState, arr: Arrangement, s_max: float = 20.0, tol: float = 1e-3) -> float:
    """Smallest fraction ``s`` of the true friction that still admits balance.

    Equivalently the least achievable worst-contact ``||f_t||_1 / (mu f_n)``.
    Returns ``inf`` when no friction up to ``s_max * mu`` balances the objects
    (the arrangement would tip or separate rather than slip).
    """
    W = arr.wrench_matrix()
    b = required_wrenches(e, arr)
    mu = arr.mu_vector()
    t, xi = _margin_lp(W, b, arr.pyramid_matrix(0.0 * mu))
    if t is not None and t >= -1e-8:
        return 0.0
    lo, hi = 0.0, s_max
    t, xi = _margin_lp(W, b, arr.pyramid_matrix(hi * mu))
    if t is None or t < -1e-8:
        return np.inf
    hi = min(hi, float(np.max(contact_utilization(xi, arr))))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        t, xi = _margin_lp(W, b, arr.pyramid_matrix(mid * mu))
        if t is not None and t >= -1e-8:
            hi = min(mid, float(np.max(contact_utilization(xi, arr))))
        else:
            lo = mid
    return hi
