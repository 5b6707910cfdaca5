"""Robot state, triple-integrator dynamics and forward kinematics.

The robot is modelled kinematically: the state is ``x = [q, v, vdot]`` and the
input is the generalized jerk.  Forward kinematics is written with
``jax.numpy`` so that the controller can differentiate it; the public helpers
in this module accept and return plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

PRISMATIC = 0
REVOLUTE = 1
_KINDS = {"prismatic": PRISMATIC, "revolute": REVOLUTE}

GRAVITY = np.array([0.0, 0.0, -9.81])


class KinematicsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations


def rpy_to_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw angles to a rotation matrix, R = Rz Ry Rx."""
    return np.asarray(_rpy_to_matrix(jnp.asarray(rpy, dtype=float)))


def _rpy_to_matrix(rpy):
    r, p, y = rpy[0], rpy[1], rpy[2]
    cr, sr = jnp.cos(r), jnp.sin(r)
    cp, sp = jnp.cos(p), jnp.sin(p)
    cy, sy = jnp.cos(y), jnp.sin(y)
    return jnp.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def _axis_angle(axis, angle):
    k = jnp.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return jnp.eye(3) + jnp.sin(angle) * k + (1.0 - jnp.cos(angle)) * (k @ k)


def skew(a):
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def tilt_angle(R) -> float:
    """Angle [rad] between the frame's z-axis and world up."""
    return float(np.arccos(np.clip(R[2, 2], -1.0, 1.0)))


# ---------------------------------------------------------------------------
# state and dynamics


@dataclass
class RobotState:
    q: np.ndarray
    v: np.ndarray
    vdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.vdot = np.asarray(self.vdot, dtype=float)
        if not (self.q.shape == self.v.shape == self.vdot.shape) or self.q.ndim != 1:
            raise KinematicsError("q, v and vdot must be vectors of equal length")

    @property
    def dof(self) -> int:
        return self.q.shape[0]

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.v, self.vdot])

    @classmethod
    def from_vector(cls, x) -> "RobotState":
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 3
        if 3 * n != x.shape[0]:
            raise KinematicsError(f"state length {x.shape[0]} is not a multiple of 3")
        return cls(x[:n], x[n : 2 * n], x[2 * n :])

    @classmethod
    def zero(cls, n: int = 9) -> "RobotState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))


def discrete_matrices(dt: float, n: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretization of the triple integrator for ``n`` coordinates."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    A = np.block([[I, dt * I, 0.5 * dt**2 * I], [Z, I, dt * I], [Z, Z, I]])
    B = np.vstack([dt**3 / 6.0 * I, 0.5 * dt**2 * I, dt * I])
    return A, B


def integrate_state(x: RobotState, u, dt: float) -> RobotState:
    """Advance the state by ``dt`` under constant jerk ``u`` (exact)."""
    u = np.asarray(u, dtype=float)
    if dt <= 0:
        raise KinematicsError("dt must be positive")
    if u.shape != x.q.shape:
        raise KinematicsError(f"jerk has shape {u.shape}, expected {x.q.shape}")
    if not (np.all(np.isfinite(x.x)) and np.all(np.isfinite(u)) and np.isfinite(dt)):
        raise KinematicsError("non-finite state or input")
    q = x.q + x.v * dt + 0.5 * x.vdot * dt**2 + u * dt**3 / 6.0
    v = x.v + x.vdot * dt + 0.5 * u * dt**2
    a = x.vdot + u * dt
    return RobotState(q, v, a)


def integrate_vector(x, u, dt: float) -> np.ndarray:
    """Same as :func:`integrate_state` on a stacked state vector, no checks."""
    n = u.shape[0]
    q, v, a = x[:n], x[n : 2 * n], x[2 * n :]
    return np.concatenate(
        [
            q + v * dt + 0.5 * a * dt**2 + u * dt**3 / 6.0,
            v + a * dt + 0.5 * u * dt**2,
            a + u * dt,
        ]
    )


# ---------------------------------------------------------------------------
# chain description


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    axis: tuple = (0.0, 0.0, 1.0)
    xyz: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class LinkSphere:
    """Collision sphere rigidly attached to a link frame.

    ``link`` is the index of the joint whose child frame carries the sphere;
    ``-1`` is the world and ``len(joints)`` the end-effector frame.
    """

    name: str
    link: int
    offset: tuple
    radius: float


@dataclass
class KinematicChain:
    joints: list
    ee_xyz: tuple = (0.0, 0.0, 0.0)
    ee_rpy: tuple = (0.0, 0.0, 0.0)
    x_lower: np.ndarray | None = None
    x_upper: np.ndarray | None = None
    u_lower: np.ndarray | None = None
    u_upper: np.ndarray | None = None
    spheres: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.joints)
        for j in self.joints:
            if j.kind not in _KINDS:
                raise KinematicsError(f"joint {j.name!r}: unknown kind {j.kind!r}")
            if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                raise KinematicsError(f"joint {j.name!r}: axis must be a unit vector")
        if self.x_upper is None:
            self.x_upper = np.full(3 * n, np.inf)
        if self.x_lower is None:
            self.x_lower = -np.asarray(self.x_upper, dtype=float)
        if self.u_upper is None:
            self.u_upper = np.full(n, np.inf)
        if self.u_lower is None:
            self.u_lower = -np.asarray(self.u_upper, dtype=float)
        self.x_lower = np.asarray(self.x_lower, dtype=float)
        self.x_upper = np.asarray(self.x_upper, dtype=float)
        self.u_lower = np.asarray(self.u_lower, dtype=float)
        self.u_upper = np.asarray(self.u_upper, dtype=float)
        if self.x_lower.shape != (3 * n,) or self.x_upper.shape != (3 * n,):
            raise KinematicsError("state limits must have length 3*dof")
        if self.u_lower.shape != (n,) or self.u_upper.shape != (n,):
            raise KinematicsError("input limits must have length dof")
        if np.any(self.x_lower >= self.x_upper) or np.any(self.u_lower >= self.u_upper):
            raise KinematicsError("lower limits must be strictly below upper limits")
        self._arrays = None

    @property
    def dof(self) -> int:
        return len(self.joints)

    def arrays(self) -> dict:
        """Chain data as a pytree of arrays, the form consumed by jitted code."""
        if self._arrays is None:
            T = np.zeros((self.dof, 4, 4))
            for i, j in enumerate(self.joints):
                T[i] = _homogeneous(j.xyz, j.rpy)
            self._arrays = {
                "kinds": jnp.asarray([_KINDS[j.kind] for j in self.joints]),
                "axes": jnp.asarray([j.axis for j in self.joints], dtype=float),
                "fixed": jnp.asarray(T),
                "ee": jnp.asarray(_homogeneous(self.ee_xyz, self.ee_rpy)),
            }
        return self._arrays

    def sphere_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        links = np.array([s.link for s in self.spheres], dtype=int)
        offsets = np.array([s.offset for s in self.spheres], dtype=float).reshape(-1, 3)
        radii = np.array([s.radius for s in self.spheres], dtype=float)
        return links, offsets, radii


def _homogeneous(xyz, rpy) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rpy_to_matrix(rpy)
    T[:3, 3] = xyz
    return T


# ---------------------------------------------------------------------------
# jax kernels


def link_frames(arrs, q):
    """World transforms of every link frame, then the EE frame, stacked (n+1, 4, 4)."""
    T = jnp.eye(4)
    frames = []
    n = arrs["axes"].shape[0]
    for i in range(n):
        T = T @ arrs["fixed"][i]
        axis = arrs["axes"][i]
        rot = _axis_angle(axis, q[i])
        is_rev = arrs["kinds"][i] == REVOLUTE
        M_rot = jnp.eye(4).at[:3, :3].set(rot)
        M_pri = jnp.eye(4).at[:3, 3].set(axis * q[i])
        T = T @ jnp.where(is_rev, M_rot, M_pri)
        frames.append(T)
    frames.append(T @ arrs["ee"])
    return jnp.stack(frames)


def fk_pose(arrs, q):
    T = link_frames(arrs, q)[-1]
    return T[:3, :3], T[:3, 3]


def geometric_jacobian(arrs, q):
    """World-frame Jacobian of the EE origin, rows [linear; angular]."""
    frames = link_frames(arrs, q)
    p_e = frames[-1][:3, 3]
    n = arrs["axes"].shape[0]
    cols = []
    for i in range(n):
        # joint axis is fixed in the joint frame, so the moved frame gives it too
        a = frames[i][:3, :3] @ arrs["axes"][i]
        o = frames[i][:3, 3]
        is_rev = arrs["kinds"][i] == REVOLUTE
        lin = jnp.where(is_rev, jnp.cross(a, p_e - o), a)
        ang = jnp.where(is_rev, a, jnp.zeros(3))
        cols.append(jnp.concatenate([lin, ang]))
    return jnp.stack(cols, axis=1)


def ee_world_motion(arrs, q, v, a):
    """EE pose with world-frame twist and acceleration ``J a + Jdot v``."""
    R, p = fk_pose(arrs, q)
    Jv, Jdot_v = jax.jvp(lambda qq: geometric_jacobian(arrs, qq) @ v, (q,), (v,))
    acc = geometric_jacobian(arrs, q) @ a + Jdot_v
    return R, p, Jv, acc


def ee_body_motion(arrs, q, v, a):
    """EE pose with body-frame generalized velocity and acceleration.

    The body-frame acceleration is the world acceleration of the EE origin
    rotated into the EE frame, which is what the Newton-Euler equations of a
    body rigidly attached to the EE need.
    """
    R, p, tw, acc = ee_world_motion(arrs, q, v, a)
    Rt = R.T
    varpi = jnp.concatenate([Rt @ tw[:3], Rt @ tw[3:]])
    varpi_dot = jnp.concatenate([Rt @ acc[:3], Rt @ acc[3:]])
    return R, p, varpi, varpi_dot


def sphere_centers(arrs, links, offsets, q):
    frames = link_frames(arrs, q)
    world = jnp.eye(4)[None]
    frames = jnp.concatenate([world, frames])  # index 0 = world
    T = frames[links + 1]
    return jnp.einsum("kij,kj->ki", T[:, :3, :3], offsets) + T[:, :3, 3]


_fk_jit = jax.jit(fk_pose)
_body_jit = jax.jit(ee_body_motion)
_jac_jit = jax.jit(geometric_jacobian)
_spheres_jit = jax.jit(sphere_centers)


# ---------------------------------------------------------------------------
# public numpy API


@dataclass
class EEState:
    R: np.ndarray
    r: np.ndarray
    varpi: np.ndarray
    varpi_dot: np.ndarray

    @property
    def v(self):
        return self.varpi[:3]

    @property
    def omega(self):
        return self.varpi[3:]

    @property
    def vdot(self):
        return self.varpi_dot[:3]

    @property
    def omegadot(self):
        return self.varpi_dot[3:]

    @classmethod
    def at_rest(cls, R=None, r=None) -> "EEState":
        return cls(
            np.eye(3) if R is None else np.asarray(R, dtype=float),
            np.zeros(3) if r is None else np.asarray(r, dtype=float),
            np.zeros(6),
            np.zeros(6),
        )


def _check_dim(chain: KinematicChain, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise KinematicsError(f"q has shape {q.shape}, chain has {chain.dof} joints")
    return q


def forward_kinematics(chain: KinematicChain, q) -> tuple[np.ndarray, np.ndarray]:
    q = _check_dim(chain, q)
    R, p = _fk_jit(chain.arrays(), q)
    return np.asarray(R), np.asarray(p)


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    q = _check_dim(chain, q)
    return np.asarray(_jac_jit(chain.arrays(), q))


def ee_state(chain: KinematicChain, x: RobotState) -> EEState:
    q = _check_dim(chain, x.q)
    R, p, varpi, varpi_dot = _body_jit(chain.arrays(), q, x.v, x.vdot)
    return EEState(np.asarray(R), np.asarray(p), np.asarray(varpi), np.asarray(varpi_dot))


def robot_sphere_centers(chain: KinematicChain, q) -> np.ndarray:
    q = _check_dim(chain, q)
    links, offsets, _ = chain.sphere_arrays()
    if links.size == 0:
        return np.zeros((0, 3))
    return np.asarray(_spheres_jit(chain.arrays(), jnp.asarray(links), jnp.asarray(offsets), q))


# ---------------------------------------------------------------------------
# reference platform: omnidirectional base (x, y, yaw) carrying a UR10-like arm

# position / velocity / acceleration / jerk bounds of the 9 coordinates
REFERENCE_Q_MAX = np.r_[np.full(3, 10.0), np.full(6, 2 * np.pi)]
REFERENCE_V_MAX = np.r_[np.full(2, 1.1), np.full(3, 2.0), np.full(4, 3.0)]
REFERENCE_A_MAX = np.r_[np.full(2, 2.5), 1.0, np.full(6, 10.0)]
REFERENCE_U_MAX = np.r_[np.full(3, 20.0), np.full(6, 80.0)]

# arm configuration with the tray level (R_e = I), in front of the base at about 1.1 m
REFERENCE_HOME = np.r_[0.0, 0.0, 0.0, np.pi * np.array([0.0, -0.45, 0.7, -0.75, 0.5, -0.5])]


def reference_chain() -> KinematicChain:
    h = np.pi / 2
    joints = [
        Joint("base_x", "prismatic", (1.0, 0.0, 0.0)),
        Joint("base_y", "prismatic", (0.0, 1.0, 0.0)),
        Joint("base_yaw", "revolute", (0.0, 0.0, 1.0)),
        Joint("shoulder_pan", "revolute", (0.0, 0.0, 1.0), (0.27, 0.01, 0.653 + 0.1273)),
        Joint("shoulder_lift", "revolute", (0.0, 1.0, 0.0), (0.0, 0.220941, 0.0), (0.0, h, 0.0)),
        Joint("elbow", "revolute", (0.0, 1.0, 0.0), (0.0, -0.1719, 0.612)),
        Joint("wrist_1", "revolute", (0.0, 1.0, 0.0), (0.0, 0.0, 0.5723), (0.0, h, 0.0)),
        Joint("wrist_2", "revolute", (0.0, 0.0, 1.0), (0.0, 0.1149, 0.0)),
        Joint("wrist_3", "revolute", (0.0, 1.0, 0.0), (0.0, 0.0, 0.1157)),
    ]
    spheres = [
        LinkSphere("base", 2, (0.0, 0.0, 0.25), 0.55),
        LinkSphere("shoulder", 4, (0.0, 0.0, 0.0), 0.15),
        LinkSphere("forearm", 5, (0.0, 0.0, 0.3), 0.12),
        LinkSphere("wrist", 7, (0.0, 0.0, 0.0), 0.1),
        LinkSphere("tray", 9, (0.0, 0.0, 0.05), 0.25),
    ]
    x_max = np.r_[REFERENCE_Q_MAX, REFERENCE_V_MAX, REFERENCE_A_MAX]
    return KinematicChain(
        joints=joints,
        ee_xyz=(0.0, 0.0922 + 0.02, 0.0),
        ee_rpy=(-h, 0.0, 0.0),
        x_lower=-x_max,
        x_upper=x_max,
        u_lower=-REFERENCE_U_MAX,
        u_upper=REFERENCE_U_MAX,
        spheres=spheres,
    )
