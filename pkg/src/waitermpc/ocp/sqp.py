"""Gauss-Newton SQP updates, warm starting and the affine feedback policy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..kinematics import integrate_vector
from .model import OCPModel
from .problem import BallTube, SceneModel
from .qp import QPError, solve_structured_qp

log = logging.getLogger(__name__)


class StalePolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Policy:
    """Time-varying affine law ``u = K (x* - x) + k`` valid on [t0, t0 + K dt]."""

    t0: float
    dt: float
    x_star: np.ndarray  # (K+1, nx)
    k: np.ndarray  # (K, nu) feedforward (the optimal input)
    gains: np.ndarray  # (K, nu, nx)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * len(self.k)

    def _locate(self, tau: float):
        if not (self.t0 - 1e-12 <= tau <= self.t_end + 1e-12):
            raise StalePolicyError(f"policy valid on [{self.t0:.4f}, {self.t_end:.4f}], queried at {tau:.4f}")
        s = (tau - self.t0) / self.dt
        i = min(int(np.floor(s + 1e-9)), len(self.k) - 1)
        return i, min(max(s - i, 0.0), 1.0)

    def state(self, tau: float) -> np.ndarray:
        i, a = self._locate(tau)
        return (1.0 - a) * self.x_star[i] + a * self.x_star[i + 1]

    def input(self, tau: float, x) -> np.ndarray:
        i, a = self._locate(tau)
        xs = (1.0 - a) * self.x_star[i] + a * self.x_star[i + 1]
        return self.gains[i] @ (xs - np.asarray(x)) + self.k[i]


def policy_input(policy: Policy, tau: float, x) -> np.ndarray:
    """Affine feedback input at time ``tau`` (zero-order hold on K and k, linear x*)."""
    return policy.input(tau, getattr(x, "x", x))


@dataclass
class Trajectory:
    t0: float
    X: np.ndarray  # (K+1, nx)
    Z: np.ndarray  # (K, nz)
    r_e: np.ndarray | None = None  # EE positions at the last linearization point


def cold_start(model: OCPModel, x0, t0: float = 0.0) -> Trajectory:
    """Constant-state trajectory at ``x0`` with zero inputs and forces."""
    X = np.tile(np.asarray(x0, dtype=float), (model.K + 1, 1))
    return Trajectory(t0, X, np.zeros((model.K, model.nz)))


def shift(traj: Trajectory, t_new: float, dt: float) -> Trajectory:
    """Re-sample a trajectory at nodes starting from ``t_new``.

    States are propagated exactly from the preceding node under the held
    input; past the end the last node is propagated with zero jerk.
    """
    K = len(traj.Z)
    n = traj.Z.shape[1]
    nu = traj.X.shape[1] // 3
    X = np.empty_like(traj.X)
    Z = np.empty_like(traj.Z)
    for j in range(K + 1):
        tau = t_new + j * dt - traj.t0
        i = int(np.floor(tau / dt + 1e-9))
        if i >= K:
            X[j] = integrate_vector(traj.X[K], np.zeros(nu), tau - K * dt) if tau > K * dt else traj.X[K]
            zj = traj.Z[K - 1].copy()
            zj[:nu] = 0.0
        else:
            i = max(i, 0)
            ds = tau - i * dt
            X[j] = integrate_vector(traj.X[i], traj.Z[i, :nu], ds) if ds > 1e-12 else traj.X[i]
            zj = traj.Z[i]
        if j < K:
            Z[j] = zj[:n]
    return Trajectory(t_new, X, Z)


@dataclass
class UpdateInfo:
    qp_iterations: int = 0
    kkt_residual: float = float("nan")
    cost: float = float("nan")
    wall_time: float = 0.0
    status: str = "ok"


def sqp_update(
    model: OCPModel,
    warm: Trajectory,
    t: float,
    x_hat,
    r_d,
    scene: SceneModel | None = None,
    iterations: int | None = None,
) -> tuple[Trajectory, Policy, UpdateInfo]:
    """Gauss-Newton SQP iterations (full steps) from the warm start.

    The feedback gains are the input rows of the Riccati gains of the last QP
    solve, sign-flipped to the ``K (x* - x)`` convention.
    """
    t_start = time.perf_counter()
    iterations = model.ocp.sqp_iterations if iterations is None else iterations
    X = warm.X.copy()
    Z = warm.Z.copy()
    X[0] = np.asarray(x_hat, dtype=float)
    info = UpdateInfo()
    sol = vals = None
    for _ in range(iterations):
        qp, vals = model.build_qp(X, Z, r_d, scene)
        sol = solve_structured_qp(qp, tol=model.ocp.qp_tol)
        info.qp_iterations += sol.iterations
        info.kkt_residual = sol.kkt_residual
        X = X + sol.x
        Z = Z + sol.z
    nu = model.nu
    policy = Policy(t0=t, dt=model.ocp.dt, x_star=X, k=Z[:, :nu].copy(), gains=-sol.gains[:, :nu, :].copy())
    info.wall_time = time.perf_counter() - t_start
    return Trajectory(t, X, Z, np.asarray(vals.r_e)), policy, info


def tube_activity(tube: BallTube, ee_positions) -> np.ndarray:
    """Node-wise passing test: a node keeps its row while the ball still approaches the EE."""
    rel = tube.positions - ee_positions
    return np.einsum("ki,ki->k", rel, tube.velocities) > 0.0


def augment_dynamic_obstacle(
    scene: SceneModel, ball_mean, t_nodes, ee_positions, gravity=np.array([0.0, 0.0, -9.81]), radius: float = 0.0
) -> SceneModel:
    """Scene with a tube around the ballistic prediction of ``ball_mean`` = [r_b, v_b].

    Rows at nodes where the ball has already passed the EE are removed.
    """
    b = np.asarray(ball_mean, dtype=float)
    t = np.asarray(t_nodes, dtype=float)[:, None]
    pos = b[:3] + b[3:] * t + 0.5 * gravity * t**2
    vel = b[3:] + gravity * t
    tube = BallTube(pos, vel, radius)
    tube.active = tube_activity(tube, ee_positions)
    return SceneModel(list(scene.obstacles), tube)


@dataclass
class MPCController:
    """Receding-horizon wrapper holding the warm start and the latest policy."""

    model: OCPModel
    init_iterations: int = 5
    trajectory: Trajectory | None = None
    policy: Policy | None = None
    status: str = "init"
    history: list = field(default_factory=list)

    def update(self, t: float, x_hat, r_d, scene: SceneModel | None = None) -> UpdateInfo:
        if self.trajectory is None:
            warm = cold_start(self.model, x_hat, t)
            iters = self.init_iterations
        else:
            warm = shift(self.trajectory, t, self.model.ocp.dt)
            iters = None
        try:
            traj, policy, info = sqp_update(self.model, warm, t, x_hat, r_d, scene, iters)
        except QPError as exc:
            log.warning("QP failed at t=%.3f: %s; keeping previous policy", t, exc)
            self.status = "degraded"
            info = UpdateInfo(status="degraded")
            self.history.append(info)
            return info
        if not np.all(np.isfinite(traj.X)):
            self.status = "degraded"
            info.status = "degraded"
            self.history.append(info)
            return info
        self.trajectory, self.policy, self.status = traj, policy, "ok"
        self.history.append(info)
        return info

    def input(self, tau: float, x) -> np.ndarray:
        if self.policy is None:
            raise StalePolicyError("no policy computed yet")
        return policy_input(self.policy, tau, x)
