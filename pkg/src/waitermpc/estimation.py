"""Linear Kalman filters for the robot state and a thrown ball."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .kinematics import GRAVITY, discrete_matrices

log = logging.getLogger(__name__)

ROBOT_DT = 0.008
BALL_DT = 0.01
BALL_ACTIVATION_HEIGHT = 1.0


@dataclass(frozen=True)
class KalmanFilter:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    rejected: int = 0  # count of discarded measurements


def kf_predict(f: KalmanFilter, u) -> KalmanFilter:
    mean = f.A @ f.mean + f.B @ np.asarray(u, dtype=float)
    cov = f.A @ f.cov @ f.A.T + f.Q
    return replace(f, mean=mean, cov=0.5 * (cov + cov.T))


def kf_update(f: KalmanFilter, y) -> KalmanFilter:
    """Measurement update with the Joseph-form covariance.

    Non-finite measurements leave the estimate unchanged and bump ``rejected``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (f.C.shape[0],):
        raise ValueError(f"measurement must have {f.C.shape[0]} entries")
    if not np.all(np.isfinite(y)):
        log.warning("rejected non-finite measurement")
        return replace(f, rejected=f.rejected + 1)
    S = f.C @ f.cov @ f.C.T + f.R
    G = np.linalg.solve(S, f.C @ f.cov).T  # gain P C' S^-1 (S and P symmetric)
    mean = f.mean + G @ (y - f.C @ f.mean)
    IKC = np.eye(len(f.mean)) - G @ f.C
    cov = IKC @ f.cov @ IKC.T + G @ f.R @ G.T
    return replace(f, mean=mean, cov=0.5 * (cov + cov.T))


def robot_filter(x0, dt: float = ROBOT_DT, n: int = 9, q_jerk: float = 10.0, r_meas: float = 0.001, p0: float = 0.1):
    """Triple-integrator filter measuring joint positions."""
    A, B = discrete_matrices(dt, n)
    C = np.hstack([np.eye(n), np.zeros((n, 2 * n))])
    Q = B @ (q_jerk * np.eye(n)) @ B.T
    return KalmanFilter(A, B, C, Q, r_meas * np.eye(n), np.asarray(x0, dtype=float).copy(), p0 * np.eye(3 * n))


def ball_matrices(dt: float = BALL_DT):
    I3 = np.eye(3)
    A = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3]])
    B = np.vstack([0.5 * dt**2 * I3, dt * I3])
    C = np.hstack([I3, np.zeros((3, 3))])
    return A, B, C


@dataclass
class BallFilter:
    """Projectile filter; becomes active once the ball rises above the activation height.

    The first measurement above the height is stored; the second initializes
    the mean from a finite-difference velocity.
    """

    dt: float = BALL_DT
    q_acc: float = 1000.0
    r_meas: float = 0.001
    p0: float = 1.0
    gravity: np.ndarray = None
    activation_height: float = BALL_ACTIVATION_HEIGHT
    kf: KalmanFilter | None = None
    _first: np.ndarray | None = None

    def __post_init__(self):
        if self.gravity is None:
            self.gravity = GRAVITY.copy()

    @property
    def active(self) -> bool:
        return self.kf is not None

    @property
    def mean(self) -> np.ndarray | None:
        return None if self.kf is None else self.kf.mean

    def step(self, measurement) -> None:
        """Predict one sample period and fuse ``measurement`` (3-vector or None)."""
        if self.kf is not None:
            self.kf = kf_predict(self.kf, self.gravity)
            if measurement is not None:
                self.kf = kf_update(self.kf, measurement)
            return
        if measurement is None:
            return
        p = np.asarray(measurement, dtype=float)
        if not np.all(np.isfinite(p)) or p[2] <= self.activation_height:
            return
        if self._first is None:
            self._first = p
            return
        v = (p - self._first) / self.dt + 0.5 * self.gravity * self.dt
        A, B, C = ball_matrices(self.dt)
        Q = B @ (self.q_acc * np.eye(3)) @ B.T
        self.kf = KalmanFilter(A, B, C, Q, self.r_meas * np.eye(3), np.r_[p, v], self.p0 * np.eye(6))


def predict_ball_tube(mean, times, gravity=GRAVITY) -> np.ndarray:
    """Ballistic positions r + v t + g t^2 / 2 at ``times`` (drag neglected)."""
    b = np.asarray(mean, dtype=float)
    t = np.asarray(times, dtype=float)[:, None]
    return b[:3] + b[3:6] * t + 0.5 * np.asarray(gravity) * t**2
