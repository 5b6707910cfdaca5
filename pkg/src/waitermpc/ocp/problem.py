"""Problem definition of the balancing MPC: weights, constraint modes, scene."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..balance import Arrangement, BalanceError
from ..kinematics import KinematicChain

TUBE_CLEARANCE = 0.35


class Mode(str, Enum):
    NONE = "none"
    UPWARD = "upward"
    FULL = "full"
    ROBUST = "robust"


def default_state_weight(n: int = 9) -> np.ndarray:
    return np.diag(np.r_[np.zeros(n), np.full(n, 0.1), np.full(n, 0.01)])


@dataclass
class OCPDefinition:
    horizon: float = 2.0
    dt: float = 0.1
    W_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    W_x: np.ndarray = field(default_factory=default_state_weight)
    W_u: np.ndarray = field(default_factory=lambda: 0.001 * np.eye(9))
    w_f: float = 0.001  # W_f = w_f * I
    slack_weight: float = 100.0
    force_slack_weight: float | None = None  # slack weight of the force cone rows; inf makes them hard
    tube_clearance: float = TUBE_CLEARANCE
    tube_weight: float | None = None  # defaults to 4 / d^2
    sqp_iterations: int = 1
    qp_tol: float = 1e-7

    def __post_init__(self):
        self.W_r = np.asarray(self.W_r, dtype=float)
        self.W_x = np.asarray(self.W_x, dtype=float)
        self.W_u = np.asarray(self.W_u, dtype=float)
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("horizon and step must be positive")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("the step must divide the horizon")
        for name, W, strict in (("W_r", self.W_r, False), ("W_x", self.W_x, False), ("W_u", self.W_u, True)):
            if not np.allclose(W, W.T):
                raise ValueError(f"{name} must be symmetric")
            lo = np.linalg.eigvalsh(W).min()
            if (strict and lo <= 0) or lo < -1e-12:
                raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
        if self.w_f <= 0:
            raise ValueError("W_f must be positive definite")
        if self.slack_weight <= 0:
            raise ValueError("slack weights must be positive")
        if self.force_slack_weight is None:
            self.force_slack_weight = self.slack_weight
        if self.force_slack_weight <= 0:
            raise ValueError("slack weights must be positive")
        if self.tube_weight is None:
            self.tube_weight = 4.0 / self.tube_clearance**2

    @property
    def K(self) -> int:
        """Number of intervals; the horizon has K + 1 nodes."""
        return int(round(self.horizon / self.dt))

    @property
    def nodes(self) -> int:
        return self.K + 1


@dataclass
class BalanceConstraints:
    """Balancing constraint set imposed by the controller."""

    mode: Mode
    arrangement: Arrangement | None = None
    mu: np.ndarray | None = None  # per contact, controller value
    scalar: bool = False

    @property
    def n_forces(self) -> int:
        if self.mode in (Mode.NONE, Mode.UPWARD):
            return 0
        return self.arrangement.N * (1 if self.scalar else 3)

    @property
    def n_cone_rows(self) -> int:
        """Inequality rows on the forces (pyramids, or non-negativity in scalar mode)."""
        if self.mode in (Mode.NONE, Mode.UPWARD):
            return 0
        return self.arrangement.N * (1 if self.scalar else 5)

    @property
    def n_equality_rows(self) -> int:
        if self.mode == Mode.UPWARD:
            return 2
        if self.mode in (Mode.FULL, Mode.ROBUST):
            return 6 * len(self.arrangement.objects)
        return 0


def build_constraints(
    mode,
    arrangement: Arrangement | None = None,
    minmu=None,
    mu_factor: float = 0.9,
    margin: float = 0.005,
    zero_tol: float = 1e-6,
) -> BalanceConstraints:
    """Constraint set for one of the four balancing modes.

    Full uses ``mu_factor`` times the true friction; Robust uses the minimum
    statically-feasible coefficients of ``minmu`` and switches to scalar
    normal forces when they are all zero.  Both shrink the support patches by
    ``margin``.
    """
    mode = Mode(mode)
    if mode in (Mode.NONE, Mode.UPWARD):
        return BalanceConstraints(mode)
    if arrangement is None:
        raise BalanceError(f"mode {mode.value!r} needs an arrangement")
    arr = arrangement.shrunk(margin) if margin > 0 else arrangement
    if mode == Mode.FULL:
        mu = mu_factor * arr.mu_vector()
        return BalanceConstraints(mode, arr.with_mu(mu), mu, scalar=False)
    if minmu is None:
        raise BalanceError("robust mode needs a minimum-friction solution")
    mu = np.asarray(minmu.mu_per_contact(arrangement), dtype=float)
    if np.all(mu <= zero_tol):
        return BalanceConstraints(mode, arr.with_mu(0.0), np.zeros(arr.N), scalar=True)
    return BalanceConstraints(mode, arr.with_mu(mu), mu, scalar=False)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass
class BallTube:
    """Predicted projectile samples at the MPC nodes.

    ``active[k]`` is false once the ball has passed the EE at node ``k``.
    """

    positions: np.ndarray  # (K+1, 3)
    velocities: np.ndarray  # (K+1, 3)
    radius: float = 0.0
    active: np.ndarray | None = None


@dataclass
class SceneModel:
    obstacles: list = field(default_factory=list)
    tube: BallTube | None = None

    def obstacle_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.array([o.center for o in self.obstacles], dtype=float).reshape(-1, 3)
        r = np.array([o.radius for o in self.obstacles], dtype=float)
        return c, r


def state_input_limits(chain: KinematicChain):
    return chain.x_lower, chain.x_upper, chain.u_lower, chain.u_upper
