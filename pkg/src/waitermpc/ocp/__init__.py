"""Balancing MPC: problem definition, transcription, QP solvers, SQP and policy."""

from .model import NodeValues, OCPModel, collision_distances, tube_distance
from .problem import (
    BallTube,
    BalanceConstraints,
    Mode,
    OCPDefinition,
    SceneModel,
    Sphere,
    build_constraints,
)
from .qp import QPError, QPSolution, StructuredQP, solve_dense_qp, solve_structured_qp, structured_to_dense
from .sqp import (
    MPCController,
    Policy,
    StalePolicyError,
    Trajectory,
    UpdateInfo,
    augment_dynamic_obstacle,
    cold_start,
    policy_input,
    shift,
    sqp_update,
)

__all__ = [
    "BallTube",
    "BalanceConstraints",
    "MPCController",
    "Mode",
    "NodeValues",
    "OCPDefinition",
    "OCPModel",
    "Policy",
    "QPError",
    "QPSolution",
    "SceneModel",
    "Sphere",
    "StalePolicyError",
    "StructuredQP",
    "Trajectory",
    "UpdateInfo",
    "augment_dynamic_obstacle",
    "build_constraints",
    "cold_start",
    "collision_distances",
    "policy_input",
    "shift",
    "solve_dense_qp",
    "solve_structured_qp",
    "sqp_update",
    "structured_to_dense",
    "tube_distance",
]
