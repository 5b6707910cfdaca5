"""Versioned YAML scenario files and their conversion to runtime objects."""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .balance import TRAY, Arrangement, Patch, RigidObject, box_inertia
from .kinematics import (
    GRAVITY,
    REFERENCE_HOME,
    Joint,
    KinematicChain,
    LinkSphere,
    reference_chain,
)
from .ocp import Mode, OCPDefinition, Sphere
from .ocp.problem import default_state_weight
from .simworld import BallThrowEvent, ScenarioConfig, VirtualObstacleEvent

SCHEMA_VERSION = 1
BUNDLED_DIR = Path(__file__).parent / "scenarios"

Vec3 = tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --- robot -----------------------------------------------------------------


class JointSpec(_Strict):
    name: str
    type: Literal["prismatic", "revolute"]
    axis: Vec3 = (0.0, 0.0, 1.0)
    xyz: Vec3 = (0.0, 0.0, 0.0)
    rpy: Vec3 = (0.0, 0.0, 0.0)


class SphereLinkSpec(_Strict):
    name: str
    link: int
    offset: Vec3 = (0.0, 0.0, 0.0)
    radius: float = Field(gt=0)


class LimitSpec(_Strict):
    """Symmetric limits: |q|, |v|, |a| <= max and |u| <= u_max."""

    q_max: list[float]
    v_max: list[float]
    a_max: list[float]
    u_max: list[float]


class ChainSpec(_Strict):
    joints: list[JointSpec]
    ee_xyz: Vec3 = (0.0, 0.0, 0.0)
    ee_rpy: Vec3 = (0.0, 0.0, 0.0)
    spheres: list[SphereLinkSpec] = []
    limits: LimitSpec | None = None


class RobotSpec(_Strict):
    chain: Literal["reference"] | ChainSpec = "reference"
    q0: Literal["home"] | list[float] = "home"


# --- arrangement -----------------------------------------------------------


class ObjectSpec(_Strict):
    name: str
    mass: float = Field(gt=0)
    com: Vec3
    inertia: list[list[float]] | None = None
    box: Vec3 | None = None  # uniform-box shorthand: width, depth, height

    @model_validator(mode="after")
    def _one_inertia(self):
        if (self.inertia is None) == (self.box is None):
            raise ValueError("give exactly one of 'inertia' and 'box'")
        return self


class PatchSpec(_Strict):
    supported: str
    supporter: str = "tray"
    vertices: list[Vec3] | None = None
    square: float | None = Field(default=None, gt=0)  # side length, centred at ``center``
    center: Vec3 = (0.0, 0.0, 0.0)
    normal: Vec3 = (0.0, 0.0, 1.0)
    mu: float = Field(ge=0)
    mu_nominal: float | None = Field(default=None, ge=0)
    group: str = ""

    @model_validator(mode="after")
    def _one_shape(self):
        if (self.vertices is None) == (self.square is None):
            raise ValueError("give exactly one of 'vertices' and 'square'")
        return self


class ArrangementSpec(_Strict):
    objects: list[ObjectSpec]
    patches: list[PatchSpec]
    gravity: Vec3 = tuple(GRAVITY)


# --- controller, scene, events, sim ---------------------------------------


class ControllerSpec(_Strict):
    mode: Mode = Mode.FULL
    horizon: float = Field(default=2.0, gt=0)
    dt: float = Field(default=0.1, gt=0)
    position_weight: float = Field(default=1.0, ge=0)
    velocity_weight: float = Field(default=0.1, ge=0)
    acceleration_weight: float = Field(default=0.01, ge=0)
    input_weight: float = Field(default=0.001, gt=0)
    force_weight: float = Field(default=0.001, gt=0)
    slack_weight: float = Field(default=100.0, gt=0)
    tube_clearance: float = Field(default=0.35, gt=0)
    sqp_iterations: int = Field(default=1, ge=1)
    mu_factor: float = Field(default=0.9, gt=0)
    support_margin: float = Field(default=0.005, ge=0)
    controller_mu: list[float] | None = None  # per group; replaces the minimum-friction solution


class GoalSpec(_Strict):
    time: float = Field(default=0.0, ge=0)
    position: Vec3


class ObstacleSpec(_Strict):
    center: Vec3
    radius: float = Field(gt=0)


class SceneSpec(_Strict):
    goals: list[GoalSpec] = [GoalSpec(position=(-2.0, 1.0, 0.0))]
    obstacles: list[ObstacleSpec] = []

    @field_validator("goals")
    @classmethod
    def _first_goal_at_start(cls, v):
        if not v or min(g.time for g in v) > 0:
            raise ValueError("a goal must be active at time 0")
        return v


class VirtualObstacleSpec(_Strict):
    type: Literal["virtual_obstacle"]
    time: float = Field(ge=0)
    center: Vec3
    radius: float = Field(gt=0)


class BallThrowSpec(_Strict):
    """Ball launched from ``position``; either ``velocity`` or a ``target`` hit after ``flight_time``."""

    type: Literal["ball_throw"]
    time: float = Field(ge=0)
    position: Vec3
    velocity: Vec3 | None = None
    target: Vec3 | None = None
    flight_time: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _velocity_or_target(self):
        if self.velocity is None and (self.target is None or self.flight_time is None):
            raise ValueError("give 'velocity' or both 'target' and 'flight_time'")
        if self.velocity is not None and self.target is not None:
            raise ValueError("give either 'velocity' or 'target', not both")
        return self

    def launch_velocity(self, gravity) -> np.ndarray:
        if self.velocity is not None:
            return np.asarray(self.velocity, dtype=float)
        T = self.flight_time
        d = np.asarray(self.target) - np.asarray(self.position)
        return d / T - 0.5 * np.asarray(gravity) * T


EventSpec = Annotated[Union[VirtualObstacleSpec, BallThrowSpec], Field(discriminator="type")]


class SimSpec(_Strict):
    dt: float = Field(default=0.001, gt=0)
    policy_period: float = Field(default=0.01, gt=0)
    duration: float = Field(default=12.0, gt=0)
    seed: int = 0
    measurement_noise: float = Field(default=0.0, ge=0)
    drop_window: float = Field(default=0.02, gt=0)
    metrics_period: float = Field(default=0.02, gt=0)
    ball_radius: float = Field(default=0.0, ge=0)
    stop_on_drop: bool = False


class ScenarioFile(_Strict):
    version: Literal[1]
    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    robot: RobotSpec = RobotSpec()
    arrangement: ArrangementSpec | None = None
    controller: ControllerSpec = ControllerSpec()
    scene: SceneSpec = SceneSpec()
    events: list[EventSpec] = []
    sim: SimSpec = SimSpec()

    @model_validator(mode="after")
    def _references(self):
        if self.arrangement is not None:
            names = [o.name for o in self.arrangement.objects]
            if len(set(names)) != len(names):
                raise ValueError("object names must be unique")
            for k, p in enumerate(self.arrangement.patches):
                for ref in (p.supported, p.supporter):
                    if ref != "tray" and ref not in names:
                        raise ValueError(f"arrangement.patches.{k}: unknown object {ref!r}")
        elif self.controller.mode in (Mode.FULL, Mode.ROBUST):
            raise ValueError(f"controller.mode {self.controller.mode.value!r} needs an arrangement")
        return self

    # --- conversion ------------------------------------------------------

    def build_chain(self) -> KinematicChain:
        spec = self.robot.chain
        if spec == "reference":
            return reference_chain()
        joints = [Joint(j.name, j.type, j.axis, j.xyz, j.rpy) for j in spec.joints]
        spheres = [LinkSphere(s.name, s.link, s.offset, s.radius) for s in spec.spheres]
        kw = {}
        if spec.limits is not None:
            lim = spec.limits
            x_max = np.r_[lim.q_max, lim.v_max, lim.a_max]
            kw = dict(x_lower=-x_max, x_upper=x_max, u_lower=-np.asarray(lim.u_max), u_upper=np.asarray(lim.u_max))
        return KinematicChain(joints, spec.ee_xyz, spec.ee_rpy, spheres=spheres, **kw)

    def build_q0(self, chain: KinematicChain) -> np.ndarray:
        if self.robot.q0 == "home":
            return REFERENCE_HOME.copy() if self.robot.chain == "reference" else np.zeros(chain.dof)
        q0 = np.asarray(self.robot.q0, dtype=float)
        if q0.shape != (chain.dof,):
            raise ValueError(f"robot.q0 must have {chain.dof} entries")
        return q0

    def build_arrangement(self) -> Arrangement | None:
        spec = self.arrangement
        if spec is None:
            return None
        names = [o.name for o in spec.objects]
        objects = []
        for o in spec.objects:
            inertia = box_inertia(o.mass, o.box) if o.box is not None else np.asarray(o.inertia, dtype=float)
            objects.append(RigidObject(o.name, o.mass, np.asarray(o.com, dtype=float), inertia))
        patches = []
        for p in spec.patches:
            if p.vertices is not None:
                verts = np.asarray(p.vertices, dtype=float)
            else:
                h = 0.5 * p.square
                verts = np.asarray(p.center) + np.array([[h, h, 0], [-h, h, 0], [-h, -h, 0], [h, -h, 0]])
            patches.append(
                Patch(
                    verts,
                    np.asarray(p.normal, dtype=float),
                    p.mu,
                    p.mu if p.mu_nominal is None else p.mu_nominal,
                    TRAY if p.supporter == "tray" else names.index(p.supporter),
                    names.index(p.supported),
                    p.group,
                )
            )
        return Arrangement(objects, patches, np.asarray(spec.gravity, dtype=float))

    def build_ocp(self, n: int) -> OCPDefinition:
        c = self.controller
        W_x = default_state_weight(n)
        W_x[n : 2 * n, n : 2 * n] = c.velocity_weight * np.eye(n)
        W_x[2 * n :, 2 * n :] = c.acceleration_weight * np.eye(n)
        return OCPDefinition(
            horizon=c.horizon,
            dt=c.dt,
            W_r=c.position_weight * np.eye(3),
            W_x=W_x,
            W_u=c.input_weight * np.eye(n),
            w_f=c.force_weight,
            slack_weight=c.slack_weight,
            tube_clearance=c.tube_clearance,
            sqp_iterations=c.sqp_iterations,
        )

    def to_config(self, mode=None, seed=None, duration=None, timing=False) -> ScenarioConfig:
        chain = self.build_chain()
        arr = self.build_arrangement()
        gravity = arr.gravity if arr is not None else GRAVITY
        events = []
        for ev in self.events:
            if ev.type == "virtual_obstacle":
                events.append(VirtualObstacleEvent(ev.time, np.asarray(ev.center, dtype=float), ev.radius))
            else:
                events.append(BallThrowEvent(ev.time, np.asarray(ev.position, dtype=float), ev.launch_velocity(gravity)))
        c, s = self.controller, self.sim
        return ScenarioConfig(
            name=self.name,
            chain=chain,
            q0=self.build_q0(chain),
            arrangement=arr,
            mode=Mode(mode) if mode is not None else c.mode,
            ocp=self.build_ocp(chain.dof),
            goals=[(g.time, np.asarray(g.position, dtype=float)) for g in self.scene.goals],
            obstacles=[Sphere(np.asarray(o.center, dtype=float), o.radius) for o in self.scene.obstacles],
            events=events,
            sim_dt=s.dt,
            policy_period=s.policy_period,
            duration=s.duration if duration is None else duration,
            measurement_noise=s.measurement_noise,
            seed=s.seed if seed is None else seed,
            mu_factor=c.mu_factor,
            support_margin=c.support_margin,
            controller_mu=None if c.controller_mu is None else np.asarray(c.controller_mu, dtype=float),
            drop_window=s.drop_window,
            metrics_period=s.metrics_period,
            ball_radius=s.ball_radius,
            stop_on_drop=s.stop_on_drop,
            timing=timing,
        )


def load_scenario(path) -> ScenarioFile:
    """Parse and validate a scenario file; a bare name refers to a bundled scenario."""
    p = Path(path)
    if not p.exists() and not p.suffix and (BUNDLED_DIR / f"{p.name}.scn").exists():
        p = BUNDLED_DIR / f"{p.name}.scn"
    with open(p) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{p}: expected a mapping at the top level")
    return ScenarioFile.model_validate(data)


def dump_scenario(scn: ScenarioFile) -> str:
    return yaml.safe_dump(scn.model_dump(mode="json", exclude_defaults=False), sort_keys=False)


def bundled_scenarios() -> list[Path]:
    return sorted(BUNDLED_DIR.glob("*.scn"))
