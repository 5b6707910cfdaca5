"""Deterministic closed-loop simulation of the balancing controller."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .balance import (
    Arrangement,
    BalanceError,
    OracleError,
    _margin_lp,
    friction_utilization,
    polygon_margin,
    required_wrenches,
    support_plane,
    zmp,
)
from .estimation import BallFilter, kf_predict, kf_update, robot_filter
from .kinematics import GRAVITY, KinematicChain, RobotState, ee_state, integrate_vector, tilt_angle
from .minmu import MinMuProblem, MinMuSolution, object_tilts, solve_min_mu
from .ocp import (
    MPCController,
    Mode,
    OCPDefinition,
    OCPModel,
    SceneModel,
    Sphere,
    StalePolicyError,
    augment_dynamic_obstacle,
    build_constraints,
    collision_distances,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    ["t"]
    + [f"q{i}" for i in range(9)]
    + [f"v{i}" for i in range(9)]
    + [f"a{i}" for i in range(9)]
    + [f"u{i}" for i in range(9)]
    + ["r_e_x", "r_e_y", "r_e_z", "tilt", "goal_dist", "fric_util", "zmp_margin", "min_coll_dist", "compute_ms"]
)

FILTER_COLUMNS = ["t", "robot_cov_trace", "robot_est_error", "ball_x", "ball_y", "ball_z", "ball_vx", "ball_vy", "ball_vz", "ball_cov_trace"]


@dataclass
class VirtualObstacleEvent:
    time: float
    center: np.ndarray  # relative to the initial EE position
    radius: float


@dataclass
class BallThrowEvent:
    time: float
    position: np.ndarray  # relative to the initial EE position
    velocity: np.ndarray


@dataclass
class ScenarioConfig:
    name: str
    chain: KinematicChain
    q0: np.ndarray
    arrangement: Arrangement | None
    mode: Mode = Mode.FULL
    ocp: OCPDefinition = field(default_factory=OCPDefinition)
    goals: list = field(default_factory=lambda: [(0.0, np.array([-2.0, 1.0, 0.0]))])  # (time, relative position)
    obstacles: list = field(default_factory=list)  # Sphere, centers relative to the initial EE position
    events: list = field(default_factory=list)
    sim_dt: float = 0.001
    policy_period: float = 0.01
    duration: float = 12.0
    measurement_noise: float = 0.0
    seed: int = 0
    mu_factor: float = 0.9
    support_margin: float = 0.005
    controller_mu: np.ndarray | None = None  # per group; replaces the minimum-friction solution
    drop_window: float = 0.02
    metrics_period: float = 0.02
    ball_radius: float = 0.0
    stop_on_drop: bool = False
    timing: bool = False  # write wall-clock compute times into the per-step log

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.q0 = np.asarray(self.q0, dtype=float)
        if self.sim_dt <= 0 or self.duration <= 0 or self.policy_period <= 0:
            raise ValueError("durations must be positive")
        ratio = self.policy_period / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("the simulation step must divide the policy period")
        if self.mode != Mode.NONE and self.mode != Mode.UPWARD and self.arrangement is None:
            raise ValueError(f"mode {self.mode.value} needs an arrangement")


@dataclass
class DropEvent:
    time: float  # when the infeasibility started
    object_id: int
    mechanism: str  # slip, tip or separation
    duration: float  # sustained infeasibility before the event was declared


@dataclass
class RunLog:
    name: str
    mode: str
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    r_e: np.ndarray
    tilt: np.ndarray
    goal_dist: np.ndarray
    fric_util: np.ndarray
    zmp_margin: np.ndarray
    min_coll_dist: np.ndarray
    compute_ms: np.ndarray
    update_ms: list = field(default_factory=list)
    drops: list = field(default_factory=list)
    status: str = "ok"
    object_tilt: np.ndarray | None = None  # (steps, n_obj)
    ball_clearance: np.ndarray | None = None
    ball_clearance_static: float | None = None
    minmu: MinMuSolution | None = None
    degraded_updates: int = 0
    filter_trace: np.ndarray | None = None  # (steps, 9): robot cov trace, estimate error, ball mean (6), ball cov trace

    def convergence_time(self, tol: float = 0.01) -> float | None:
        """First time after which the goal distance stays within ``tol``."""
        bad = np.flatnonzero(~(self.goal_dist <= tol))
        if len(bad) == 0:
            return float(self.t[0])
        if bad[-1] == len(self.t) - 1:
            return None
        return float(self.t[bad[-1] + 1])

    def summary(self) -> dict:
        dt = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
        n = self.x.shape[1] // 3
        v_ee = np.diff(self.r_e, axis=0) / dt if len(self.t) > 2 else np.zeros((1, 3))
        a_ee = np.diff(v_ee, axis=0) / dt if len(v_ee) > 1 else np.zeros((1, 3))
        util = self.fric_util[np.isfinite(self.fric_util)]
        upd = np.asarray(self.update_ms, dtype=float)
        tail = self.t >= self.t[-1] - 0.5
        out = {
            "name": self.name,
            "mode": self.mode,
            "status": self.status,
            "drops": [vars(d) for d in self.drops],
            "convergence_time": self.convergence_time(),
            "final_goal_dist": float(self.goal_dist[-1]),
            "max_ee_speed": float(np.max(np.linalg.norm(v_ee, axis=1))),
            "max_ee_acc": float(np.max(np.linalg.norm(a_ee, axis=1))),
            "max_joint_speed": np.max(np.abs(self.x[:, n : 2 * n]), axis=0).tolist(),
            "max_joint_acc": np.max(np.abs(self.x[:, 2 * n :]), axis=0).tolist(),
            "mean_compute_ms": float(upd.mean()) if upd.size else None,
            "max_compute_ms": float(upd.max()) if upd.size else None,
            "updates": int(upd.size),
            "degraded_updates": self.degraded_updates,
            "max_fric_util": float(np.nanmax(self.fric_util)) if np.any(~np.isnan(self.fric_util)) else None,
            "mean_fric_util": float(util.mean()) if util.size else None,
            "min_coll_dist": float(np.min(self.min_coll_dist)) if np.isfinite(self.min_coll_dist).any() else None,
            "final_tilt_deg": float(np.rad2deg(self.tilt[-1])),
        }
        if self.object_tilt is not None:
            out["final_object_tilt_deg"] = np.rad2deg(self.object_tilt[tail].mean(axis=0)).tolist()
        if self.ball_clearance is not None:
            out["min_ball_clearance"] = float(np.nanmin(self.ball_clearance))
            out["ball_clearance_static"] = self.ball_clearance_static
        if self.minmu is not None:
            out["controller_mu"] = self.minmu.mu.tolist()
        return out

    def write(self, out_dir, timing: bool = False) -> tuple[str, str]:
        import os

        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{self.name}.csv")
        json_path = os.path.join(out_dir, f"{self.name}.summary.json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            comp = self.compute_ms if timing else np.full(len(self.t), np.nan)
            for i in range(len(self.t)):
                row = np.r_[
                    self.t[i], self.x[i], self.u[i], self.r_e[i], self.tilt[i], self.goal_dist[i],
                    self.fric_util[i], self.zmp_margin[i], self.min_coll_dist[i], comp[i],
                ]
                w.writerow([f"{v:.10g}" for v in row])
        if self.filter_trace is not None:
            with open(os.path.join(out_dir, f"{self.name}.filter.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(FILTER_COLUMNS)
                for i in range(len(self.t)):
                    w.writerow([f"{v:.10g}" for v in np.r_[self.t[i], self.filter_trace[i]]])
        summary = self.summary()
        if not timing:
            summary["mean_compute_ms"] = summary["max_compute_ms"] = None
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return csv_path, json_path


# ---------------------------------------------------------------------------
# drop detection


class DropDetector:
    """Declares an object dropped after sustained infeasibility of its balance.

    Feasibility uses the true friction with hard constraints.  The previous
    witness, projected onto the new wrench equations, certifies most steps
    without solving an LP.
    """

    def __init__(self, arr: Arrangement, window: float):
        self.arr = arr
        self.window = window
        self.W = arr.wrench_matrix()
        self.F = arr.pyramid_matrix()
        self.W_pinv = np.linalg.pinv(self.W)
        self.xi = None
        self.since = {}
        self.dropped = set()
        self.events = []
        self.lp_calls = 0
        nobj = len(arr.objects)
        self._obj = []
        for o in range(nobj):
            rows = slice(6 * o, 6 * o + 6)
            cids = [i for i, c in enumerate(arr.contacts) if o in (c.supported, c.supporter)]
            cols = np.concatenate([np.arange(3 * i, 3 * i + 3) for i in cids])
            frows = np.concatenate([np.arange(5 * i, 5 * i + 5) for i in cids])
            self._obj.append((rows, cols, frows))

    def _feasible_joint(self, b) -> bool:
        if self.xi is not None:
            xi = self.xi + self.W_pinv @ (b - self.W @ self.xi)
            if np.all(self.F @ xi >= -1e-9) and np.allclose(self.W @ xi, b, atol=1e-8):
                return True
        self.lp_calls += 1
        t, xi = _margin_lp(self.W, b, self.F)
        if t is None or t < -1e-8:
            return False
        self.xi = xi
        return True

    def _feasible_object(self, o, b, F=None) -> bool:
        rows, cols, frows = self._obj[o]
        F = self.F if F is None else F
        self.lp_calls += 1
        t, _ = _margin_lp(self.W[rows][:, cols], b[rows], F[frows][:, cols])
        return t is not None and t >= -1e-8

    def _mechanism(self, o, b) -> str:
        plane = support_plane(self.arr, o)
        force = b[6 * o : 6 * o + 3]
        if plane.normal @ force <= 1e-9:
            return "separation"
        big = self.arr.pyramid_matrix(1e3 * np.maximum(self.arr.mu_vector(), 1e-3))
        if self._feasible_object(o, b, big):
            return "slip"
        return "tip"

    def check(self, t: float, e) -> list:
        b = required_wrenches(e, self.arr)
        live = [o for o in range(len(self.arr.objects)) if o not in self.dropped]
        if not live:
            return []
        if not self.dropped and self._feasible_joint(b):
            self.since.clear()
            return []
        bad = [o for o in live if not self._feasible_object(o, b)]
        if not bad and not self.dropped:
            # only the coupling between objects fails; blame objects resting on others
            bad = [o for o in live if any(c.supported == o and c.supporter != -1 for c in self.arr.contacts)] or live
        new = []
        for o in live:
            if o not in bad:
                self.since.pop(o, None)
                continue
            start = self.since.setdefault(o, t)
            if t - start >= self.window - 1e-12:
                ev = DropEvent(float(start), o, self._mechanism(o, b), float(t - start))
                self.dropped.add(o)
                self.events.append(ev)
                new.append(ev)
        return new


# ---------------------------------------------------------------------------
# closed loop


class _Ball:
    def __init__(self, t0, p0, v0, gravity):
        self.t0, self.p0, self.v0, self.g = t0, np.asarray(p0, float), np.asarray(v0, float), np.asarray(gravity, float)

    def position(self, t):
        s = t - self.t0
        return self.p0 + self.v0 * s + 0.5 * self.g * s * s

    def min_distance_to(self, point, t_from, t_to, step=1e-3):
        ts = np.arange(t_from, t_to + step / 2, step)
        pos = self.p0 + np.outer(ts - self.t0, self.v0) + 0.5 * np.outer((ts - self.t0) ** 2, self.g)
        return float(np.min(np.linalg.norm(pos - point, axis=1)))


def fire_virtual_obstacle(scene: SceneModel, event: VirtualObstacleEvent, origin) -> SceneModel:
    """Scene with the obstacle added (it persists for the rest of the run)."""
    return SceneModel(list(scene.obstacles) + [Sphere(origin + event.center, event.radius)], scene.tube)


def throw_ball(event: BallThrowEvent, origin, gravity=GRAVITY) -> _Ball:
    return _Ball(event.time, origin + event.position, event.velocity, gravity)


def controller_constraints(cfg: ScenarioConfig):
    """Balancing constraints of the controller and the min-friction solution they use."""
    minmu = None
    if cfg.mode == Mode.ROBUST:
        if cfg.controller_mu is not None:
            mu = np.broadcast_to(np.asarray(cfg.controller_mu, dtype=float), (len(cfg.arrangement.groups),)).copy()
            minmu = MinMuSolution(mu=mu, theta=np.zeros(3), xi=None, objective=float("nan"))
        else:
            minmu = solve_min_mu(MinMuProblem(cfg.arrangement))
    cons = build_constraints(cfg.mode, cfg.arrangement, minmu, cfg.mu_factor, cfg.support_margin)
    return cons, minmu


def run_scenario(cfg: ScenarioConfig, model: OCPModel | None = None) -> RunLog:
    """Simulate the closed loop at ``cfg.sim_dt``; see the module docstring."""
    rng = np.random.default_rng(cfg.seed)
    chain = cfg.chain
    n = chain.dof
    arr = cfg.arrangement
    cons, minmu = controller_constraints(cfg)
    if model is None:
        model = OCPModel(chain, cfg.ocp, cons)
    ctl = MPCController(model)
    gravity = arr.gravity if arr is not None else GRAVITY

    x = np.r_[cfg.q0, np.zeros(2 * n)]
    e0 = ee_state(chain, RobotState.from_vector(x))
    origin = e0.r.copy()
    goals = sorted([(float(t), origin + np.asarray(p, float)) for t, p in cfg.goals], key=lambda g: g[0])
    scene = SceneModel([Sphere(origin + o.center, o.radius) for o in cfg.obstacles])
    events = sorted(cfg.events, key=lambda ev: ev.time)
    ev_idx = 0
    ball = None
    ball_filter = BallFilter(gravity=gravity)
    kf = robot_filter(x, dt=cfg.sim_dt, n=n)
    detector = DropDetector(arr, cfg.drop_window) if arr is not None else None

    steps = int(round(cfg.duration / cfg.sim_dt))
    period = int(round(cfg.policy_period / cfg.sim_dt))
    metrics_every = max(int(round(cfg.metrics_period / cfg.sim_dt)), 1)
    T = np.zeros(steps)
    X = np.zeros((steps, 3 * n))
    U = np.zeros((steps, n))
    RE = np.zeros((steps, 3))
    TILT = np.zeros(steps)
    GD = np.zeros(steps)
    FU = np.full(steps, np.nan)
    ZM = np.full(steps, np.nan)
    MC = np.full(steps, np.nan)
    CMS = np.full(steps, np.nan)
    OT = np.zeros((steps, len(arr.objects))) if arr is not None else None
    BC = None
    FT = np.full((steps, 9), np.nan)
    update_ms = []
    status = "ok"
    util = np.nan
    u_prev = np.zeros(n)
    compute = np.nan
    last = steps
    ball_static = None

    for i in range(steps):
        t = i * cfg.sim_dt
        # events
        while ev_idx < len(events) and events[ev_idx].time <= t + 1e-12:
            ev = events[ev_idx]
            if isinstance(ev, VirtualObstacleEvent):
                scene = fire_virtual_obstacle(scene, ev, origin)
                log.info("t=%.3f: virtual obstacle appears", t)
            else:
                ball = throw_ball(ev, origin, gravity)
                ball_filter = BallFilter(gravity=gravity)
                BC = np.full(steps, np.nan) if BC is None else BC
                r_now = ee_state(chain, RobotState.from_vector(x)).r
                ball_static = ball.min_distance_to(r_now, t, t + 3.0)
                log.info("t=%.3f: ball thrown", t)
            ev_idx += 1
        # estimation
        y = x[:n] + (cfg.measurement_noise * rng.standard_normal(n) if cfg.measurement_noise > 0 else 0.0)
        if i > 0:
            kf = kf_predict(kf, u_prev)
        kf = kf_update(kf, y)
        x_hat = kf.mean
        if ball is not None and i % period == 0:
            p = ball.position(t)
            ball_filter.step(p)
        # policy update
        if i % period == 0:
            r_d = [g for g in goals if g[0] <= t + 1e-12][-1][1]
            upd_scene = scene
            if ball_filter.active and ctl.trajectory is not None:
                ee_nom = getattr(ctl.trajectory, "r_e", None)
                node_t = np.arange(model.K + 1) * model.ocp.dt
                if ee_nom is None:
                    ee_nom = np.tile(ee_state(chain, RobotState.from_vector(x_hat)).r, (model.K + 1, 1))
                upd_scene = augment_dynamic_obstacle(scene, ball_filter.mean, node_t, ee_nom, gravity, cfg.ball_radius)
            info = ctl.update(t, x_hat, r_d, upd_scene)
            compute = info.wall_time * 1e3
            update_ms.append(compute)
        try:
            u = ctl.input(t, x_hat)
        except StalePolicyError as exc:
            log.error("aborting at t=%.3f: %s", t, exc)
            status = "abort"
            last = i
            break
        # log and metrics at the current state
        e = ee_state(chain, RobotState.from_vector(x))
        T[i], X[i], U[i], RE[i] = t, x, u, e.r
        TILT[i] = tilt_angle(e.R)
        r_d = [g for g in goals if g[0] <= t + 1e-12][-1][1]
        GD[i] = np.linalg.norm(e.r - r_d)
        CMS[i] = compute if i % period == 0 else np.nan
        if arr is not None:
            OT[i] = object_tilts(arr, e.R)
            if i % metrics_every == 0:
                try:
                    util = friction_utilization(e, arr, tol=5e-3)
                except OracleError as exc:  # a metric only; the run goes on
                    log.warning("friction utilization at t=%.3f: %s", t, exc)
                    util = np.nan
            FU[i] = util
            ZM[i] = _zmp_margin(e, arr)
        dists = collision_distances(chain, x, SceneModel(scene.obstacles))
        MC[i] = dists.min() if dists.size else np.nan
        if ball is not None:
            BC[i] = float(np.linalg.norm(ball.position(t) - e.r))
        FT[i, 0] = np.trace(kf.cov)
        FT[i, 1] = np.linalg.norm(x_hat - x)
        if ball_filter.active:
            FT[i, 2:8] = ball_filter.mean
            FT[i, 8] = np.trace(ball_filter.kf.cov)
        # drops
        if detector is not None:
            for ev in detector.check(t, e):
                log.info("drop: object %d (%s) at t=%.3f", ev.object_id, ev.mechanism, ev.time)
                status = "drop"
            if status == "drop" and cfg.stop_on_drop:
                last = i + 1
                break
        x = integrate_vector(x, u, cfg.sim_dt)
        u_prev = u
    sl = slice(0, last)
    return RunLog(
        name=cfg.name,
        mode=cfg.mode.value,
        t=T[sl], x=X[sl], u=U[sl], r_e=RE[sl], tilt=TILT[sl], goal_dist=GD[sl],
        fric_util=FU[sl], zmp_margin=ZM[sl], min_coll_dist=MC[sl], compute_ms=CMS[sl],
        update_ms=update_ms,
        drops=detector.events if detector is not None else [],
        status=status if status != "ok" or ctl.status != "degraded" else "ok",
        object_tilt=OT[sl] if OT is not None else None,
        ball_clearance=BC[sl] if BC is not None else None,
        ball_clearance_static=ball_static,
        minmu=minmu,
        degraded_updates=sum(1 for h in ctl.history if h.status != "ok"),
        filter_trace=FT[sl],
    )


def _zmp_margin(e, arr: Arrangement) -> float:
    """Smallest ZMP margin over objects resting on a single support patch."""
    best = np.inf
    for o, obj in enumerate(arr.objects):
        plane = support_plane(arr, o)
        try:
            p = zmp(e, obj, plane, arr.gravity)
        except BalanceError:
            return -np.inf
        best = min(best, polygon_margin(p, plane.polygon))
    return float(best)
