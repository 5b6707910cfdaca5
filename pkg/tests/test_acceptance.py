"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

The closed-loop criteria simulate several seconds each; the whole module
takes tens of minutes on one core.
"""

import time

import numpy as np
import pytest

from helpers import (
    CHAIN,
    JACOBIAN_CASES,
    crossing_scene,
    dense_kkt_solution,
    jacobian_error,
    random_flat_arrangement,
    random_states,
    random_structured_qp,
    textbook_riccati_gains,
)
from waitermpc.balance import feasibility_oracle
from waitermpc.estimation import BallFilter, kf_predict, kf_update, predict_ball_tube, robot_filter
from waitermpc.kinematics import GRAVITY, REFERENCE_HOME, EEState, integrate_vector, rpy_to_matrix
from waitermpc.minmu import MinMuProblem, min_mu_bruteforce, solve_min_mu
from waitermpc.ocp import (
    BalanceConstraints,
    Mode,
    OCPDefinition,
    OCPModel,
    Policy,
    policy_input,
    solve_structured_qp,
)
from waitermpc.scenario import bundled_scenarios, load_scenario
from waitermpc.simworld import BallThrowEvent, run_scenario

_RUNS = {}


def closed_loop(name, mode, **overrides):
    """Run a bundled scenario once per (name, mode, overrides); returns (log, wall seconds)."""
    key = (name, mode, tuple(sorted((k, repr(v)) for k, v in overrides.items())))
    if key not in _RUNS:
        cfg = load_scenario(name).to_config(mode=mode, timing=True)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        t0 = time.perf_counter()
        run = run_scenario(cfg)
        _RUNS[key] = (run, time.perf_counter() - t0)
    return _RUNS[key]


def test_criterion_1_wedge_min_mu(criterion):
    arr = load_scenario("wedge15").build_arrangement()
    t0 = time.perf_counter()
    sol = solve_min_mu(MinMuProblem(arr))
    runtime = time.perf_counter() - t0
    tilts = np.rad2deg(sol.object_tilts(arr))
    ok = np.all(np.abs(sol.mu - 0.132) <= 0.002) and np.all(np.abs(tilts - 7.5) <= 0.2) and runtime < 10.0
    criterion(1, ok, f"mu={np.round(sol.mu, 5).tolist()} tilt_deg={np.round(tilts, 3).tolist()} runtime={runtime:.2f}s")
    assert ok


def _parallel_planes(arr):
    return all(abs(abs(p.normal[2]) - 1.0) < 1e-12 for p in arr.patches)


def test_criterion_2_parallel_planes(criterion):
    details, ok = [], True
    for path in bundled_scenarios():
        arr = load_scenario(path).build_arrangement()
        if arr is None or not _parallel_planes(arr):
            continue
        sol = solve_min_mu(MinMuProblem(arr))
        ref = min_mu_bruteforce(MinMuProblem(arr))
        ok &= sol.mu.max() <= 1e-6 and ref.mu.max() <= 1e-6
        details.append(f"{path.stem}:{sol.mu.max():.1e}/{ref.mu.max():.1e}")
    ok &= len(details) >= 3
    criterion(2, ok, "sqp/bruteforce max mu " + " ".join(details))
    assert ok


def test_criterion_3_box_modes(criterion):
    runs = {m: closed_loop("box", m) for m in ("none", "upward", "full", "robust")}
    s = {m: r.summary() for m, (r, _) in runs.items()}
    walls = {m: w for m, (_, w) in runs.items()}
    ok = (
        bool(s["none"]["drops"])
        and bool(s["upward"]["drops"])
        and not s["full"]["drops"]
        and not s["robust"]["drops"]
        and 0.8 <= s["full"]["max_fric_util"] <= 1.05
        and s["robust"]["mean_fric_util"] < s["full"]["mean_fric_util"]
        and max(walls.values()) < 180.0
        and all(r.t[-1] <= 12.0 for r, _ in runs.values())
    )
    criterion(
        3, ok,
        f"drops none/upward/full/robust={[bool(s[m]['drops']) for m in runs]} "
        f"full max util={s['full']['max_fric_util']:.3f} mean util full={s['full']['mean_fric_util']:.3f} "
        f"robust={s['robust']['mean_fric_util']:.3f} wall={[round(w) for w in walls.values()]}s",
    )
    assert ok


def test_criterion_4_fixture(criterion):
    times = {}
    for name in ("box", "box_fixture"):
        for mode in ("full", "robust"):
            times[name, mode] = closed_loop(name, mode)[0].convergence_time()
    ok = all(
        times["box_fixture", m] is not None and times["box", m] is not None and times["box_fixture", m] < times["box", m]
        for m in ("full", "robust")
    )
    criterion(4, ok, " ".join(f"{n}/{m}={t}" for (n, m), t in times.items()))
    assert ok


def test_criterion_5_wedge_closed_loop(criterion):
    run, _ = closed_loop("wedge15", "robust")
    s = run.summary()
    tilts = np.array(s["final_object_tilt_deg"])
    good = run.convergence_time() is not None and not run.drops and np.all(np.abs(tilts - 7.5) <= 1.0)
    zero, _ = closed_loop("wedge15", "robust", controller_mu=np.zeros(2))
    # a stationary feasible point would mean: goal reached, no drop
    zero_fails = zero.convergence_time() is None or bool(zero.drops)
    ok = good and zero_fails
    criterion(
        5, ok,
        f"mu={np.round(s['controller_mu'], 4).tolist()} converged at {run.convergence_time()} drops={len(run.drops)} "
        f"tilt_deg={np.round(tilts, 2).tolist()}; mu=0: converged at {zero.convergence_time()} drops={len(zero.drops)} "
        f"final goal dist={zero.goal_dist[-1]:.3f}",
    )
    assert ok


def test_criterion_6_scalar_vector_equivalence(criterion):
    rng = np.random.default_rng(6)
    ocp = OCPDefinition(horizon=1.0, force_slack_weight=np.inf)
    agree, worst, feasible = 0, 0.0, 0
    for _ in range(100):
        arr = random_flat_arrangement(rng, mu=0.0)
        e = EEState.at_rest(rpy_to_matrix(rng.normal(scale=0.1, size=3)))
        kind = rng.integers(3)
        if kind == 0:
            e.varpi_dot[:] = rng.normal(scale=0.5, size=6)
        else:
            # lateral acceleration cancels lateral gravity: balanced by normal forces alone
            e.varpi_dot[:2] = (e.R.T @ GRAVITY)[:2]
            e.varpi_dot[2] = rng.uniform(-2.0, 2.0)
            if kind == 2:
                e.varpi_dot[:2] += rng.normal(scale=1e-3, size=2)
        a = feasibility_oracle(e, arr).feasible
        b = feasibility_oracle(e, arr, scalar=True).feasible
        agree += a == b
        feasible += a
        X = np.tile(np.r_[REFERENCE_HOME + 0.05 * rng.normal(size=9), np.zeros(18)], (ocp.K + 1, 1))
        X[:, 9:] += 0.3 * rng.normal(size=(ocp.K + 1, 18))
        r_d = rng.normal(size=3)
        costs = []
        for scalar in (False, True):
            cons = BalanceConstraints(Mode.ROBUST, arr.with_mu(0.0), np.zeros(arr.N), scalar=scalar)
            m = OCPModel(CHAIN, ocp, cons)
            qp, _ = m.build_qp(X, np.zeros((ocp.K, m.nz)), r_d)
            costs.append(solve_structured_qp(qp, tol=1e-10).objective)
        worst = max(worst, abs(costs[0] - costs[1]))
    ok = agree == 100 and worst <= 1e-6 and 20 <= feasible <= 80
    criterion(6, ok, f"decisions agree {agree}/100 ({feasible} feasible), max QP cost gap {worst:.2e} (hard force rows)")
    assert ok


def test_criterion_7_compute_scaling(criterion):
    means = {}
    for mode in ("full", "robust"):
        # the first update compiles and runs the cold-start iterations; it is excluded
        run, _ = closed_loop("cups", mode, duration=2.0)
        upd = np.asarray(run.update_ms[1:])
        means[mode] = upd.mean()
    ratio = means["robust"] / means["full"]
    ok = means["robust"] < means["full"]
    criterion(7, ok, f"mean update full={means['full']:.1f} ms robust={means['robust']:.1f} ms ratio={ratio:.3f}")
    assert ok


def test_criterion_8_qp_and_gains(criterion):
    rng = np.random.default_rng(8)
    err_qp = 0.0
    for _ in range(50):
        qp = random_structured_qp(rng, K=int(rng.integers(3, 12)), nx=int(rng.integers(2, 7)), nz=int(rng.integers(1, 4)))
        sol = solve_structured_qp(qp)
        x, z = dense_kkt_solution(qp)
        err_qp = max(err_qp, np.abs(sol.x - x).max(), np.abs(sol.z - z).max())
    err_gain = 0.0
    for _ in range(20):
        qp = random_structured_qp(rng, K=10, nx=5, nz=2)
        err_gain = max(err_gain, np.abs(solve_structured_qp(qp).gains - textbook_riccati_gains(qp)).max())
    exact = True
    for _ in range(50):
        p = Policy(0.3, 0.1, rng.normal(size=(6, 4)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 4)))
        tau = 0.3 + rng.uniform(0, 0.5)
        i = min(int(np.floor((tau - 0.3) / 0.1 + 1e-9)), 4)
        exact &= np.array_equal(policy_input(p, tau, p.state(tau)), p.k[i])
    ok = err_qp <= 1e-8 and err_gain <= 1e-8 and exact
    criterion(8, ok, f"dense KKT max err {err_qp:.1e}, Riccati gain max err {err_gain:.1e}, policy(x*)=k exact: {exact}")
    assert ok


def test_criterion_9_jacobians(criterion):
    worst = {}
    for idx, case in enumerate(sorted(JACOBIAN_CASES)):
        model = OCPModel(CHAIN, OCPDefinition(), JACOBIAN_CASES[case]())
        rng = np.random.default_rng(900 + idx)
        worst[case] = max(
            jacobian_error(model, crossing_scene(rng), x, node=int(rng.integers(0, 15))) for x in random_states(rng, 50)
        )
    ok = max(worst.values()) <= 1e-4
    criterion(9, ok, "200 states, max relative error " + " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_10_kalman(criterion):
    rng = np.random.default_rng(10)
    err_robot = 0.0
    for _ in range(5):
        x = rng.normal(size=27)
        f = robot_filter(x)
        for _ in range(100):
            u = 5.0 * rng.normal(size=9)
            x = integrate_vector(x, u, 0.008)
            f = kf_update(kf_predict(f, u), x[:9])
        err_robot = max(err_robot, np.abs(f.mean - x).max())
    err_ball = 0.0
    for _ in range(20):
        p0 = np.r_[rng.uniform(-3, 3, size=2), rng.uniform(1.2, 2.0)]
        v0 = np.r_[rng.uniform(-5, 5, size=2), rng.uniform(2.0, 6.0)]
        bf, t, fused = BallFilter(), 0.0, 0
        while fused < 10:
            bf.step(p0 + v0 * t + 0.5 * GRAVITY * t * t)
            fused += bf.active and t > 0
            t += 0.01
        t -= 0.01
        pred = predict_ball_tube(bf.mean, [0.5])[0]
        truth = p0 + v0 * (t + 0.5) + 0.5 * GRAVITY * (t + 0.5) ** 2
        err_ball = max(err_ball, np.linalg.norm(pred - truth))
    ok = err_robot <= 1e-6 and err_ball <= 1e-3
    criterion(10, ok, f"robot error after 100 steps {err_robot:.1e}, ball 0.5 s prediction error {err_ball:.1e} m")
    assert ok


def synthetic_throw(seed):
    """Throw aimed near the EE's start position from 2-3.5 m away; flight time 0.5-0.75 s."""
    rng = np.random.default_rng(seed)
    az = rng.uniform(-np.pi / 3, np.pi / 3) + np.pi  # from the front-ish half space
    dist = rng.uniform(2.0, 3.5)
    start = np.array([dist * np.cos(az), dist * np.sin(az), rng.uniform(0.0, 0.4)])
    target = rng.uniform(-0.05, 0.05, size=3)
    T = rng.uniform(0.5, 0.75)
    v = (target - start) / T - 0.5 * GRAVITY * T
    return BallThrowEvent(0.3, start, v), T


def test_criterion_11_projectile(criterion):
    better = no_drop = 0
    rows = []
    for seed in range(20):
        ev, T = synthetic_throw(seed)
        run, _ = closed_loop("projectile", None, events=[ev], duration=round(0.3 + T + 0.5, 2), seed=seed)
        s = run.summary()
        b = s["min_ball_clearance"] > s["ball_clearance_static"]
        better += b
        no_drop += not run.drops
        rows.append(f"{s['min_ball_clearance']:.2f}/{s['ball_clearance_static']:.2f}{'' if not run.drops else 'D'}")
    ok = better >= 19 and no_drop >= 19
    criterion(11, ok, f"clearance improved {better}/20, no drop {no_drop}/20; evade/static m: {' '.join(rows)}")
    assert ok
