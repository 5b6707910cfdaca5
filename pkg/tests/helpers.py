"""Arrangements, random instances and derivative checks shared by the test modules."""

import numpy as np

from waitermpc.balance import TRAY, Arrangement, Patch, RigidObject, box_inertia
from waitermpc.kinematics import REFERENCE_HOME, forward_kinematics, reference_chain
from waitermpc.minmu import MinMuSolution
from waitermpc.ocp import BallTube, Mode, SceneModel, Sphere, build_constraints

SQUARE = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)


def box_arrangement(mu=0.2, mass=0.5, height=0.2, side=0.06):
    box = RigidObject("box", mass, [0.0, 0.0, height / 2], box_inertia(mass, (side, side, height)))
    return Arrangement([box], [Patch(0.5 * side * SQUARE, [0, 0, 1], mu, mu, TRAY, 0)])


def wedge_arrangement(phi_deg=15.0, mu=0.2, groups=("tw", "wb")):
    """1 kg wedge (0.2 m base) with a 0.5 kg box on its incline, which rises toward +x."""
    phi = np.deg2rad(phi_deg)
    wedge = RigidObject("wedge", 1.0, [0, 0, 0.03], box_inertia(1.0, (0.2, 0.2, 0.06)))
    p0 = np.array([0.0, 0.0, 0.02 + 0.1 * np.tan(phi)])
    u = np.array([np.cos(phi), 0.0, np.sin(phi)])
    v = np.array([0.0, 1.0, 0.0])
    n = np.array([-np.sin(phi), 0.0, np.cos(phi)])
    verts = np.array([p0 + a * 0.03 * u + b * 0.03 * v for a, b, _ in SQUARE])
    box = RigidObject("box", 0.5, p0 + 0.1 * n, box_inertia(0.5, (0.06, 0.06, 0.2)))
    return Arrangement(
        [wedge, box],
        [Patch(0.1 * SQUARE, [0, 0, 1], mu, mu, TRAY, 0, groups[0]), Patch(verts, n, mu, mu, 0, 1, groups[1])],
    )


def random_flat_arrangement(rng, mu=0.0, n_obj=None):
    """Boxes side by side on the tray, sometimes stacked, all with horizontal contacts."""
    n_obj = int(rng.integers(1, 4)) if n_obj is None else n_obj
    objects, patches, tops = [], [], []
    for k in range(n_obj):
        side = rng.uniform(0.04, 0.1)
        h = rng.uniform(0.05, 0.3)
        m = rng.uniform(0.1, 1.0)
        if k > 0 and rng.random() < 0.3:
            x0, z0 = tops[-1]
            side = min(side, 0.04)
            sup = k - 1
        else:
            x0, z0 = 0.25 * k, 0.0
            sup = TRAY
        c = np.array([x0 + rng.uniform(-0.2, 0.2) * side, rng.uniform(-0.2, 0.2) * side, z0 + h / 2])
        objects.append(RigidObject(f"o{k}", m, c, box_inertia(m, (side, side, h))))
        patches.append(Patch(0.5 * side * SQUARE + [x0, 0.0, z0], [0, 0, 1], mu, mu, sup, k))
        tops.append((x0, z0 + h))
    return Arrangement(objects, patches)


def random_structured_qp(rng, K=6, nx=4, nz=3, m=0, mN=0, hard_fraction=0.5):
    """Random strictly convex structured QP with ``m`` path and ``mN`` terminal rows."""
    from waitermpc.ocp import StructuredQP

    def spd(n):
        M = rng.normal(size=(n, n))
        return M @ M.T + 0.1 * np.eye(n)

    A = np.stack([np.eye(nx) + 0.1 * rng.normal(size=(nx, nx)) for _ in range(K)])
    B = rng.normal(size=(K, nx, nz))
    c = 0.1 * rng.normal(size=(K, nx))
    H = [spd(nx + nz) for _ in range(K)]
    Q = np.stack([h[:nx, :nx] for h in H] + [spd(nx)])
    S = np.stack([h[nx:, :nx] for h in H])
    R = np.stack([h[nx:, nx:] for h in H])
    q = rng.normal(size=(K + 1, nx))
    r = rng.normal(size=(K, nz))
    Cx = rng.normal(size=(K, m, nx))
    Cz = rng.normal(size=(K, m, nz))
    d = rng.uniform(0.1, 1.0, size=(K, m))
    w = np.where(rng.uniform(size=(K, m)) < hard_fraction, np.inf, rng.uniform(1.0, 50.0, size=(K, m)))
    CxN = rng.normal(size=(mN, nx))
    dN = rng.uniform(0.1, 1.0, size=mN)
    wN = np.where(rng.uniform(size=mN) < hard_fraction, np.inf, rng.uniform(1.0, 50.0, size=mN))
    return StructuredQP(A, B, c, Q, q, S, R, r, Cx, Cz, d, w, CxN, dN, wN, rng.normal(size=nx))


def dense_kkt_solution(qp):
    """Direct solve of the equality-constrained KKT system (no inequality rows)."""
    from waitermpc.ocp import structured_to_dense

    H, g, Aeq, beq, _, _ = structured_to_dense(qp)
    n, me = H.shape[0], Aeq.shape[0]
    M = np.block([[H, Aeq.T], [Aeq, np.zeros((me, me))]])
    sol = np.linalg.solve(M, np.r_[-g, beq])
    K, nx, nz = qp.K, qp.nx, qp.nz
    x = sol[: (K + 1) * nx].reshape(K + 1, nx)
    z = sol[(K + 1) * nx : (K + 1) * nx + K * nz].reshape(K, nz)
    return x, z


def textbook_riccati_gains(qp):
    """Feedback gains of the discrete-time LQR recursion with cross terms."""
    P = qp.Q[-1]
    gains = []
    for k in range(qp.K - 1, -1, -1):
        A, B = qp.A[k], qp.B[k]
        Huu = qp.R[k] + B.T @ P @ B
        Hux = qp.S[k] + B.T @ P @ A
        Kk = -np.linalg.solve(Huu, Hux)
        P = qp.Q[k] + A.T @ P @ A + Hux.T @ Kk
        P = 0.5 * (P + P.T)
        gains.append(Kk)
    return np.stack(gains[::-1])


# ---------------------------------------------------------------------------
# OCP derivative checks


CHAIN = reference_chain()
R_HOME = forward_kinematics(CHAIN, REFERENCE_HOME)[1]


def random_states(rng, n):
    X = np.zeros((n, 27))
    X[:, :9] = REFERENCE_HOME + 0.3 * rng.normal(size=(n, 9))
    X[:, 9:18] = rng.normal(size=(n, 9))
    X[:, 18:] = rng.normal(size=(n, 9))
    return X


def crossing_scene(rng):
    # straight ball path passing 0.1-0.3 m from the home EE, plus obstacles near the arm
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    off = np.cross(d, rng.normal(size=3))
    off *= rng.uniform(0.1, 0.3) / np.linalg.norm(off)
    s = np.linspace(-1.0, 1.0, 21)[:, None]
    pos = R_HOME + off + s * d
    tube = BallTube(pos, np.tile(d, (21, 1)), radius=0.05, active=np.ones(21, dtype=bool))
    obstacles = [Sphere(R_HOME + rng.normal(scale=0.5, size=3), 0.2) for _ in range(3)]
    return SceneModel(obstacles, tube)


def node_functions(model, scene, node):
    """All state-dependent node quantities for a batch of states at one node index."""
    obs_c, obs_r, samples, _, clearance = model._scene_arrays(scene)

    def f(X):
        m = len(X)
        out = model._eval(X, obs_c, obs_r, samples, np.full(m, node), clearance, np.ones(m, dtype=bool))
        return [np.asarray(o) for o in out]

    return f


def jacobian_error(model, scene, x, node, h=1e-6):
    """Worst relative error of the node Jacobians against central differences."""
    f = node_functions(model, scene, node)
    nx = len(x)
    batch = np.vstack([x, x + h * np.eye(nx), x - h * np.eye(nx)])
    out = f(batch)
    n = model.n
    # (value index, jacobian index, number of differentiated coordinates)
    pairs = [(0, 1, n), (2, 3, nx), (4, 5, n), (6, 7, n)]
    worst = 0.0
    for vi, ji, nd in pairs:
        val = out[vi].reshape(len(batch), -1)
        fd = (val[1 : 1 + nd] - val[1 + nx : 1 + nx + nd]) / (2 * h)  # (nd, m)
        J = out[ji][0].reshape(val.shape[1], -1)[:, :nd]
        scale = np.abs(fd).max() if fd.size else 0.0
        if scale <= 1e-8:
            # constant quantity (e.g. padded geometry): the Jacobian must vanish too
            worst = max(worst, np.abs(J).max(initial=0.0) / 1e-2)
            continue
        worst = max(worst, np.abs(J - fd.T).max() / scale)
    return worst


JACOBIAN_CASES = {
    "full_box": lambda: build_constraints(Mode.FULL, box_arrangement()),
    "full_wedge": lambda: build_constraints(Mode.FULL, wedge_arrangement(mu=0.3)),
    "upward": lambda: build_constraints(Mode.UPWARD),
    "robust_scalar": lambda: build_constraints(
        Mode.ROBUST, random_flat_arrangement(np.random.default_rng(5), n_obj=3),
        MinMuSolution(np.zeros(3), np.zeros(3), np.zeros(0), 0.0),
    ),
}
