"""Interior-point solvers for the QP subproblems.

``solve_structured_qp`` handles optimal-control structured QPs

    min   sum_k 1/2 [x;z]' [[Q, S'], [S, R]] [x;z] + q'x + r'z  +  1/2 x_K' Q_K x_K + q_K' x_K
          + sum over soft rows of  w * s^2
    s.t.  x_0 = x0,   x_{k+1} = A_k x_k + B_k z_k + c_k,
          Cx_k x_k + Cz_k z_k <= d_k (+ s_k for soft rows),  s_k >= 0,
          CxN x_K <= dN (+ sN)

with a Mehrotra predictor-corrector method.  Every Newton system is solved by
a backward Riccati recursion, and the feedback gains of the final
factorization are returned alongside the solution.  Rows with weight
``inf`` are hard constraints; finite weights give L2-penalized slacks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

_TAU = 0.995
_STALL = 5  # iterations without a new best KKT residual before giving up


class QPError(RuntimeError):
    pass


@dataclass
class StructuredQP:
    A: np.ndarray  # (K, nx, nx)
    B: np.ndarray  # (K, nx, nz)
    c: np.ndarray  # (K, nx)
    Q: np.ndarray  # (K+1, nx, nx)
    q: np.ndarray  # (K+1, nx)
    S: np.ndarray  # (K, nz, nx)
    R: np.ndarray  # (K, nz, nz)
    r: np.ndarray  # (K, nz)
    Cx: np.ndarray  # (K, m, nx)
    Cz: np.ndarray  # (K, m, nz)
    d: np.ndarray  # (K, m)
    w: np.ndarray  # (K, m)
    CxN: np.ndarray  # (mN, nx)
    dN: np.ndarray  # (mN,)
    wN: np.ndarray  # (mN,)
    x0: np.ndarray

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nz(self) -> int:
        return self.B.shape[2]

    @classmethod
    def unconstrained(cls, A, B, c, Q, q, S, R, r, x0) -> "StructuredQP":
        K, nx, nz = B.shape
        return cls(
            A, B, c, Q, q, S, R, r,
            np.zeros((K, 0, nx)), np.zeros((K, 0, nz)), np.zeros((K, 0)), np.zeros((K, 0)),
            np.zeros((0, nx)), np.zeros(0), np.zeros(0), np.asarray(x0, dtype=float),
        )

    def objective(self, x, z, s=None, sN=None) -> float:
        """QP objective; slack penalties use the stored slack values when given."""
        val = 0.0
        for k in range(self.K):
            val += 0.5 * x[k] @ self.Q[k] @ x[k] + z[k] @ self.S[k] @ x[k] + 0.5 * z[k] @ self.R[k] @ z[k]
            val += self.q[k] @ x[k] + self.r[k] @ z[k]
        val += 0.5 * x[-1] @ self.Q[-1] @ x[-1] + self.q[-1] @ x[-1]
        if s is None:
            s = np.maximum(np.einsum("kmi,ki->km", self.Cx, x[:-1]) + np.einsum("kmi,ki->km", self.Cz, z) - self.d, 0.0)
            sN = np.maximum(self.CxN @ x[-1] - self.dN, 0.0)
        soft = np.isfinite(self.w)
        softN = np.isfinite(self.wN)
        val += np.sum(self.w[soft] * s[soft] ** 2) + np.sum(self.wN[softN] * sN[softN] ** 2)
        return float(val)


@dataclass
class QPSolution:
    x: np.ndarray  # (K+1, nx)
    z: np.ndarray  # (K, nz)
    pi: np.ndarray  # (K, nx) multipliers of the dynamics
    lam: np.ndarray  # (K, m) inequality multipliers
    lamN: np.ndarray
    s: np.ndarray  # (K, m) slack values (zero on hard rows)
    sN: np.ndarray
    gains: np.ndarray  # (K, nz, nx): dz = gains @ dx + ff
    ff: np.ndarray  # (K, nz)
    iterations: int
    kkt_residual: float
    objective: float


class _Rows:
    """Interior-point variables of one block of inequality rows."""

    def __init__(self, res, w):
        self.hard = ~np.isfinite(w)
        self.w2 = np.where(self.hard, 0.0, 2.0 * np.where(self.hard, 0.0, w))
        self.s = np.where(self.hard, 0.0, np.maximum(res, 0.0) + 1.0)
        self.t = np.maximum(self.s - res, 1.0)
        self.lam = np.ones_like(res)
        self.nu = np.where(self.hard, 0.0, 1.0)

    def residuals(self, res):
        self.rp = res - self.s + self.t
        self.rs = np.where(self.hard, 0.0, self.w2 * self.s - self.lam - self.nu)

    def condense(self, rc1, rc2):
        """Coefficients so that dlam = sig * (G dy) + rho."""
        lam, t = self.lam, self.t
        s_safe = np.where(self.hard, 1.0, self.s)
        sig1 = lam / t
        sig2 = np.where(self.hard, 0.0, self.nu / s_safe)
        rp_t = self.rp - rc1 / lam
        D = np.where(self.hard, np.inf, self.w2 + sig1 + sig2)
        rho_s = np.where(self.hard, 0.0, sig1 * rp_t - self.rs - np.where(self.hard, 0.0, rc2 / s_safe))
        frac = np.where(self.hard, 0.0, sig1 / np.where(self.hard, 1.0, D))
        sig = sig1 * (1.0 - frac)
        rho = sig1 * (rp_t - np.where(self.hard, 0.0, rho_s / np.where(self.hard, 1.0, D)))
        self._cache = (sig1, sig2, D, rho_s, rp_t, s_safe)
        return sig, rho

    def recover(self, Gdy, rc1, rc2):
        sig1, sig2, D, rho_s, rp_t, s_safe = self._cache
        ds = np.where(self.hard, 0.0, (sig1 * Gdy + rho_s) / np.where(self.hard, 1.0, D))
        dlam = sig1 * (Gdy - ds + rp_t)
        dt = (-rc1 - self.t * dlam) / self.lam
        dnu = np.where(self.hard, 0.0, (-rc2 - self.nu * ds) / s_safe)
        return ds, dt, dlam, dnu

    def max_step(self, ds, dt, dlam, dnu):
        a = 1.0
        for v, dv, mask in ((self.t, dt, None), (self.lam, dlam, None), (self.s, ds, ~self.hard), (self.nu, dnu, ~self.hard)):
            neg = dv < 0
            if mask is not None:
                neg &= mask
            if np.any(neg):
                a = min(a, float(np.min(-v[neg] / dv[neg])))
        return a

    def complementarity(self):
        return float(np.sum(self.lam * self.t) + np.sum(np.where(self.hard, 0.0, self.nu * self.s)))

    @property
    def count(self):
        return self.lam.size + int(np.sum(~self.hard))

    def step(self, alpha, ds, dt, dlam, dnu):
        self.s = self.s + alpha * ds
        self.t = self.t + alpha * dt
        self.lam = self.lam + alpha * dlam
        self.nu = self.nu + alpha * dnu


def _cholesky(H, k):
    # large barrier weights late in the iteration cancel in the Riccati update; a relative
    # diagonal shift recovers a factor when roundoff alone broke definiteness
    scale = max(np.abs(np.diag(H)).max(), 1.0)
    for eps in (0.0, 1e-13, 1e-11):
        try:
            return np.linalg.cholesky(H + eps * scale * np.eye(len(H)))
        except np.linalg.LinAlgError:
            continue
    raise QPError(f"stage {k}: reduced Hessian is not positive definite")


def _riccati_factor(qp: StructuredQP, Qt, St, Rt, QtN):
    K = qp.K
    P = [None] * (K + 1)
    chol = [None] * K
    gains = np.empty((K, qp.nz, qp.nx))
    Qzx_all = np.empty((K, qp.nz, qp.nx))
    Pk = 0.5 * (QtN + QtN.T)
    P[K] = Pk
    for k in range(K - 1, -1, -1):
        A, B = qp.A[k], qp.B[k]
        BtP = B.T @ Pk
        Qzz = Rt[k] + BtP @ B
        Qzx = St[k] + BtP @ A
        Qxx = Qt[k] + A.T @ Pk @ A
        L = _cholesky(Qzz, k)
        # inverse factor: Qzz^-1 = Li' Li; the vector pass then needs only products
        L = (L, True)
        Kk = -cho_solve(L, Qzx, check_finite=False)
        Pk = Qxx + Qzx.T @ Kk
        Pk = 0.5 * (Pk + Pk.T)
        P[k] = Pk
        chol[k] = L
        gains[k] = Kk
        Qzx_all[k] = Qzx
    return P, chol, gains, Qzx_all


def _riccati_solve(qp: StructuredQP, fac, gx, gz, gN, defect, dx0):
    P, chol, gains, Qzx = fac
    K = qp.K
    p = [None] * (K + 1)
    ff = np.empty((K, qp.nz))
    pk = gN
    p[K] = pk
    for k in range(K - 1, -1, -1):
        pn = P[k + 1] @ defect[k] + pk
        qz = gz[k] + qp.B[k].T @ pn
        qx = gx[k] + qp.A[k].T @ pn
        ff[k] = -cho_solve(chol[k], qz, check_finite=False)
        pk = qx + Qzx[k].T @ ff[k]
        p[k] = pk
    dx = np.empty((K + 1, qp.nx))
    dz = np.empty((K, qp.nz))
    dpi = np.empty((K, qp.nx))
    dx[0] = dx0
    for k in range(K):
        dz[k] = gains[k] @ dx[k] + ff[k]
        dx[k + 1] = qp.A[k] @ dx[k] + qp.B[k] @ dz[k] + defect[k]
        dpi[k] = P[k + 1] @ dx[k + 1] + p[k + 1]
    return dx, dz, dpi, ff


def solve_structured_qp(qp: StructuredQP, tol: float = 1e-8, max_iter: int = 60, warm=None) -> QPSolution:
    """Solve the structured QP; see the module docstring for the problem form."""
    K, nx, nz = qp.K, qp.nx, qp.nz
    x = np.zeros((K + 1, nx)) if warm is None else warm[0].copy()
    z = np.zeros((K, nz)) if warm is None else warm[1].copy()
    x[0] = qp.x0
    pi = np.zeros((K, nx))

    def row_values(x, z):
        res = _bmv(qp.Cx, x[:-1]) + _bmv(qp.Cz, z) - qp.d
        resN = qp.CxN @ x[-1] - qp.dN
        return res, resN

    res, resN = row_values(x, z)
    rows, rowsN = _Rows(res, qp.w), _Rows(resN, qp.wN)
    n_comp = rows.count + rowsN.count
    CxT = np.swapaxes(qp.Cx, 1, 2)
    CzT = np.swapaxes(qp.Cz, 1, 2)

    it = 0
    kkt = np.inf
    fac = None
    best = None
    while True:
        res, resN = row_values(x, z)
        rows.residuals(res)
        rowsN.residuals(resN)
        # stationarity with the current multipliers
        gx = np.einsum("kij,kj->ki", qp.Q[:-1], x[:-1]) + np.einsum("kji,kj->ki", qp.S, z) + qp.q[:-1]
        gx += _bmv(CxT, rows.lam) + np.einsum("kji,kj->ki", qp.A, pi)
        gx[1:] -= pi[:-1]
        gz = np.einsum("kij,kj->ki", qp.R, z) + np.einsum("kij,kj->ki", qp.S, x[:-1]) + qp.r
        gz += _bmv(CzT, rows.lam) + np.einsum("kji,kj->ki", qp.B, pi)
        gN = qp.Q[-1] @ x[-1] + qp.q[-1] + qp.CxN.T @ rowsN.lam - pi[-1]
        defect = np.einsum("kij,kj->ki", qp.A, x[:-1]) + np.einsum("kij,kj->ki", qp.B, z) + qp.c - x[1:]
        mu = (rows.complementarity() + rowsN.complementarity()) / max(n_comp, 1)
        kkt = max(
            _absmax(gx[1:]), _absmax(gz), _absmax(gN), _absmax(defect),
            _absmax(rows.rp), _absmax(rowsN.rp), _absmax(rows.rs), _absmax(rowsN.rs), mu,
        )
        if best is None or kkt < best[0]:
            best = (kkt, it, x.copy(), z.copy(), pi.copy(), copy.deepcopy(rows), copy.deepcopy(rowsN), fac)
        elif it - best[1] >= _STALL:
            break  # roundoff floor reached; keep the best iterate
        if kkt <= tol or it >= max_iter:
            break
        it += 1

        # predictor
        rc1, rc2 = rows.lam * rows.t, rows.nu * rows.s
        rc1N, rc2N = rowsN.lam * rowsN.t, rowsN.nu * rowsN.s
        sig, rho = rows.condense(rc1, rc2)
        sigN, rhoN = rowsN.condense(rc1N, rc2N)
        sCx = sig[:, :, None] * qp.Cx
        Qt = qp.Q[:-1] + CxT @ sCx
        St = qp.S + CzT @ sCx
        Rt = qp.R + CzT @ (sig[:, :, None] * qp.Cz)
        QtN = qp.Q[-1] + qp.CxN.T @ (sigN[:, None] * qp.CxN)
        fac = _riccati_factor(qp, Qt, St, Rt, QtN)

        def newton(rho, rhoN):
            hx = gx + _bmv(CxT, rho)
            hz = gz + _bmv(CzT, rho)
            hN = gN + qp.CxN.T @ rhoN
            return _riccati_solve(qp, fac, hx, hz, hN, defect, np.zeros(nx))

        dx, dz, dpi, _ = newton(rho, rhoN)
        Gdy = _bmv(qp.Cx, dx[:-1]) + _bmv(qp.Cz, dz)
        GdyN = qp.CxN @ dx[-1]
        aff = rows.recover(Gdy, rc1, rc2)
        affN = rowsN.recover(GdyN, rc1N, rc2N)
        alpha = min(rows.max_step(*aff), rowsN.max_step(*affN))
        if n_comp:
            mu_aff = (
                np.sum((rows.lam + alpha * aff[2]) * (rows.t + alpha * aff[1]))
                + np.sum(np.where(rows.hard, 0.0, (rows.nu + alpha * aff[3]) * (rows.s + alpha * aff[0])))
                + np.sum((rowsN.lam + alpha * affN[2]) * (rowsN.t + alpha * affN[1]))
                + np.sum(np.where(rowsN.hard, 0.0, (rowsN.nu + alpha * affN[3]) * (rowsN.s + alpha * affN[0])))
            ) / n_comp
            sigma = min((mu_aff / mu) ** 3, 1.0) if mu > 0 else 0.0
            # corrector
            rc1 = rc1 + aff[1] * aff[2] - sigma * mu
            rc2 = np.where(rows.hard, 0.0, rc2 + aff[0] * aff[3] - sigma * mu)
            rc1N = rc1N + affN[1] * affN[2] - sigma * mu
            rc2N = np.where(rowsN.hard, 0.0, rc2N + affN[0] * affN[3] - sigma * mu)
            _, rho = rows.condense(rc1, rc2)
            _, rhoN = rowsN.condense(rc1N, rc2N)
            dx, dz, dpi, _ = newton(rho, rhoN)
            Gdy = _bmv(qp.Cx, dx[:-1]) + _bmv(qp.Cz, dz)
            GdyN = qp.CxN @ dx[-1]
            step = rows.recover(Gdy, rc1, rc2)
            stepN = rowsN.recover(GdyN, rc1N, rc2N)
            alpha = min(1.0, _TAU * min(rows.max_step(*step), rowsN.max_step(*stepN)))
            rows.step(alpha, *step)
            rowsN.step(alpha, *stepN)
        else:
            alpha = 1.0
        x = x + alpha * dx
        z = z + alpha * dz
        pi = pi + alpha * dpi

    kkt, _, x, z, pi, rows, rowsN, fac = best
    if fac is None:
        # no inequality iterations were needed; factor once for the gains
        fac = _riccati_factor(qp, qp.Q[:-1], qp.S, qp.R, qp.Q[-1])
    if not np.isfinite(kkt) or not np.all(np.isfinite(x)):
        raise QPError("interior-point iterations diverged")
    s = np.where(rows.hard, 0.0, rows.s)
    sN = np.where(rowsN.hard, 0.0, rowsN.s)
    gains = fac[2]
    # feedforward of the final factorization about the solution (zero step)
    ff = np.zeros((K, nz))
    return QPSolution(
        x=x, z=z, pi=pi, lam=rows.lam, lamN=rowsN.lam, s=s, sN=sN,
        gains=gains, ff=ff, iterations=it, kkt_residual=float(kkt),
        objective=qp.objective(x, z, s, sN),
    )


def _bmv(M, v):
    """Batched matrix-vector product."""
    return (M @ v[:, :, None])[:, :, 0]


def _absmax(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


# ---------------------------------------------------------------------------
# dense reference solver


@dataclass
class DenseSolution:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    lam: np.ndarray  # inequality multipliers (G x <= h)
    iterations: int
    kkt_residual: float


def solve_dense_qp(H, g, Aeq=None, beq=None, G=None, h=None, tol: float = 1e-9, max_iter: int = 100) -> DenseSolution:
    """min 1/2 x'Hx + g'x  s.t.  Aeq x = beq,  G x <= h  (primal-dual interior point)."""
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    Aeq = np.zeros((0, n)) if Aeq is None else np.asarray(Aeq, dtype=float)
    beq = np.zeros(0) if beq is None else np.asarray(beq, dtype=float)
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    me, mi = Aeq.shape[0], G.shape[0]
    x = np.zeros(n)
    y = np.zeros(me)
    t = np.maximum(h - G @ x, 1.0)
    lam = np.ones(mi)
    it = 0
    kkt = np.inf
    best = None

    def kkt_solve(sig, rx, rq):
        M = np.zeros((n + me, n + me))
        M[:n, :n] = H + G.T @ (sig[:, None] * G)
        M[:n, n:] = Aeq.T
        M[n:, :n] = Aeq
        M[n:, n:] = -1e-12 * np.eye(me)
        rhs = np.concatenate([-rx, -rq])
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
        return sol[:n], sol[n:]

    while True:
        rx = H @ x + g + Aeq.T @ y + G.T @ lam
        rq = Aeq @ x - beq
        rp = G @ x - h + t
        mu = float(lam @ t) / mi if mi else 0.0
        kkt = max(_absmax(rx), _absmax(rq), _absmax(rp), mu)
        if best is None or kkt < best[0]:
            best = (kkt, it, x, y, lam)
        elif it - best[1] >= _STALL:
            break
        if kkt <= tol or it >= max_iter:
            break
        it += 1
        sig = lam / t
        # affine step
        rc = lam * t
        dx, dy = kkt_solve(sig, rx + G.T @ (sig * (rp - rc / lam)), rq)
        dlam = sig * (G @ dx + rp - rc / lam)
        dt = (-rc - t * dlam) / lam
        alpha = _ftb(t, dt, lam, dlam, 1.0)
        if mi:
            mu_aff = float((lam + alpha * dlam) @ (t + alpha * dt)) / mi
            sigma = min((mu_aff / mu) ** 3, 1.0) if mu > 0 else 0.0
            rc = lam * t + dt * dlam - sigma * mu
            dx, dy = kkt_solve(sig, rx + G.T @ (sig * (rp - rc / lam)), rq)
            dlam = sig * (G @ dx + rp - rc / lam)
            dt = (-rc - t * dlam) / lam
        alpha = min(1.0, _TAU * _ftb(t, dt, lam, dlam, 1.0 / _TAU))
        x = x + alpha * dx
        y = y + alpha * dy
        t = t + alpha * dt
        lam = lam + alpha * dlam
    kkt, _, x, y, lam = best
    return DenseSolution(x, y, lam, it, float(kkt))


def _ftb(t, dt, lam, dlam, amax):
    a = amax
    for v, dv in ((t, dt), (lam, dlam)):
        neg = dv < 0
        if np.any(neg):
            a = min(a, float(np.min(-v[neg] / dv[neg])))
    return a


def structured_to_dense(qp: StructuredQP):
    """Flatten a structured QP into (H, g, Aeq, beq, G, h) over [x_0..x_K, z_0..z_{K-1}, slacks].

    Used as a reference for the Riccati-based solver.
    """
    K, nx, nz = qp.K, qp.nx, qp.nz
    m, mN = qp.d.shape[1], qp.dN.size
    soft = np.flatnonzero(np.isfinite(qp.w.ravel()))
    softN = np.flatnonzero(np.isfinite(qp.wN))
    ns = soft.size + softN.size
    n_xz = (K + 1) * nx + K * nz
    n = n_xz + ns
    xi = lambda k: slice(k * nx, (k + 1) * nx)  # noqa: E731
    zi = lambda k: slice((K + 1) * nx + k * nz, (K + 1) * nx + (k + 1) * nz)  # noqa: E731
    H = np.zeros((n, n))
    g = np.zeros(n)
    for k in range(K):
        H[xi(k), xi(k)] += qp.Q[k]
        H[zi(k), zi(k)] += qp.R[k]
        H[zi(k), xi(k)] += qp.S[k]
        H[xi(k), zi(k)] += qp.S[k].T
        g[xi(k)] += qp.q[k]
        g[zi(k)] += qp.r[k]
    H[xi(K), xi(K)] += qp.Q[K]
    g[xi(K)] += qp.q[K]
    Aeq = np.zeros(((K + 1) * nx, n))
    beq = np.zeros((K + 1) * nx)
    Aeq[:nx, xi(0)] = np.eye(nx)
    beq[:nx] = qp.x0
    for k in range(K):
        rows = slice((k + 1) * nx, (k + 2) * nx)
        Aeq[rows, xi(k)] = qp.A[k]
        Aeq[rows, zi(k)] = qp.B[k]
        Aeq[rows, xi(k + 1)] = -np.eye(nx)
        beq[rows] = -qp.c[k]
    G = np.zeros((K * m + mN + ns, n))
    h = np.zeros(K * m + mN + ns)
    for k in range(K):
        G[k * m:(k + 1) * m, xi(k)] = qp.Cx[k]
        G[k * m:(k + 1) * m, zi(k)] = qp.Cz[k]
        h[k * m:(k + 1) * m] = qp.d[k]
    G[K * m:K * m + mN, xi(K)] = qp.CxN
    h[K * m:K * m + mN] = qp.dN
    w_flat = qp.w.ravel()
    for j, row in enumerate(soft):
        col = n_xz + j
        G[row, col] = -1.0
        G[K * m + mN + j, col] = -1.0
        H[col, col] = 2.0 * w_flat[row]
    for j, row in enumerate(softN):
        col = n_xz + soft.size + j
        G[K * m + row, col] = -1.0
        G[K * m + mN + soft.size + j, col] = -1.0
        H[col, col] = 2.0 * qp.wN[row]
    return H, g, Aeq, beq, G, h
