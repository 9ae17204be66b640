"""Group-wise dynamic factor extraction.

Each group is a linear-Gaussian state-space model whose state stacks the
common factor(s) and one AR(1) idiosyncratic component per series::

    x_t = [f_t, e_t],   x_{t+1} = A x_t + w_t,   w_t ~ N(0, Q)
    y_t = C x_t + v_t,  C = [Lambda, I],         v_t ~ N(0, diag(r))

``r`` is a fixed small floor; the idiosyncratic variance lives in Q. The
initial state x_1 ~ N(x0, P0) is fixed at initialization, so every EM
M-step is an exact maximizer and the likelihood cannot decrease.
"""
import csv
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import numerics
from .panel import format_month

LOG_2PI = math.log(2.0 * math.pi)
OBS_NOISE_FLOOR = 1e-4
IDIO_PHI_INIT = 0.5
MAX_ROOT = 0.999


class DFMError(RuntimeError):
    pass


class KalmanError(DFMError):
    def __init__(self, step, msg="innovation variance not positive"):
        self.step = step
        super().__init__(f"{msg} at timestep {step}")


@dataclass(frozen=True)
class StateSpaceModel:
    A: np.ndarray  # (m, m)
    C: np.ndarray  # (p, m)
    Q: np.ndarray  # (m, m)
    r: np.ndarray  # (p,) diagonal of R
    x0: np.ndarray  # (m,)
    P0: np.ndarray  # (m, m)
    n_factors: int = 1

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def loadings(self):
        return self.C[:, : self.n_factors]

    @property
    def factor_transition(self):
        k = self.n_factors
        return self.A[:k, :k]

    @property
    def idio_phi(self):
        k = self.n_factors
        return np.diag(self.A)[k:]

    @property
    def R(self):
        return np.diag(self.r)


@dataclass
class KalmanOutput:
    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    log_likelihood: float
    x_smooth: np.ndarray = None
    P_smooth: np.ndarray = None
    P_lag: np.ndarray = None  # P_lag[t] = Cov(x_{t+1}, x_t | all data)


@numba.njit(cache=True)
def _filter_kernel(y, mask, A, C, Q, r, x0, P0, a_diag):
    n_t, p = y.shape
    m = A.shape[0]
    x_pred = np.zeros((n_t, m))
    P_pred = np.zeros((n_t, m, m))
    x_filt = np.zeros((n_t, m))
    P_filt = np.zeros((n_t, m, m))
    ll = 0.0
    x = x0.copy()
    P = P0.copy()
    pc = np.zeros(m)
    AP = np.zeros((m, m))
    for t in range(n_t):
        x_pred[t] = x
        P_pred[t] = P
        # sequential scalar updates; exact for diagonal observation noise
        for i in range(p):
            if not mask[t, i]:
                continue
            s = r[i]
            v = y[t, i]
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += P[a, b] * C[i, b]
                pc[a] = acc
                s += C[i, a] * acc
                v -= C[i, a] * x[a]
            if not s > 0.0:
                return x_pred, P_pred, x_filt, P_filt, ll, t
            for a in range(m):
                x[a] += pc[a] * v / s
                for b in range(m):
                    P[a, b] -= pc[a] * pc[b] / s
            ll += -0.5 * (1.8378770664093453 + np.log(s) + v * v / s)
        for a in range(m):
            for b in range(a + 1, m):
                P[a, b] = P[b, a] = 0.5 * (P[a, b] + P[b, a])
        x_filt[t] = x
        P_filt[t] = P
        x = A @ x
        if a_diag:
            # one-factor groups: A = diag(a_f, phi_1, ..., phi_p)
            for a in range(m):
                for b in range(a, m):
                    P[a, b] = A[a, a] * A[b, b] * P[a, b] + Q[a, b]
                    P[b, a] = P[a, b]
            continue
        for a in range(m):
            for b in range(m):
                acc = 0.0
                for c in range(m):
                    acc += A[a, c] * P[c, b]
                AP[a, b] = acc
        for a in range(m):
            for b in range(a, m):
                acc = Q[a, b]
                for c in range(m):
                    acc += AP[a, c] * A[b, c]
                P[a, b] = acc
                P[b, a] = acc
    return x_pred, P_pred, x_filt, P_filt, ll, -1


@numba.njit(cache=True)
def _chol_solve(P, G, L, X):
    """X = P^{-1} G for SPD P via an in-place Cholesky factor L."""
    m = P.shape[0]
    for a in range(m):
        for b in range(a + 1):
            acc = P[a, b]
            for c in range(b):
                acc -= L[a, c] * L[b, c]
            if a == b:
                L[a, a] = np.sqrt(acc)
            else:
                L[a, b] = acc / L[b, b]
    for col in range(G.shape[1]):
        for a in range(m):
            acc = G[a, col]
            for c in range(a):
                acc -= L[a, c] * X[c, col]
            X[a, col] = acc / L[a, a]
        for a in range(m - 1, -1, -1):
            acc = X[a, col]
            for c in range(a + 1, m):
                acc -= L[c, a] * X[c, col]
            X[a, col] = acc / L[a, a]


@numba.njit(cache=True)
def _smoother_kernel(A, x_pred, P_pred, x_filt, P_filt, a_diag):
    n_t, m = x_filt.shape
    xs = np.zeros((n_t, m))
    Ps = np.zeros((n_t, m, m))
    P_lag = np.zeros((max(n_t - 1, 0), m, m))
    xs[n_t - 1] = x_filt[n_t - 1]
    Ps[n_t - 1] = P_filt[n_t - 1]
    G = np.zeros((m, m))
    L = np.zeros((m, m))
    X = np.zeros((m, m))
    D = np.zeros((m, m))
    JD = np.zeros((m, m))
    for t in range(n_t - 2, -1, -1):
        # J = P_filt A' P_pred[t+1]^{-1} = (P_pred[t+1]^{-1} A P_filt)'
        Pf = P_filt[t]
        for a in range(m):
            for b in range(m):
                if a_diag:
                    G[a, b] = A[a, a] * Pf[a, b]
                    continue
                acc = 0.0
                for c in range(m):
                    acc += A[a, c] * Pf[c, b]
                G[a, b] = acc
        _chol_solve(P_pred[t + 1], G, L, X)  # X = J'
        for a in range(m):
            acc = x_filt[t, a]
            for c in range(m):
                acc += X[c, a] * (xs[t + 1, c] - x_pred[t + 1, c])
            xs[t, a] = acc
            for b in range(m):
                D[a, b] = Ps[t + 1, a, b] - P_pred[t + 1, a, b]
        for a in range(m):
            for b in range(m):
                acc = 0.0
                for c in range(m):
                    acc += X[c, a] * D[c, b]
                JD[a, b] = acc
        for a in range(m):
            for b in range(a, m):
                acc = Pf[a, b]
                for c in range(m):
                    acc += JD[a, c] * X[c, b]
                Ps[t, a, b] = acc
                Ps[t, b, a] = acc
        for a in range(m):
            for b in range(m):
                acc = 0.0
                for c in range(m):
                    acc += Ps[t + 1, a, c] * X[c, b]
                P_lag[t, a, b] = acc
    return xs, Ps, P_lag


def _is_diagonal(A):
    return not np.any(A - np.diag(np.diag(A)))


def _prep(values, mask):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if mask is None:
        mask = np.isfinite(values)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    y = np.where(mask, values, 0.0)
    return np.ascontiguousarray(y), mask


def kalman_filter(model, values, mask=None):
    """Forward pass; only observed cells enter the update and the likelihood."""
    y, mask = _prep(values, mask)
    if y.shape[1] != model.C.shape[0]:
        raise DFMError(f"panel has {y.shape[1]} series, model expects {model.C.shape[0]}")
    xp, Pp, xf, Pf, ll, bad = _filter_kernel(
        y, mask, model.A, model.C, model.Q, model.r, model.x0, model.P0, _is_diagonal(model.A)
    )
    if bad >= 0:
        raise KalmanError(int(bad))
    if not math.isfinite(ll):
        raise DFMError("log-likelihood is not finite")
    return KalmanOutput(xp, Pp, xf, Pf, float(ll))


def kalman_smooth(model, out):
    """Rauch-Tung-Striebel backward pass, filling the smoothed fields of ``out``."""
    xs, Ps, P_lag = _smoother_kernel(model.A, out.x_pred, out.P_pred, out.x_filt, out.P_filt,
                                     _is_diagonal(model.A))
    return replace(out, x_smooth=xs, P_smooth=Ps, P_lag=P_lag)


def _stationary_cov(A, Q):
    return numerics.symmetrize(solve_discrete_lyapunov(A, Q))


def pca_init(values, mask=None, n_factors=1):
    """Principal-component starting values for one group.

    Missing cells are replaced by the column's observed mean, for the
    covariance estimate only.
    """
    y, mask = _prep(values, mask)
    n_t, p = y.shape
    k = n_factors
    if n_t < 2 or mask.any(axis=1).sum() < 2:
        raise DFMError("pca_init needs at least 2 observed rows")
    if not 1 <= k <= p:
        raise DFMError(f"cannot extract {k} factors from {p} series")
    counts = mask.sum(axis=0)
    if (counts == 0).any():
        raise DFMError("every series needs at least one observation")
    col_mean = (y * mask).sum(axis=0) / counts
    filled = np.where(mask, y, col_mean) - col_mean
    cov = filled.T @ filled / n_t
    eigval, eigvec = numerics.sym_eig(cov)
    lam = np.maximum(eigval[:k], 1e-12)
    vec = eigvec[:, :k]
    loadings = vec * np.sqrt(lam)
    factors = filled @ vec / np.sqrt(lam)
    for j in range(k):
        if loadings[:, j].mean() < 0:
            loadings[:, j] *= -1
            factors[:, j] *= -1

    lagged, current = factors[:-1], factors[1:]
    sxx = lagged.T @ lagged
    if np.linalg.det(sxx) > 1e-12:
        Af = numerics.solve_spd(sxx, lagged.T @ current).T
    else:
        Af = np.zeros((k, k))
    Af = _stabilize(Af)
    resid_f = current - lagged @ Af.T
    Qf = numerics.symmetrize(resid_f.T @ resid_f / max(len(resid_f), 1))
    Qf = Qf + 1e-6 * np.eye(k)

    resid = np.where(mask, y - factors @ loadings.T, 0.0)
    resid_var = np.maximum((resid**2).sum(axis=0) / counts, OBS_NOISE_FLOOR)
    phi = np.full(p, IDIO_PHI_INIT)
    q_idio = resid_var * (1.0 - phi**2)

    m = k + p
    A = np.zeros((m, m))
    A[:k, :k] = Af
    A[k:, k:] = np.diag(phi)
    Q = np.zeros((m, m))
    Q[:k, :k] = Qf
    Q[k:, k:] = np.diag(q_idio)
    C = np.hstack([loadings, np.eye(p)])
    P0 = np.zeros((m, m))
    P0[:k, :k] = _stationary_cov(Af, Qf)
    P0[k:, k:] = np.diag(resid_var)
    return StateSpaceModel(A, C, Q, np.full(p, OBS_NOISE_FLOOR), np.zeros(m), P0, k)


def _stabilize(Af):
    rho = numerics.spectral_radius(Af)
    if rho >= MAX_ROOT:
        Af = Af * (MAX_ROOT / rho)
    return Af


def _m_step(model, y, mask, out):
    k = model.n_factors
    n_t, p = y.shape
    xs, Ps, P_lag = out.x_smooth, out.P_smooth, out.P_lag
    second = Ps + xs[:, :, None] * xs[:, None, :]  # E[x_t x_t']
    cross = P_lag + xs[1:, :, None] * xs[:-1, None, :]  # E[x_{t+1} x_t']
    s11 = second[1:].sum(axis=0)
    s00 = second[:-1].sum(axis=0)
    s10 = cross.sum(axis=0)
    n = n_t - 1

    Af = numerics.solve_spd(s00[:k, :k], s10[:k, :k].T).T
    Af = _stabilize(Af)
    Qf = (s11[:k, :k] - Af @ s10[:k, :k].T - s10[:k, :k] @ Af.T + Af @ s00[:k, :k] @ Af.T) / n
    Qf = numerics.symmetrize(Qf) + 1e-10 * np.eye(k)

    d10 = np.diag(s10)[k:]
    d00 = np.diag(s00)[k:]
    d11 = np.diag(s11)[k:]
    phi = np.clip(d10 / d00, -MAX_ROOT, MAX_ROOT)
    q_idio = np.maximum((d11 - 2 * phi * d10 + phi**2 * d00) / n, 1e-10)

    loadings = np.zeros((p, k))
    for i in range(p):
        rows = mask[:, i]
        if not rows.any():
            loadings[i] = model.C[i, :k]
            continue
        eff = second[rows][:, :k, :k].sum(axis=0)
        ef_e = second[rows][:, :k, k + i].sum(axis=0)
        rhs = (y[rows, i][:, None] * xs[rows, :k]).sum(axis=0) - ef_e
        loadings[i] = numerics.solve_spd(eff, rhs)

    m = k + p
    A = np.zeros((m, m))
    A[:k, :k] = Af
    A[k:, k:] = np.diag(phi)
    Q = np.zeros((m, m))
    Q[:k, :k] = Qf
    Q[k:, k:] = np.diag(q_idio)
    C = np.hstack([loadings, np.eye(p)])
    return replace(model, A=A, C=C, Q=Q)


@dataclass
class EMResult:
    model: StateSpaceModel
    output: KalmanOutput
    log_likelihoods: list
    n_iter: int
    converged: bool


def e_step(model, values, mask=None):
    return kalman_smooth(model, kalman_filter(model, values, mask))


def em_fit(values, mask=None, n_factors=1, max_iter=500, tol=1e-6, init=None, monotone_tol=1e-8):
    """EM estimation starting from ``pca_init`` (or ``init``).

    Stops when |dll| / (|ll| + 1e-10) < tol or after ``max_iter`` M-steps.
    A log-likelihood drop larger than ``monotone_tol`` (relative to
    max(1, |ll|)) raises DFMError.
    """
    y, mask = _prep(values, mask)
    model = init if init is not None else pca_init(y, mask, n_factors)
    out = e_step(model, y, mask)
    lls = [out.log_likelihood]
    converged = False
    n_iter = 0
    while n_iter < max_iter:
        model = _m_step(model, y, mask, out)
        out = e_step(model, y, mask)
        n_iter += 1
        ll_old, ll_new = lls[-1], out.log_likelihood
        lls.append(ll_new)
        if ll_new < ll_old - monotone_tol * max(1.0, abs(ll_old)):
            raise DFMError(f"log-likelihood decreased at iteration {n_iter}: {ll_old!r} -> {ll_new!r}")
        if abs(ll_new - ll_old) / (abs(ll_old) + 1e-10) < tol:
            converged = True
            break
    return EMResult(model, out, lls, n_iter, converged)


def flip_factor(model, j):
    """Negate factor j's sign in the model (loadings, dynamics, initial state)."""
    m = model.state_dim
    s = np.ones(m)
    s[j] = -1.0
    S = np.diag(s)
    return replace(
        model,
        A=S @ model.A @ S,
        C=model.C @ S,
        Q=S @ model.Q @ S,
        x0=s * model.x0,
        P0=S @ model.P0 @ S,
    )


def align_signs(model):
    """Flip each factor so its loading vector has a positive mean."""
    for j in range(model.n_factors):
        if model.C[:, j].mean() < 0:
            model = flip_factor(model, j)
    return model


@dataclass
class FactorSet:
    groups: list
    times: np.ndarray
    z: np.ndarray  # (T, K) smoothed factors
    transition: np.ndarray  # (K,) per-group factor AR coefficient
    results: dict = field(default_factory=dict, repr=False)

    @property
    def n_factors(self):
        return self.z.shape[1]

    @property
    def z_next(self):
        """One-step transition forecast beyond the last panel month."""
        return self.transition * self.z[-1]

    def at_target(self, target_row, mode="forecast"):
        """Factor vector used for a window whose target sits at ``target_row``."""
        if mode == "forecast":
            return self.transition * self.z[target_row - 1]
        if mode == "smoothed_last":
            return self.z[target_row].copy()
        raise ValueError(f"unknown z_next_mode {mode!r}")

    def for_windows(self, windows, mode="forecast"):
        if not windows:
            return np.zeros((0, self.n_factors))
        return np.stack([self.at_target(w.target_row, mode) for w in windows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "group", "factor_value"])
            for i, month in enumerate(self.times):
                for j, g in enumerate(self.groups):
                    w.writerow([format_month(month), g, repr(float(self.z[i, j]))])


def extract_factors(panel, groups=None, max_iter=500, tol=1e-6):
    """One EM-fitted single-factor model per group; the target column is never used."""
    groups = list(groups) if groups is not None else [
        g for g in panel.groups() if panel.group_columns(g)
    ]
    if not groups:
        raise DFMError("no groups to extract factors from")
    z = np.zeros((panel.n_times, len(groups)))
    transition = np.zeros(len(groups))
    results = {}
    for j, g in enumerate(groups):
        cols = panel.group_columns(g)
        if not cols:
            raise DFMError(f"group {g!r} has no indicators")
        vals = panel.values[:, cols]
        msk = panel.mask[:, cols]
        try:
            res = em_fit(vals, msk, 1, max_iter=max_iter, tol=tol)
            model = align_signs(res.model)
            if model is not res.model:
                res = replace(res, model=model, output=e_step(model, vals, msk))
        except (DFMError, np.linalg.LinAlgError) as exc:
            raise DFMError(f"group {g!r}: {exc}") from exc
        z[:, j] = res.output.x_smooth[:, 0]
        transition[j] = res.model.A[0, 0]
        results[g] = res
    return FactorSet(groups, panel.times.copy(), z, transition, results)
