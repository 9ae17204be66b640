"""Synthetic mixed-frequency panels drawn from a known dynamic factor model.

Indicators follow y_t = Lambda f_t + e_t with VAR(1) factors and AR(1)
idiosyncratic terms. A quarterly target is attached through a target rule,
which may make the intercept and loadings depend on the factor state and may
contain a sudden-drop episode.
"""
import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics
from .panel import MONTHLY, QUARTERLY, IndicatorMeta, Panel, format_month, is_quarter_end, parse_month

TARGET_ID = "GDP"


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    k: int
    d: int
    t_months: int
    seed: int = 0
    noise_obs: float = 0.5
    noise_state: float = 1.0
    target_rule: dict = field(default_factory=lambda: {"kind": "linear"})
    n_quarterly: int = None
    start: str = "2000-01"
    factor_ar: float = 0.8
    idio_ar: float = 0.3
    A: list = None
    loadings: list = None
    global_group: bool = False

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SyntheticError(f"unknown synthetic spec keys: {sorted(unknown)}")
        missing = {"k", "d", "t_months"} - set(doc)
        if missing:
            raise SyntheticError(f"synthetic spec lacks {sorted(missing)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def validate(self):
        if int(self.k) < 1:
            raise SyntheticError(f"k must be >= 1, got {self.k}")
        if int(self.d) < 1:
            raise SyntheticError(f"d must be >= 1, got {self.d}")
        if int(self.t_months) < 3:
            raise SyntheticError(f"t_months must be >= 3, got {self.t_months}")
        if self.noise_obs < 0 or self.noise_state < 0:
            raise SyntheticError("noise scales must be non-negative")
        nq = self.quarterly_count
        if not 0 <= nq <= self.d:
            raise SyntheticError(f"n_quarterly must lie in [0, d], got {nq}")

    @property
    def quarterly_count(self):
        return self.d // 4 if self.n_quarterly is None else int(self.n_quarterly)


def _transition(spec):
    if spec.A is not None:
        A = np.asarray(spec.A, dtype=float).reshape(spec.k, spec.k)
    else:
        A = spec.factor_ar * np.eye(spec.k)
    if numerics.spectral_radius(A) >= 1.0:
        raise SyntheticError(f"factor transition is unstable (spectral radius {numerics.spectral_radius(A):.4f} >= 1)")
    return A


def _loadings(spec, rng):
    if spec.loadings is not None:
        lam = np.asarray(spec.loadings, dtype=float).reshape(spec.d, spec.k)
        block = np.argmax(np.abs(lam), axis=1)
        return lam, block
    block = np.arange(spec.d) * spec.k // spec.d
    lam = np.zeros((spec.d, spec.k))
    lam[np.arange(spec.d), block] = rng.uniform(0.5, 1.5, size=spec.d)
    return lam, block


def _target(rule, z, q_rows, rng):
    """Target value, intercept and loadings at each quarter-end row."""
    kind = rule.get("kind", "linear")
    k = z.shape[1]
    noise = float(rule.get("noise", 0.0))
    zq = z[q_rows]
    if kind == "linear":
        alpha = np.full(len(q_rows), float(rule.get("intercept", 0.0)))
        coefs = np.asarray(rule.get("coefs", [1.0] * k), dtype=float)
        if coefs.shape != (k,):
            raise SyntheticError(f"target_rule.coefs needs {k} entries")
        beta = np.tile(coefs, (len(q_rows), 1))
    elif kind == "regime":
        # a slow regime signal read off one factor scales the intercept and the
        # loadings of every other factor
        j = int(rule.get("regime_factor", k - 1))
        width = int(rule.get("regime_window", 6))
        csum = np.concatenate([[0.0], np.cumsum(z[:, j])])
        rows = np.asarray(q_rows)
        lo = np.maximum(rows + 1 - width, 0)
        level = (csum[rows + 1] - csum[lo]) / (rows + 1 - lo)
        regime = np.tanh(float(rule.get("gain", 1.0)) * level)
        alpha = float(rule.get("alpha0", 2.0)) + float(rule.get("alpha_amp", 0.5)) * regime
        beta = np.full((len(rows), k), float(rule.get("beta0", 0.5)))
        others = [i for i in range(k) if i != j] if k > 1 else [0]
        beta[:, others] += float(rule.get("beta_amp", 0.8)) * regime[:, None]
    else:
        raise SyntheticError(f"unknown target_rule kind {kind!r}")
    y = alpha + (beta * zq).sum(axis=1) + noise * rng.normal(size=len(q_rows))
    return y, alpha, beta


def generate_synthetic(spec, rng=None):
    """Sample a panel (raw scale) and the ground truth that produced it."""
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    spec.validate()
    if rng is None:
        rng = numerics.make_rng(spec.seed)
    k, d, n_t = int(spec.k), int(spec.d), int(spec.t_months)
    A = _transition(spec)
    lam, block = _loadings(spec, rng)

    Qf = spec.noise_state**2 * np.eye(k)
    if spec.noise_state > 0:
        from scipy.linalg import solve_discrete_lyapunov

        P0 = numerics.symmetrize(solve_discrete_lyapunov(A, Qf))
    else:
        P0 = np.eye(k)
    shocks = np.zeros((n_t, k))
    drop = spec.target_rule.get("drop")
    if drop:
        at = int(float(drop.get("at", 0.9)) * n_t)
        months = int(drop.get("months", 3))
        size = float(drop.get("size", 3.0))
        hit = drop.get("factors", list(range(k)))
        shocks[at : at + months, hit] = -size * max(spec.noise_state, 1.0)

    z = np.zeros((n_t, k))
    z[0] = numerics.cholesky(P0 + 1e-12 * np.eye(k)) @ rng.normal(size=k)
    for t in range(1, n_t):
        z[t] = A @ z[t - 1] + spec.noise_state * rng.normal(size=k) + shocks[t]

    phi = np.full(d, spec.idio_ar)
    e = np.zeros((n_t, d))
    if spec.noise_obs > 0:
        e[0] = spec.noise_obs / np.sqrt(1 - phi**2) * rng.normal(size=d)
        for t in range(1, n_t):
            e[t] = phi * e[t - 1] + spec.noise_obs * rng.normal(size=d)
    x = z @ lam.T + e

    start = parse_month(spec.start)
    times = np.arange(start, start + n_t)
    q_rows = np.array([i for i in range(n_t) if is_quarter_end(times[i])], dtype=int)
    y, alpha, beta = _target(spec.target_rule, z, q_rows, rng)

    nq = spec.quarterly_count
    metas, values = [], np.full((n_t, d + 1), np.nan)
    for j in range(d):
        tags = (f"G{block[j] + 1}",) + (("Global",) if spec.global_group else ())
        freq = QUARTERLY if j >= d - nq else MONTHLY
        metas.append(IndicatorMeta(f"X{j + 1:02d}", freq, tags))
        if freq == QUARTERLY:
            values[q_rows, j] = x[q_rows, j]
        else:
            values[:, j] = x[:, j]
    metas.append(IndicatorMeta(TARGET_ID, QUARTERLY, ("Target",)))
    values[q_rows, d] = y
    panel = Panel(times, values, np.isfinite(values), tuple(metas), TARGET_ID)
    truth = {
        "A": A.tolist(),
        "loadings": lam.tolist(),
        "idio_phi": phi.tolist(),
        "months": [format_month(m) for m in times],
        "factors": z.tolist(),
        "target_months": [format_month(times[r]) for r in q_rows],
        "alpha": alpha.tolist(),
        "beta": beta.tolist(),
        "target": y.tolist(),
    }
    return panel, truth


def benchmark_spec(seed, t_months=1200):
    """Standard benchmark: two factor blocks, a state-dependent target and a
    sudden drop late in the sample (inside the test split)."""
    return SyntheticSpec(
        k=2,
        d=10,
        t_months=t_months,
        seed=seed,
        noise_obs=0.5,
        noise_state=1.0,
        n_quarterly=2,
        target_rule={
            "kind": "regime",
            "alpha0": 2.0,
            "alpha_amp": 0.5,
            "beta0": 0.6,
            "beta_amp": 0.8,
            "regime_factor": 1,
            "regime_window": 6,
            "gain": 1.5,
            "noise": 0.2,
            "drop": {"at": 0.93, "months": 3, "size": 2.0, "factors": [0]},
        },
    )
