"""Natural cubic spline control paths.

Each channel is fitted on its own observed knots, so a gap in one channel
never perturbs another. On interval i a channel is
``a + b*s + c*s**2 + d*s**3`` with ``s = t - knots[i]``.
"""
from dataclasses import dataclass

import numpy as np


class PathError(ValueError):
    pass


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm. ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = len(diag)
    cp = np.zeros(n)
    dp = np.zeros(n)
    cp[0] = upper[0] / diag[0] if n > 1 else 0.0
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom if i < n - 1 else 0.0
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    x = np.zeros(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def natural_cubic_coeffs(knots, values):
    """Per-interval coefficients (a, b, c, d), each of length len(knots) - 1."""
    t = np.asarray(knots, dtype=float)
    y = np.asarray(values, dtype=float)
    n = len(t)
    if n < 2:
        raise PathError("a spline needs at least 2 knots")
    h = np.diff(t)
    if (h <= 0).any():
        raise PathError("knot times must be strictly increasing")
    # second derivatives M at knots; natural ends M[0] = M[-1] = 0
    m = np.zeros(n)
    if n > 2:
        slope = np.diff(y) / h
        rhs = 6.0 * np.diff(slope)
        lower = np.concatenate([[0.0], h[1:-1]])
        diag = 2.0 * (h[:-1] + h[1:])
        upper = np.concatenate([h[1:-1], [0.0]])
        m[1:-1] = solve_tridiagonal(lower, diag, upper, rhs)
    a = y[:-1].copy()
    b = (y[1:] - y[:-1]) / h - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return a, b, c, d


@dataclass(frozen=True)
class ChannelSpline:
    knots: np.ndarray
    values: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @classmethod
    def fit(cls, knots, values):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        return cls(knots, values, *natural_cubic_coeffs(knots, values))

    def _locate(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.knots) - 2)
        return idx, t - self.knots[idx]

    def eval(self, t):
        i, s = self._locate(t)
        return self.a[i] + s * (self.b[i] + s * (self.c[i] + s * self.d[i]))

    def deriv(self, t):
        i, s = self._locate(t)
        return self.b[i] + s * (2.0 * self.c[i] + 3.0 * s * self.d[i])

    def second_deriv(self, t):
        i, s = self._locate(t)
        return 2.0 * self.c[i] + 6.0 * s * self.d[i]


@dataclass(frozen=True)
class CubicSplinePath:
    channels: tuple
    start: float
    end: float

    @property
    def n_channels(self):
        return len(self.channels)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, abs(self.end))
        if (t < self.start - tol).any() or (t > self.end + tol).any():
            raise PathError(f"t outside path domain [{self.start}, {self.end}]")
        return t

    def eval(self, t):
        t = self._check(t)
        return np.stack([ch.eval(t) for ch in self.channels], axis=-1)

    def deriv(self, t):
        t = self._check(t)
        return np.stack([ch.deriv(t) for ch in self.channels], axis=-1)

    def second_deriv(self, t):
        t = self._check(t)
        return np.stack([ch.second_deriv(t) for ch in self.channels], axis=-1)


def fit(times, values, mask=None, names=None, time_channel=False):
    """Fit one natural spline per column on that column's observed cells.

    The path domain is the span of ``times``; every channel's knots must cover
    it. With ``time_channel`` an extra channel X(t) = t is appended.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if mask is None:
        mask = np.isfinite(values)
    mask = np.asarray(mask, dtype=bool)
    if len(times) < 2 or (np.diff(times) <= 0).any():
        raise PathError("times must be strictly increasing with at least 2 entries")
    channels = []
    for j in range(values.shape[1]):
        obs = mask[:, j]
        label = names[j] if names is not None else j
        if obs.sum() < 2:
            raise PathError(f"channel {label} has fewer than 2 observations")
        knots = times[obs]
        if knots[0] > times[0] or knots[-1] < times[-1]:
            raise PathError(f"channel {label} does not span the path domain")
        channels.append(ChannelSpline.fit(knots, values[obs, j]))
    if time_channel:
        channels.append(ChannelSpline.fit(times[[0, -1]], times[[0, -1]]))
    return CubicSplinePath(tuple(channels), float(times[0]), float(times[-1]))
