"""Neural CDE exposure network with exact discrete reverse-mode gradients.

The hidden state is h = [h_alpha, h_beta]. It is encoded from the first
observation, driven along the control path by

    dh = f(h) dX,   f(h) = tanh(W_out m_L + b_out) reshaped to (H, C)
    m_0 = relu(W_0 h + b_0),  m_l = relu(W_l m_{l-1} + b_l)

and decoded into an intercept alpha (from h_alpha) and factor loadings beta
(from h_beta). Everything works on batches: h has shape (B, H). Gradients
differentiate the fixed-step solver exactly (discretize-then-optimize).
"""
import json
from dataclasses import dataclass, field

import numpy as np

EULER = "euler"
RK4 = "rk4"
SOLVERS = (EULER, RK4)
CHECKPOINT_VERSION = 1
# field activations are kept on the tape while they fit in this many bytes;
# larger problems recompute them from the stage inputs during backward
TAPE_CACHE_BYTES = 256 * 2**20


class NcdeError(RuntimeError):
    pass


_FIELD_NAMES = [tuple(f"field.{i}" for i in range(n + 1)) for n in range(8)]


@dataclass
class NcdeParams:
    n_inputs: int  # D, indicators fed to the encoders
    n_channels: int  # C, control path channels (D, or D + 1 with time)
    hidden_alpha: int
    hidden_beta: int
    n_layers: int  # L; the field has L + 1 hidden ReLU layers
    n_factors: int  # K
    arrays: dict = field(default_factory=dict)
    seed: int = None

    @property
    def hidden(self):
        return self.hidden_alpha + self.hidden_beta

    @property
    def field_names(self):
        return _FIELD_NAMES[self.n_layers] if self.n_layers < len(_FIELD_NAMES) else tuple(
            f"field.{i}" for i in range(self.n_layers + 1))

    def signature(self):
        return tuple((k, v.shape) for k, v in self.arrays.items())

    def copy(self):
        return NcdeParams(
            self.n_inputs, self.n_channels, self.hidden_alpha, self.hidden_beta,
            self.n_layers, self.n_factors, {k: v.copy() for k, v in self.arrays.items()}, self.seed,
        )

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def layer_shapes(self):
        h, c = self.hidden, self.n_channels
        shapes = {
            "enc_alpha": (self.hidden_alpha, self.n_inputs),
            "enc_beta": (self.hidden_beta, self.n_inputs),
        }
        for name in self.field_names:
            shapes[name] = (h, h)
        shapes["field.out"] = (h * c, h)
        shapes["dec_alpha"] = (1, self.hidden_alpha)
        shapes["dec_beta"] = (self.n_factors, self.hidden_beta)
        return shapes


def init_params(n_inputs, n_factors, hidden_alpha=128, hidden_beta=128, n_layers=1,
                time_channel=True, rng=None, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(seed))
    p = NcdeParams(n_inputs, n_inputs + int(time_channel), hidden_alpha, hidden_beta,
                   n_layers, n_factors, {}, seed)
    for name, (fan_out, fan_in) in p.layer_shapes().items():
        bound = 1.0 / np.sqrt(fan_in)
        p.arrays[name + ".W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        p.arrays[name + ".b"] = rng.uniform(-bound, bound, size=fan_out)
    return p


def param_count(params):
    return int(sum(v.size for v in params.arrays.values()))


def param_count_formula(n_inputs, n_factors, hidden_alpha, hidden_beta, n_layers, time_channel=True):
    h = hidden_alpha + hidden_beta
    c = n_inputs + int(time_channel)
    enc = (n_inputs + 1) * h
    fld = (n_layers + 1) * (h * h + h) + (h * h * c + h * c)
    dec = (hidden_alpha + 1) + n_factors * (hidden_beta + 1)
    return enc + fld + dec


# ---------------------------------------------------------------- layers

def init_hidden(params, x1):
    """h(t_1) from the first observation. x1 has shape (D,) or (B, D)."""
    x1 = np.asarray(x1, dtype=float)
    if not np.isfinite(x1).all():
        raise NcdeError("initial observation contains non-finite values")
    a = params.arrays
    ha = x1 @ a["enc_alpha.W"].T + a["enc_alpha.b"]
    hb = x1 @ a["enc_beta.W"].T + a["enc_beta.b"]
    return np.concatenate([ha, hb], axis=-1)


def _field_forward(params, h):
    a = params.arrays
    acts = [h]
    m = h
    for name in params.field_names:
        m = m @ a[name + ".W"].T
        m += a[name + ".b"]
        np.maximum(m, 0.0, out=m)
        acts.append(m)
    out = m @ a["field.out.W"].T
    out += a["field.out.b"]
    np.tanh(out, out=out)
    return out.reshape(h.shape[:-1] + (params.hidden, params.n_channels)), (acts, out)


def vector_field(params, h):
    """f(h) as a (..., H, C) matrix with entries in (-1, 1)."""
    return _field_forward(params, np.asarray(h, dtype=float))[0]


def _field_backward(params, cache, g_F, grads):
    """Pull back a cotangent on f(h) (shape (B, H, C)); returns the cotangent on h."""
    a = params.arrays
    acts, out = cache
    dtanh = out * out
    np.subtract(1.0, dtanh, out=dtanh)
    g = g_F.reshape(out.shape) * dtanh
    grads["field.out.W"] += g.T @ acts[-1]
    grads["field.out.b"] += g.sum(axis=0)
    g = g @ a["field.out.W"]
    names = params.field_names
    for i in range(params.n_layers, -1, -1):
        g *= acts[i + 1] > 0.0
        grads[names[i] + ".W"] += g.T @ acts[i]
        grads[names[i] + ".b"] += g.sum(axis=0)
        g = g @ a[names[i] + ".W"]
    return g


def _drive(params, h, dx):
    """f(h) @ dX/dt for a batch: (B, H)."""
    F, cache = _field_forward(params, h)
    return np.matmul(F, dx[:, :, None])[:, :, 0], cache


def _drive_backward(params, h, dx, g_v, grads, cache=None):
    if cache is None:
        _, cache = _field_forward(params, h)
    g_F = g_v[:, :, None] * dx[:, None, :]
    return _field_backward(params, cache, g_F, grads)


# ---------------------------------------------------------------- solver

def eval_offsets(solver):
    if solver == EULER:
        return (0.0,)
    if solver == RK4:
        return (0.0, 0.5, 1.0)
    raise NcdeError(f"unknown solver {solver!r}")


def path_derivatives(path, solver, steps_per_month, start=None, end=None):
    """dX/dt at every point the solver visits: array (S, n_offsets, C)."""
    if steps_per_month < 1:
        raise NcdeError("steps_per_month must be >= 1")
    start = path.start if start is None else start
    end = path.end if end is None else end
    n_steps = int(round((end - start) * steps_per_month))
    dt = (end - start) / n_steps
    base = start + dt * np.arange(n_steps)
    times = base[:, None] + dt * np.asarray(eval_offsets(solver))[None, :]
    times = np.minimum(times, end)
    return path.deriv(times), dt


@dataclass
class Tape:
    """Everything backward() needs: encoder input, path derivatives and the
    input of every solver stage. Field activations are kept when they fit in
    TAPE_CACHE_BYTES and recomputed from the stage inputs otherwise."""

    params: NcdeParams
    signature: tuple
    solver: str
    dt: float
    x1: np.ndarray
    dX: np.ndarray  # (B, S, n_offsets, C)
    h1: np.ndarray
    stage_inputs: list  # per step: tuple of (B, H) arrays, 1 (euler) or 4 (rk4)
    hN: np.ndarray = None
    alpha: np.ndarray = None
    beta: np.ndarray = None
    caches: list = None  # field activations per stage evaluation, when kept


def solve_fixed(drive, h, dX, dt, solver, record=False):
    """Fixed-step Euler or classic RK4 for dh/dt = drive(h, dX/dt).

    dX holds the control derivative at each step's evaluation offsets,
    shape (B, S, n_offsets, C). Returns (h_N, stage inputs per step).
    """
    n_steps = dX.shape[1]
    stage_inputs = []
    for s in range(n_steps):
        if solver == EULER:
            k1 = drive(h, dX[:, s, 0])
            if record:
                stage_inputs.append((h,))
            h = h + dt * k1
        else:
            k1 = drive(h, dX[:, s, 0])
            u2 = h + 0.5 * dt * k1
            k2 = drive(u2, dX[:, s, 1])
            u3 = h + 0.5 * dt * k2
            k3 = drive(u3, dX[:, s, 1])
            u4 = h + dt * k3
            k4 = drive(u4, dX[:, s, 2])
            if record:
                stage_inputs.append((h, u2, u3, u4))
            h = h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(h).all():
            raise NcdeError(f"hidden state became non-finite at solver step {s}")
    return h, stage_inputs


def _cache_bytes(params, h, dX):
    per_eval = h.shape[0] * (params.hidden * (params.n_layers + 3) + params.hidden * params.n_channels)
    n_evals = dX.shape[1] * (4 if dX.shape[2] == 3 else 1)
    return 8 * per_eval * n_evals


def _integrate(params, h, dX, dt, solver, record=True):
    eval_offsets(solver)
    caches = [] if record and _cache_bytes(params, h, dX) <= TAPE_CACHE_BYTES else None

    def drive(u, dx):
        v, cache = _drive(params, u, dx)
        if caches is not None:
            caches.append(cache)
        return v

    hN, stage_inputs = solve_fixed(drive, h, dX, dt, solver, record)
    return hN, stage_inputs, caches


def integrate(params, path, h1, solver=RK4, steps_per_month=4):
    """Integrate one window's CDE along ``path``; returns (h(t_N), Tape)."""
    dX, dt = path_derivatives(path, solver, steps_per_month)
    h1 = np.atleast_2d(np.asarray(h1, dtype=float))
    hN, stage_inputs, caches = _integrate(params, h1, dX[None], dt, solver)
    tape = Tape(params, params.signature(), solver, dt, None, dX[None], h1, stage_inputs, hN,
                caches=caches)
    return hN[0], tape


def decode(params, hN):
    a = params.arrays
    ha = hN[..., : params.hidden_alpha]
    hb = hN[..., params.hidden_alpha :]
    alpha = (ha @ a["dec_alpha.W"].T + a["dec_alpha.b"])[..., 0]
    beta = hb @ a["dec_beta.W"].T + a["dec_beta.b"]
    return alpha, beta


def forward(params, x1, dX, dt, solver, record=True):
    """Batched encode -> integrate -> decode.

    x1: (B, D) first observations; dX: (B, S, n_offsets, C) precomputed path
    derivatives. Returns (alpha (B,), beta (B, K), tape).
    """
    if dX.shape[2] != len(eval_offsets(solver)):
        raise NcdeError(f"path derivatives were sampled for a different solver than {solver!r}")
    if dX.shape[3] != params.n_channels:
        raise NcdeError(f"path has {dX.shape[3]} channels, parameters expect {params.n_channels}")
    h1 = init_hidden(params, x1)
    hN, stage_inputs, caches = _integrate(params, h1, dX, dt, solver, record)
    alpha, beta = decode(params, hN)
    if not record:
        return alpha, beta, None
    return alpha, beta, Tape(params, params.signature(), solver, dt, np.asarray(x1, float), dX,
                             h1, stage_inputs, hN, alpha, beta, caches)


def replay(tape):
    """Re-run the recorded forward pass; returns (alpha, beta)."""
    alpha, beta, _ = forward(tape.params, tape.x1, tape.dX, tape.dt, tape.solver)
    return alpha, beta


def backward(tape, g_alpha, g_beta, params=None):
    """Exact gradient of <g_alpha, alpha> + <g_beta, beta> w.r.t. every parameter."""
    params = tape.params if params is None else params
    if params.signature() != tape.signature or (params is not tape.params):
        raise NcdeError("tape was recorded with different parameters")
    a = params.arrays
    grads = params.zeros_like()
    g_alpha = np.asarray(g_alpha, dtype=float).reshape(-1)
    g_beta = np.asarray(g_beta, dtype=float).reshape(tape.beta.shape)
    ha_dim = params.hidden_alpha
    hN = tape.hN

    grads["dec_alpha.W"] += g_alpha[None, :] @ hN[:, :ha_dim]
    grads["dec_alpha.b"] += g_alpha.sum(keepdims=True)
    grads["dec_beta.W"] += g_beta.T @ hN[:, ha_dim:]
    grads["dec_beta.b"] += g_beta.sum(axis=0)
    g_h = np.concatenate([g_alpha[:, None] @ a["dec_alpha.W"], g_beta @ a["dec_beta.W"]], axis=1)

    dt, dX = tape.dt, tape.dX
    n_evals = 1 if tape.solver == EULER else 4

    def cache(s, j):
        return None if tape.caches is None else tape.caches[s * n_evals + j]

    for s in range(len(tape.stage_inputs) - 1, -1, -1):
        u = tape.stage_inputs[s]
        if tape.solver == EULER:
            g_h = g_h + _drive_backward(params, u[0], dX[:, s, 0], dt * g_h, grads, cache(s, 0))
        else:
            g_k4 = (dt / 6.0) * g_h
            g_k3 = (dt / 3.0) * g_h
            g_k2 = (dt / 3.0) * g_h
            g_k1 = (dt / 6.0) * g_h
            g_u = _drive_backward(params, u[3], dX[:, s, 2], g_k4, grads, cache(s, 3))
            g_next = g_h + g_u
            g_k3 = g_k3 + dt * g_u
            g_u = _drive_backward(params, u[2], dX[:, s, 1], g_k3, grads, cache(s, 2))
            g_next = g_next + g_u
            g_k2 = g_k2 + 0.5 * dt * g_u
            g_u = _drive_backward(params, u[1], dX[:, s, 1], g_k2, grads, cache(s, 1))
            g_next = g_next + g_u
            g_k1 = g_k1 + 0.5 * dt * g_u
            g_u = _drive_backward(params, u[0], dX[:, s, 0], g_k1, grads, cache(s, 0))
            g_h = g_next + g_u

    if tape.x1 is not None:
        g_ha, g_hb = g_h[:, :ha_dim], g_h[:, ha_dim:]
        grads["enc_alpha.W"] += g_ha.T @ tape.x1
        grads["enc_alpha.b"] += g_ha.sum(axis=0)
        grads["enc_beta.W"] += g_hb.T @ tape.x1
        grads["enc_beta.b"] += g_hb.sum(axis=0)
    return grads


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params, path, extra=None):
    """npz container: weights plus a JSON header with shapes, seed and version."""
    header = {
        "version": CHECKPOINT_VERSION,
        "n_inputs": params.n_inputs,
        "n_channels": params.n_channels,
        "hidden_alpha": params.hidden_alpha,
        "hidden_beta": params.hidden_beta,
        "n_layers": params.n_layers,
        "n_factors": params.n_factors,
        "seed": params.seed,
        "names": list(params.arrays),
        "shapes": [list(v.shape) for v in params.arrays.values()],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 **{f"w{i}": v for i, v in enumerate(params.arrays.values())})


def load_checkpoint(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise NcdeError(f"unsupported checkpoint version {header.get('version')!r}")
        arrays = {}
        for i, (name, shape) in enumerate(zip(header["names"], header["shapes"])):
            w = np.array(data[f"w{i}"], dtype=np.float64)
            if list(w.shape) != shape:
                raise NcdeError(f"checkpoint entry {name} has shape {w.shape}, header says {shape}")
            arrays[name] = w
    params = NcdeParams(header["n_inputs"], header["n_channels"], header["hidden_alpha"],
                        header["hidden_beta"], header["n_layers"], header["n_factors"], arrays,
                        header["seed"])
    return params, header["extra"]
