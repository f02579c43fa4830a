"""MLP velocity field with hand-written backward pass and Adam.

Inputs are ``concat(x_t, time_embed(t))``.  Parameters may be held at
float32; every forward/backward/optimizer computation runs in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, InvalidState, NumericError
from .synthgen import _read_header

CKPT_MAGIC = b"SCK1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetArch:
    embed_dim: int = 64
    hidden_widths: tuple = (256, 256, 256)
    time_freqs: int = 8
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise InvalidArgument("hidden_widths must be non-empty")
        if self.embed_dim < 1 or self.time_freqs < 1 or min(self.hidden_widths) < 1:
            raise InvalidArgument("all architecture dimensions must be >= 1")
        if self.activation != "silu":
            raise InvalidArgument(f"unsupported activation {self.activation!r}")

    @property
    def time_dim(self):
        return 2 * self.time_freqs

    @property
    def in_dim(self):
        return 2 * self.embed_dim + self.time_dim

    @property
    def out_dim(self):
        return 2 * self.embed_dim

    @property
    def layer_dims(self):
        """(fan_in, fan_out) per affine layer."""
        dims = (self.in_dim,) + self.hidden_widths + (self.out_dim,)
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self):
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


@dataclass(frozen=True)
class VelocityNetParams:
    arch: NetArch
    weights: list  # (fan_in, fan_out) each
    biases: list

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self):
        return list(self.weights) + list(self.biases)


@dataclass(frozen=True)
class Gradients:
    weights: list
    biases: list

    def tensors(self):
        return list(self.weights) + list(self.biases)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ForwardCache:
    params: VelocityNetParams
    inputs: list  # layer inputs (activations), one per affine layer
    preacts: list  # hidden pre-activations
    consumed: bool = field(default=False)


def init_velocity_net(arch, seed, dtype=np.float32):
    """He-normal hidden layers; the output layer is zero so v starts at 0."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = arch.layer_dims
    for k, (fi, fo) in enumerate(dims):
        if k == len(dims) - 1:
            w = np.zeros((fi, fo))
        else:
            w = rng.standard_normal((fi, fo)) * np.sqrt(2.0 / fi)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fo, dtype=dtype))
    return VelocityNetParams(arch, weights, biases)


def time_embed(t, time_freqs):
    """Sinusoidal features ``sin(2pi 2^k t), cos(2pi 2^k t)``, interleaved per k.

    ``t`` may be a scalar (returns a vector) or a 1-D array (returns rows).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or np.any(np.isnan(t_arr)):
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    phase = 2 * np.pi * t_arr[..., None] * (2.0 ** np.arange(time_freqs))
    out = np.empty(t_arr.shape + (2 * time_freqs,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def net_forward(params, x_t, t):
    """Evaluate v(x_t, t) for a batch.  Returns ``(v, cache)``."""
    arch = params.arch
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != arch.out_dim:
        raise InvalidArgument(f"x_t must have shape (batch, {arch.out_dim}), got {x_t.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(x_t.shape[0], float(t))
    if t.shape != (x_t.shape[0],):
        raise InvalidArgument(f"t must have shape ({x_t.shape[0]},), got {t.shape}")
    h = np.concatenate([x_t, time_embed(t, arch.time_freqs)], axis=1)
    inputs, preacts = [], []
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.astype(np.float64) + b
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite output in layer {k}")
        if k == n_layers - 1:
            h = a
        else:
            preacts.append(a)
            h = a * _sigmoid(a)
    return h, ForwardCache(params, inputs, preacts)


def net_backward(params, cache, dL_dv):
    """Reverse-mode gradients of the batch mean of per-row losses.

    ``dL_dv[r]`` is the derivative of row r's loss with respect to v[r];
    the returned gradients are averaged over rows.
    """
    if cache.params is not params:
        raise InvalidState("forward cache belongs to a different parameter set")
    if cache.consumed:
        raise InvalidState("forward cache was already consumed by a backward call")
    cache.consumed = True
    g = np.asarray(dL_dv, dtype=np.float64)
    n = g.shape[0]
    if g.shape != (n, params.arch.out_dim) or cache.inputs[0].shape[0] != n:
        raise InvalidArgument(f"dL_dv shape {g.shape} does not match the cached batch")
    g = g / n
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        if k == 0:
            break
        g = g @ params.weights[k].astype(np.float64).T
        a = cache.preacts[k - 1]
        s = _sigmoid(a)
        g = g * (s * (1.0 + a * (1.0 - s)))
    return Gradients(gw, gb)


def init_adam(params, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = [np.zeros_like(p) for p in params.tensors()]
    return AdamState(zeros, [z.copy() for z in zeros], 0, beta1, beta2, eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update.  Returns new ``(params, state)``."""
    if not lr > 0:
        raise InvalidArgument(f"lr must be > 0, got {lr}")
    gs = grads.tensors()
    ps = params.tensors()
    if len(gs) != len(ps) or any(g.shape != p.shape for g, p in zip(gs, ps)):
        raise InvalidArgument("gradient shapes do not match parameters")
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m64 = b1 * m.astype(np.float64) + (1.0 - b1) * g
        v64 = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
        upd = lr * (m64 / c1) / (np.sqrt(v64 / c2) + eps)
        with np.errstate(over="ignore"):
            new_p.append((p.astype(np.float64) - upd).astype(p.dtype))
            new_m.append(m64.astype(m.dtype))
            new_v.append(v64.astype(v.dtype))
        if not (np.all(np.isfinite(new_p[-1])) and np.all(np.isfinite(new_v[-1]))):
            raise NumericError("Adam update overflowed the parameter precision")
    nl = len(params.weights)
    out = VelocityNetParams(params.arch, new_p[:nl], new_p[nl:])
    return out, AdamState(new_m, new_v, step, b1, b2, eps)


def write_checkpoint(params, adam, arch, train_config, path, rng_state=None, history=None):
    """Write an SCK1 checkpoint.

    Sections (float32, little-endian): weights by layer, biases by layer,
    then Adam first and second moments in the same order.
    """
    if arch != params.arch:
        raise InvalidArgument("arch does not match params")
    manifest = {
        "version": CKPT_VERSION,
        "arch": arch.to_dict(),
        "optimizer": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "step": int(adam.step),
        "rng": rng_state,
        "train_config": train_config,
        "history": history or {"train_loss": [], "heldout_loss": []},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    sections = params.tensors() + list(adam.m) + list(adam.v)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for s in sections:
            f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


@dataclass
class Checkpoint:
    params: VelocityNetParams
    adam: AdamState
    arch: NetArch
    train_config: dict
    rng_state: dict
    history: dict


def read_checkpoint(path, expected_arch=None):
    buf = Path(path).read_bytes()
    manifest, offset = _read_header(buf, CKPT_MAGIC, "checkpoint")
    if manifest.get("version") != CKPT_VERSION:
        raise FormatError(f"unsupported version {manifest.get('version')!r}", "version")
    raw = manifest.get("arch")
    if not isinstance(raw, dict):
        raise FormatError("missing architecture block", "arch")
    try:
        arch = NetArch(**raw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid architecture ({exc})", "arch") from None
    if expected_arch is not None:
        for key, val in expected_arch.to_dict().items():
            if arch.to_dict().get(key) != val:
                raise FormatError(
                    f"checkpoint has {arch.to_dict().get(key)!r}, expected {val!r}", f"arch.{key}")
    shapes = [(fi, fo) for fi, fo in arch.layer_dims] + [(fo,) for _, fo in arch.layer_dims]
    expected = 3 * sum(int(np.prod(s)) for s in shapes) * 4
    if len(buf) - offset != expected:
        raise FormatError(
            f"payload holds {len(buf) - offset} bytes but arch (embed_dim={arch.embed_dim}, "
            f"hidden_widths={list(arch.hidden_widths)}, time_freqs={arch.time_freqs}) "
            f"needs {expected}", "arch.hidden_widths")
    tensors = []
    for _ in range(3):
        for s in shapes:
            count = int(np.prod(s))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(s)
            tensors.append(arr.astype(np.float32))
            offset += count * 4
    nl = len(arch.layer_dims)
    nt = 2 * nl
    params = VelocityNetParams(arch, tensors[:nl], tensors[nl:nt])
    for k, t in enumerate(params.tensors()):
        if not np.all(np.isfinite(t)):
            raise FormatError(f"non-finite parameter in tensor {k}", "payload")
    opt = manifest.get("optimizer", {})
    step = manifest.get("step")
    if not isinstance(step, int) or step < 0:
        raise FormatError(f"invalid step counter {step!r}", "step")
    adam = AdamState(tensors[nt:nt + nt], tensors[nt + nt:], step,
                     opt.get("beta1", 0.9), opt.get("beta2", 0.999), opt.get("eps", 1e-8))
    return Checkpoint(params, adam, arch, manifest.get("train_config") or {},
                      manifest.get("rng"), manifest.get("history") or {})
