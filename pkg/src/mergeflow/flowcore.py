"""Linear-schedule flow matching between reference pairs and merged embeddings.

Training only ever moves from ``x0 = [z(i,a), z(b,j)]`` towards
``x1 = [z(i,j), z(i,j)]``; disentangling is the same ODE integrated from
t=1 back to t=0.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericError
from .flownet import adam_step, init_adam, net_backward, net_forward, write_checkpoint
from .synthgen import child_seeds, sample_triplet_batch

DIRECTIONS = ("forward_01", "reverse_10")
METHODS = ("euler", "midpoint")
HELDOUT_BATCHES = 4


class LinearSchedule:
    """alpha(t) = 1 - t, sigma(t) = t."""

    kind = "linear"

    @staticmethod
    def alpha(t):
        return 1.0 - t

    @staticmethod
    def sigma(t):
        return t

    alpha_dot = -1.0
    sigma_dot = 1.0


@dataclass(frozen=True)
class SolverConfig:
    direction: str = "forward_01"
    nfe: int = 1
    method: str = "euler"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InvalidArgument(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.method not in METHODS:
            raise InvalidArgument(f"method must be one of {METHODS}, got {self.method!r}")
        if not isinstance(self.nfe, (int, np.integer)) or self.nfe < 1:
            raise InvalidArgument(f"nfe must be a positive integer, got {self.nfe!r}")

    @property
    def step(self):
        return (1.0 if self.direction == "forward_01" else -1.0) / self.nfe


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batches_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 1
    eval_nfe: int = 1

    def __post_init__(self):
        for name in ("epochs", "batches_per_epoch", "batch_size", "lr", "seed", "eval_nfe"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive, got {getattr(self, name)!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossCurve:
    train_loss: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)

    def rows(self):
        return [(k + 1, a, b) for k, (a, b) in enumerate(zip(self.train_loss, self.heldout_loss))]


@dataclass
class TrainResult:
    params: object
    curve: LossCurve
    adam: object
    rng_state: dict


def _check_pair(x0, x1):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise InvalidArgument(f"dimension mismatch: {x0.shape} vs {x1.shape}")
    return x0, x1


def interpolate(x0, x1, t):
    x0, x1 = _check_pair(x0, x1)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    if t.ndim == 1:
        t = t[:, None]
    return LinearSchedule.alpha(t) * x0 + LinearSchedule.sigma(t) * x1


def target_velocity(x0, x1):
    x0, x1 = _check_pair(x0, x1)
    return LinearSchedule.alpha_dot * x0 + LinearSchedule.sigma_dot * x1


def fm_loss(params, batch, rng, with_grad=True):
    """Monte-Carlo flow-matching loss on one batch; t ~ U[0,1] per row.

    Returns ``(loss, grads)``; grads is None when ``with_grad`` is false.
    """
    n = batch.x0.shape[0]
    if n == 0:
        raise InvalidArgument("empty batch")
    t = rng.random(n)
    x_t = interpolate(batch.x0, batch.x1, t)
    target = target_velocity(batch.x0, batch.x1)
    v, cache = net_forward(params, x_t, t)
    resid = v - target
    loss = float(np.mean(resid * resid))
    if not with_grad:
        return loss, None
    grads = net_backward(params, cache, 2.0 * resid / resid.shape[1])
    return loss, grads


def _heldout_loss(params, split, cfg, seed):
    part = "test" if len(split.test_contents) else "train"
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(HELDOUT_BATCHES):
        batch = sample_triplet_batch(split, cfg.batch_size, rng, part=part)
        total += fm_loss(params, batch, rng, with_grad=False)[0]
    return total / HELDOUT_BATCHES


def train(params, split, cfg, adam=None, rng_state=None, curve=None,
          checkpoint_path=None, progress=None, checkpoint_meta=None):
    """Run ``epochs x batches_per_epoch`` Adam steps on sampled triplets.

    Passing the ``adam``, ``rng_state`` and ``curve`` stored in a checkpoint
    resumes exactly where that run stopped.  ``checkpoint_meta`` is merged
    into the checkpoint's train_config block.
    """
    train_seed, heldout_seed = child_seeds(cfg.seed, 2)
    rng = np.random.default_rng(train_seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    adam = adam if adam is not None else init_adam(params)
    curve = curve if curve is not None else LossCurve()
    start_epoch = adam.step // cfg.batches_per_epoch
    last_good = None  # checkpoint written by this call, named in abort messages
    for epoch in range(start_epoch, cfg.epochs):
        losses = []
        for _ in range(cfg.batches_per_epoch):
            batch = sample_triplet_batch(split, cfg.batch_size, rng)
            try:
                loss, grads = fm_loss(params, batch, rng)
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                params, adam = adam_step(params, grads, adam, cfg.lr)
            except NumericError as exc:
                where = last_good or ("none written yet" if checkpoint_path else None)
                raise NumericError(f"epoch {epoch + 1}: {exc}", where) from None
            losses.append(loss)
        curve.train_loss.append(float(np.mean(losses)))
        curve.heldout_loss.append(_heldout_loss(params, split, cfg, heldout_seed))
        if checkpoint_path is not None:
            write_checkpoint(params, adam, params.arch,
                             {**cfg.to_dict(), **(checkpoint_meta or {})}, checkpoint_path,
                             rng_state=rng.bit_generator.state,
                             history={"train_loss": curve.train_loss,
                                      "heldout_loss": curve.heldout_loss})
            last_good = checkpoint_path
        if progress is not None:
            progress(epoch + 1, curve.train_loss[-1], curve.heldout_loss[-1])
    return TrainResult(params, curve, adam, rng.bit_generator.state)


def ode_solve(params, x, cfg):
    """Integrate dx/dt = v(x, t) over [0, 1] or [1, 0] with fixed steps."""
    x = np.array(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.out_dim:
        raise InvalidArgument(f"x must have shape (n, {params.arch.out_dim}), got {x.shape}")
    h = cfg.step
    forward = cfg.direction == "forward_01"
    for k in range(cfg.nfe):
        t = k / cfg.nfe if forward else 1.0 - k / cfg.nfe
        try:
            if cfg.method == "euler":
                x = x + h * net_forward(params, x, t)[0]
            else:
                x_mid = x + 0.5 * h * net_forward(params, x, t)[0]
                x = x + h * net_forward(params, x_mid, t + 0.5 * h)[0]
        except NumericError as exc:
            raise NumericError(f"ODE step {k}: {exc}") from None
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state at ODE step {k}")
    return x


def _as_rows(z, dim, name):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.ndim != 2 or z.shape[1] != dim:
        raise InvalidArgument(f"{name} must have {dim} entries, got shape {z.shape}")
    return z, single


def merge_forward(params, z_content_ref, z_style_ref, cfg=SolverConfig(), renormalize=False):
    """Merge a content reference and a style reference into one embedding.

    Accepts single vectors or row-aligned batches.
    """
    if cfg.direction != "forward_01":
        raise InvalidArgument("merge_forward needs a forward_01 solver config")
    dim = params.arch.embed_dim
    zc, single = _as_rows(z_content_ref, dim, "z_content_ref")
    zs, _ = _as_rows(z_style_ref, dim, "z_style_ref")
    if zc.shape != zs.shape:
        raise InvalidArgument(f"reference batches differ in shape: {zc.shape} vs {zs.shape}")
    norms = np.linalg.norm(np.concatenate([zc, zs]), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        warnings.warn("merge_forward inputs are not unit norm", stacklevel=2)
    y = ode_solve(params, np.concatenate([zc, zs], axis=1), cfg)
    out = 0.5 * (y[:, :dim] + y[:, dim:])
    if renormalize:
        out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if single else out


def disentangle_reverse(params, z_mix, cfg=SolverConfig("reverse_10")):
    """Split merged embeddings into (content half, style half)."""
    if cfg.direction != "reverse_10":
        raise InvalidArgument("disentangle_reverse needs a reverse_10 solver config")
    dim = params.arch.embed_dim
    z, single = _as_rows(z_mix, dim, "z_mix")
    x = ode_solve(params, np.concatenate([z, z], axis=1), cfg)
    zc, zs = x[:, :dim], x[:, dim:]
    return (zc[0], zs[0]) if single else (zc, zs)
