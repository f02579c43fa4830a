"""Synthetic content x style embedding grids.

Every content is rendered in every style (several noisy views per cell), so
asymmetric training triplets can always be drawn.  Grids are stored in the
SCF1 binary format, which doubles as the import path for embeddings produced
elsewhere.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateEmbedding, FormatError, InvalidArgument, InvalidState

GRID_MAGIC = b"SCF1"
GRID_VERSION = 1
NORM_TOL = 1e-6
IMPORT_NORM_TOL = 1e-4
PROVENANCES = ("synthetic", "imported")


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbedding("zero vector cannot be normalized")
    return x / norms


def child_seeds(seed, n):
    """Independent integer seeds derived from one user seed."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n)]


@dataclass(frozen=True)
class FactorSet:
    content_factors: np.ndarray
    style_factors: np.ndarray
    factor_dim: int
    seed: int

    @property
    def n_contents(self):
        return self.content_factors.shape[0]

    @property
    def n_styles(self):
        return self.style_factors.shape[0]


@dataclass(frozen=True)
class EntanglerParams:
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    C: np.ndarray
    D: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    seed: int

    @property
    def factor_dim(self):
        return self.A.shape[1]

    @property
    def hidden_dim(self):
        return self.A.shape[0]

    @property
    def embed_dim(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class EmbeddingGrid:
    """Complete tensor ``z[content, style, view, dim]`` of unit vectors."""

    z: np.ndarray
    noise_sigma: float = 0.0
    provenance: str = "synthetic"
    seed: int = 0
    content_ids: tuple = field(default=None)
    style_ids: tuple = field(default=None)

    def __post_init__(self):
        if self.z.ndim != 4:
            raise InvalidArgument(f"grid tensor must be 4-D, got shape {self.z.shape}")
        if self.content_ids is None:
            object.__setattr__(self, "content_ids", tuple(range(self.z.shape[0])))
        if self.style_ids is None:
            object.__setattr__(self, "style_ids", tuple(range(self.z.shape[1])))

    @property
    def n_contents(self):
        return self.z.shape[0]

    @property
    def n_styles(self):
        return self.z.shape[1]

    @property
    def n_views(self):
        return self.z.shape[2]

    @property
    def embed_dim(self):
        return self.z.shape[3]

    def manifest(self):
        return {
            "version": GRID_VERSION,
            "n_contents": self.n_contents,
            "n_styles": self.n_styles,
            "n_views": self.n_views,
            "embed_dim": self.embed_dim,
            "noise_sigma": float(self.noise_sigma),
            "provenance": self.provenance,
            "seed": int(self.seed),
        }


@dataclass(frozen=True)
class DatasetSplit:
    grid: EmbeddingGrid
    train_contents: np.ndarray
    test_contents: np.ndarray


@dataclass(frozen=True)
class TripletBatch:
    x0: np.ndarray
    x1: np.ndarray
    # columns: i, j, a, b, view of (i, a), view of (b, j), shared view of (i, j)
    indices: np.ndarray


def generate_factors(n_contents, n_styles, factor_dim, seed):
    if n_contents < 2:
        raise InvalidArgument(f"n_contents must be >= 2, got {n_contents}")
    if n_styles < 2:
        raise InvalidArgument(f"n_styles must be >= 2, got {n_styles}")
    if factor_dim < 2:
        raise InvalidArgument(f"factor_dim must be >= 2, got {factor_dim}")
    rng = np.random.default_rng(seed)
    content = _unit_rows(rng.standard_normal((n_contents, factor_dim)))
    style = _unit_rows(rng.standard_normal((n_styles, factor_dim)))
    return FactorSet(content, style, factor_dim, seed)


def make_entangler(factor_dim, hidden_dim, embed_dim, seed):
    """Random mixing network; each matrix is scaled by 1/sqrt(fan_in)."""
    if min(factor_dim, hidden_dim, embed_dim) < 1:
        raise InvalidArgument("entangler dimensions must be positive")
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    A = mat(hidden_dim, factor_dim)
    B = mat(hidden_dim, factor_dim)
    P = mat(factor_dim, factor_dim)
    C = mat(embed_dim, hidden_dim)
    D = mat(embed_dim, factor_dim)
    b1 = rng.standard_normal(hidden_dim) / np.sqrt(factor_dim)
    b2 = rng.standard_normal(embed_dim) / np.sqrt(hidden_dim)
    return EntanglerParams(A, B, P, C, D, b1, b2, seed)


def _entangle_raw(ent, c, s):
    # c, s: (..., factor_dim)
    h = np.tanh(c @ ent.A.T + s @ ent.B.T + ent.b1)
    bilinear = (c * (s @ ent.P.T)) @ ent.D.T
    return np.tanh(h @ ent.C.T + bilinear + ent.b2)


def entangle(entangler, c, s):
    """Mix one content factor and one style factor into a unit embedding."""
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    k = entangler.factor_dim
    if c.shape != (k,) or s.shape != (k,):
        raise InvalidArgument(
            f"factor vectors must have shape ({k},), got {c.shape} and {s.shape}")
    return _unit_rows(_entangle_raw(entangler, c, s))


def build_grid(factors, entangler, n_views, noise_sigma, seed):
    if n_views < 1:
        raise InvalidArgument(f"n_views must be >= 1, got {n_views}")
    if noise_sigma < 0:
        raise InvalidArgument(f"noise_sigma must be >= 0, got {noise_sigma}")
    if factors.factor_dim != entangler.factor_dim:
        raise InvalidArgument(
            f"factor_dim mismatch: factors {factors.factor_dim}, "
            f"entangler {entangler.factor_dim}")
    c = factors.content_factors[:, None, :]
    s = factors.style_factors[None, :, :]
    clean = _entangle_raw(entangler, np.broadcast_to(c, (factors.n_contents, factors.n_styles, c.shape[-1])),
                          np.broadcast_to(s, (factors.n_contents, factors.n_styles, s.shape[-1])))
    clean = _unit_rows(clean)
    rng = np.random.default_rng(seed)
    shape = clean.shape[:2] + (n_views, clean.shape[-1])
    noise = noise_sigma * rng.standard_normal(shape)
    z = _unit_rows(clean[:, :, None, :] + noise).astype(np.float32)
    return EmbeddingGrid(z, float(noise_sigma), "synthetic", seed)


def default_grid(n_contents=64, n_styles=12, n_views=8, factor_dim=16,
                 hidden_dim=128, embed_dim=64, noise_sigma=0.05, seed=1):
    """Factors, entangler and grid from a single seed."""
    s_fac, s_ent, s_noise = child_seeds(seed, 3)
    factors = generate_factors(n_contents, n_styles, factor_dim, s_fac)
    ent = make_entangler(factor_dim, hidden_dim, embed_dim, s_ent)
    grid = build_grid(factors, ent, n_views, noise_sigma, s_noise)
    return EmbeddingGrid(grid.z, grid.noise_sigma, "synthetic", seed)


def split_grid(grid, train_fraction, seed):
    if not 0 < train_fraction < 1:
        raise InvalidArgument(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = grid.n_contents
    if n < 2:
        raise InvalidArgument("need at least 2 contents to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return DatasetSplit(grid, np.sort(order[:n_train]), np.sort(order[n_train:]))


def sample_triplet_batch(split, batch_size, rng, part="train"):
    """Draw asymmetric triplets; ``rng`` (a numpy Generator) is advanced in place."""
    if batch_size < 1:
        raise InvalidArgument(f"batch_size must be >= 1, got {batch_size}")
    contents = split.train_contents if part == "train" else split.test_contents
    grid = split.grid
    if len(contents) == 0 or grid.n_styles == 0:
        raise InvalidState(f"split has no {part} contents to sample from")
    i = contents[rng.integers(len(contents), size=batch_size)]
    b = contents[rng.integers(len(contents), size=batch_size)]
    j = rng.integers(grid.n_styles, size=batch_size)
    a = rng.integers(grid.n_styles, size=batch_size)
    views = rng.integers(grid.n_views, size=(3, batch_size))
    z = grid.z
    x0 = np.concatenate([z[i, a, views[0]], z[b, j, views[1]]], axis=1)
    target = z[i, j, views[2]]
    x1 = np.concatenate([target, target], axis=1)
    idx = np.stack([i, j, a, b, views[0], views[1], views[2]], axis=1)
    return TripletBatch(x0.astype(np.float64), x1.astype(np.float64), idx)


def write_grid(grid, path):
    z = np.ascontiguousarray(grid.z, dtype="<f4")
    manifest = json.dumps(grid.manifest(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(z.tobytes())


def _read_header(buf, magic, what):
    if len(buf) < 8:
        raise FormatError(f"file too short for a {what} header", "magic")
    if buf[:4] != magic:
        raise FormatError(f"expected {magic!r}, found {bytes(buf[:4])!r}", "magic")
    (mlen,) = struct.unpack("<I", buf[4:8])
    if 8 + mlen > len(buf):
        raise FormatError(f"manifest length {mlen} exceeds file size", "manifest_length")
    try:
        manifest = json.loads(bytes(buf[8:8 + mlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON ({exc})", "manifest") from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object", "manifest")
    return manifest, 8 + mlen


def read_grid(path):
    buf = Path(path).read_bytes()
    manifest, offset = _read_header(buf, GRID_MAGIC, "grid")
    dims = {}
    for key in ("n_contents", "n_styles", "n_views", "embed_dim"):
        val = manifest.get(key)
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise FormatError(f"expected a positive integer, got {val!r}", key)
        dims[key] = val
    if manifest.get("version") != GRID_VERSION:
        raise FormatError(f"unsupported version {manifest.get('version')!r}", "version")
    provenance = manifest.get("provenance")
    if provenance not in PROVENANCES:
        raise FormatError(f"unknown provenance {provenance!r}", "provenance")
    sigma = manifest.get("noise_sigma", 0.0)
    if not isinstance(sigma, (int, float)) or sigma < 0:
        raise FormatError(f"invalid noise_sigma {sigma!r}", "noise_sigma")
    shape = (dims["n_contents"], dims["n_styles"], dims["n_views"], dims["embed_dim"])
    expected = int(np.prod(shape)) * 4
    payload = len(buf) - offset
    if payload != expected:
        kind = "truncated" if payload < expected else "oversized"
        raise FormatError(
            f"{kind} payload: manifest shape n_contents={shape[0]}, n_styles={shape[1]}, "
            f"n_views={shape[2]}, embed_dim={shape[3]} needs {expected} bytes, found {payload}",
            "payload")
    z = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(z)):
        cell = tuple(int(x) for x in np.argwhere(~np.isfinite(z))[0][:3])
        raise FormatError(f"non-finite value in cell {cell}", "payload")
    norms = np.linalg.norm(z.astype(np.float64), axis=-1)
    bad = np.abs(norms - 1.0) > IMPORT_NORM_TOL
    if np.any(bad):
        cell = tuple(int(x) for x in np.argwhere(bad)[0])
        raise FormatError(
            f"embedding at cell (content, style, view) = {cell} has norm "
            f"{norms[cell]:.6g}, expected 1", "payload")
    return EmbeddingGrid(z, float(sigma), provenance, int(manifest.get("seed", 0)))
