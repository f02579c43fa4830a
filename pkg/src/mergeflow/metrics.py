"""Representation-quality metrics and the full evaluation battery."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import InvalidArgument
from .flowcore import SolverConfig, disentangle_reverse, merge_forward
from .synthgen import child_seeds

REPORT_KEYS = (
    "style_nmi", "content_nmi", "style_nmi_raw", "content_nmi_raw",
    "style_fdr", "content_fdr", "knn_acc@1", "knn_acc@5", "knn_acc@10",
    "recall@1", "recall@10", "merge_retrieval_top1", "equidistance_cv",
    "roundtrip_cosine_median",
)


@dataclass(frozen=True)
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        labels = np.asarray(self.labels)
        if pts.shape[0] != labels.shape[0]:
            raise InvalidArgument(f"{pts.shape[0]} points but {labels.shape[0]} labels")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)


@dataclass
class ClusterAssignment:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_trace: list = field(default_factory=list)


# ---------------------------------------------------------------- k-means

def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), centers)
            idx = int(free[rng.integers(len(free))])
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return x[centers].copy()


def _lloyd(x, k, max_iter, tol, rng):
    centroids = _kmeans_pp(x, k, rng)
    trace = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        trace.append(float(d[np.arange(len(x)), assign].sum()))
        new = np.empty_like(centroids)
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(0)
            else:
                # reseed from the point worst served by its current centroid
                far = int(d[np.arange(len(x)), assign].argmax())
                new[c] = x[far]
                assign[far] = c
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    assign = _sq_dists(x, centroids).argmin(1)
    inertia = float(((x - centroids[assign]) ** 2).sum())
    trace.append(inertia)
    return ClusterAssignment(assign, centroids, inertia, n_iter, trace)


def kmeans(points, k, restarts=10, max_iter=300, tol=1e-6, seed=0):
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidArgument(f"k must lie in [1, {n}], got {k}")
    if restarts < 1:
        raise InvalidArgument(f"restarts must be >= 1, got {restarts}")
    best = None
    for s in child_seeds(seed, restarts):
        run = _lloyd(x, k, max_iter, tol, np.random.default_rng(s))
        if best is None or run.inertia < best.inertia:
            best = run
    return best


# ---------------------------------------------------------------- label metrics

def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b):
    """Normalized mutual information with arithmetic-mean normalization."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgument(f"label arrays must be 1-D and equal length, got {a.shape}, {b.shape}")
    if a.size == 0:
        raise InvalidArgument("label arrays are empty")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    h_a = _entropy(table.sum(1))
    h_b = _entropy(table.sum(0))
    if h_a == 0 and h_b == 0:
        return 1.0
    if h_a == 0 or h_b == 0:
        return 0.0
    p = table / a.size
    outer = p.sum(1)[:, None] * p.sum(0)[None, :]
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / outer[nz])).sum())
    return float(np.clip(2.0 * mi / (h_a + h_b), 0.0, 1.0))


def fdr(points, labels):
    """Trace Fisher ratio (S_B / (K-1)) / (S_W / (N-K)); +inf when S_W is 0."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    classes = np.unique(labels)
    K, N = len(classes), x.shape[0]
    if K < 2:
        raise InvalidArgument("fdr needs at least 2 classes")
    if N <= K:
        raise InvalidArgument("fdr needs more points than classes")
    mu = x.mean(0)
    s_b = s_w = 0.0
    for c in classes:
        xc = x[labels == c]
        mc = xc.mean(0)
        s_b += len(xc) * float(((mc - mu) ** 2).sum())
        s_w += float(((xc - mc) ** 2).sum())
    if s_w == 0:
        return float("inf")
    return (s_b / (K - 1)) / (s_w / (N - K))


# ---------------------------------------------------------------- neighbours

def _unit(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidArgument("cosine distance is undefined for zero vectors")
    return x / norms


def cosine_distances(a, b):
    return 1.0 - _unit(a) @ _unit(b).T


@dataclass
class KnnResult:
    labels: np.ndarray

    def accuracy(self, true_labels):
        return float(np.mean(self.labels == np.asarray(true_labels)))


def knn_classify(train, queries, k):
    """Majority vote among the k cosine-nearest training points.

    Vote ties go to the class with the smaller summed distance, then the
    lower class id.
    """
    n_train = train.points.shape[0]
    if k < 1 or k > n_train:
        raise InvalidArgument(f"k must lie in [1, {n_train}], got {k}")
    d = cosine_distances(queries, train.points)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    preds = []
    for row, nbrs in enumerate(order):
        votes = {}
        for idx in nbrs:
            lab = train.labels[idx].item()
            cnt, dist = votes.get(lab, (0, 0.0))
            votes[lab] = (cnt + 1, dist + d[row, idx])
        preds.append(min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], lab)))
    return KnnResult(np.asarray(preds))


def recall_at_k(queries, gallery, k):
    """Fraction of queries with a same-label item among the k nearest gallery items."""
    n_gal = gallery.points.shape[0]
    if n_gal == 0:
        raise InvalidArgument("gallery is empty")
    if k < 1 or k > n_gal:
        raise InvalidArgument(f"k must lie in [1, {n_gal}], got {k}")
    d = cosine_distances(queries.points, gallery.points)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    hits = (gallery.labels[order] == queries.labels[:, None]).any(1)
    return float(hits.mean())


# ---------------------------------------------------------------- probes

@dataclass
class InterpProbe:
    path: np.ndarray
    sim_a: np.ndarray
    sim_b: np.ndarray
    monotonicity_violations: int
    max_second_diff: float


def interp_probe(z_a, z_b, steps=11, tol=1e-12):
    """Walk the straight line from z_a to z_b and track cosine to both ends."""
    if steps < 3:
        raise InvalidArgument(f"steps must be >= 3, got {steps}")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if np.linalg.norm(z_a) == 0 or np.linalg.norm(z_b) == 0:
        raise InvalidArgument("interpolation endpoints must be non-zero")
    lam = np.linspace(0.0, 1.0, steps)[:, None]
    path = (1.0 - lam) * z_a + lam * z_b
    if np.any(np.linalg.norm(path, axis=1) == 0):
        raise InvalidArgument("interpolation path passes through the origin")
    sim_a = 1.0 - cosine_distances(path, z_a)[:, 0]
    sim_b = 1.0 - cosine_distances(path, z_b)[:, 0]
    sim_a[0] = 1.0
    sim_b[-1] = 1.0
    violations = int((np.diff(sim_a) > tol).sum() + (np.diff(sim_b) < -tol).sum())
    second = np.concatenate([np.diff(sim_a, 2), np.diff(sim_b, 2)])
    return InterpProbe(path, sim_a, sim_b, violations, float(np.abs(second).max()))


def equidistance_cv(content_halves, style_centroids):
    """Mean over vectors of std/mean of their distances to every centroid."""
    x = np.atleast_2d(np.asarray(content_halves, dtype=np.float64))
    c = np.atleast_2d(np.asarray(style_centroids, dtype=np.float64))
    if c.shape[0] < 2:
        raise InvalidArgument("need at least 2 style centroids")
    d = np.sqrt(_sq_dists(x, c))
    mean = d.mean(1)
    if np.any(mean == 0):
        return float("inf")
    return float((d.std(1) / mean).mean())


def pca_2d(x):
    """Project rows onto their top two principal axes (sign fixed per axis)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    flip = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    return xc @ (axes * flip[:, None]).T


# ---------------------------------------------------------------- battery

@dataclass(frozen=True)
class EvalConfig:
    nfe: int = 1
    method: str = "euler"
    roundtrip_nfe: int = 64
    knn_ks: tuple = (1, 5, 10)
    recall_ks: tuple = (1, 10)
    knn_ref_fraction: float = 0.1
    recall_query_fraction: float = 0.2
    recall_splits: int = 5
    merge_triplets: int = 1000
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 1

    def to_dict(self):
        d = asdict(self)
        d["knn_ks"] = list(self.knn_ks)
        d["recall_ks"] = list(self.recall_ks)
        return d


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    nfe: int
    metrics: dict
    timestamp: str = ""
    # in-memory only: raw-space baselines and sweeps that are not part of the JSON schema
    diagnostics: dict = field(default_factory=dict, compare=False)

    def to_json(self):
        body = {"config_hash": self.config_hash, "seed": self.seed, "nfe": self.nfe,
                "metrics": self.metrics, "timestamp": self.timestamp}
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["config_hash"], d["seed"], d["nfe"], d["metrics"], d.get("timestamp", ""))


def _r9(x):
    return float(f"{x:.9g}")


def config_hash(payload):
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _stratified_pick(labels, fraction, rng):
    """Boolean mask selecting round(fraction * n_c) (at least 1) items per label."""
    mask = np.zeros(len(labels), dtype=bool)
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        m = min(max(int(round(fraction * len(idx))), 1), len(idx) - 1) if len(idx) > 1 else 1
        mask[rng.choice(idx, size=m, replace=False)] = True
    return mask


def _test_cells(split):
    z = split.grid.z[split.test_contents].astype(np.float64)
    nc, ns, nv, d = z.shape
    content = np.repeat(split.test_contents, ns * nv)
    style = np.tile(np.repeat(np.arange(ns), nv), nc)
    return z, z.reshape(-1, d), content, style


def class_means(points, labels):
    classes = np.unique(labels)
    return classes, np.stack([points[labels == c].mean(0) for c in classes])


def roundtrip_cosines(params, z, nfe, method="euler"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        zc, zs = disentangle_reverse(params, z, SolverConfig("reverse_10", nfe, method))
        back = merge_forward(params, zc, zs, SolverConfig("forward_01", nfe, method))
    return (_unit(back) * _unit(z)).sum(1)


def merge_retrieval_top1(params, split, n_triplets, rng, solver):
    z, _, _, _ = _test_cells(split)
    nc, ns, nv, d = z.shape
    i = rng.integers(nc, size=n_triplets)
    b = rng.integers(nc, size=n_triplets)
    j = rng.integers(ns, size=n_triplets)
    a = rng.integers(ns, size=n_triplets)
    v = rng.integers(nv, size=(2, n_triplets))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        merged = merge_forward(params, z[i, a, v[0]], z[b, j, v[1]], solver)
    cell_means = z.mean(2).reshape(nc * ns, d)
    nearest = cosine_distances(merged, cell_means).argmin(1)
    return float(np.mean(nearest == i * ns + j))


def evaluate_model(params, split, cfg=EvalConfig(), extra_hash=None):
    """Run the full metric battery on the test contents of ``split``."""
    if len(split.test_contents) == 0:
        raise InvalidArgument("evaluation needs a non-empty test split")
    km_seed, knn_seed, rec_seed, merge_seed = child_seeds(cfg.seed, 4)
    solver = SolverConfig("reverse_10", cfg.nfe, cfg.method)
    _, raw, content, style = _test_cells(split)
    zc, zs = disentangle_reverse(params, raw, solver)
    n_styles = len(np.unique(style))
    n_contents = len(np.unique(content))

    def cluster_nmi(x, labels, k):
        fit = kmeans(x, k, cfg.restarts, cfg.max_iter, cfg.tol, km_seed)
        return nmi(labels, fit.assignment)

    m = {
        "style_nmi": cluster_nmi(zs, style, n_styles),
        "content_nmi": cluster_nmi(zc, content, n_contents),
        "style_nmi_raw": cluster_nmi(raw, style, n_styles),
        "content_nmi_raw": cluster_nmi(raw, content, n_contents),
        "style_fdr": fdr(zs, style),
        "content_fdr": fdr(zc, content),
    }

    ref = _stratified_pick(content, cfg.knn_ref_fraction, np.random.default_rng(knn_seed))
    refs = LabeledPoints(zc[ref], content[ref])
    for k in cfg.knn_ks:
        m[f"knn_acc@{k}"] = knn_classify(refs, zc[~ref], k).accuracy(content[~ref])

    rec_rngs = [np.random.default_rng(s) for s in child_seeds(rec_seed, cfg.recall_splits)]
    masks = [_stratified_pick(style, cfg.recall_query_fraction, r) for r in rec_rngs]
    for k in cfg.recall_ks:
        vals = [recall_at_k(LabeledPoints(zs[q], style[q]), LabeledPoints(zs[~q], style[~q]), k)
                for q in masks]
        m[f"recall@{k}"] = float(np.mean(vals))

    fwd = SolverConfig("forward_01", cfg.nfe, cfg.method)
    m["merge_retrieval_top1"] = merge_retrieval_top1(
        params, split, cfg.merge_triplets, np.random.default_rng(merge_seed), fwd)

    _, style_centroids = class_means(zs, style)
    m["equidistance_cv"] = equidistance_cv(zc, style_centroids)
    m["roundtrip_cosine_median"] = float(np.median(
        roundtrip_cosines(params, raw, cfg.roundtrip_nfe, cfg.method)))

    _, raw_centroids = class_means(raw, style)
    diagnostics = {
        "style_fdr_raw": fdr(raw, style),
        "content_fdr_raw": fdr(raw, content),
        "equidistance_cv_raw": equidistance_cv(raw, raw_centroids),
    }
    metrics = {k: _r9(v) for k, v in m.items()}
    payload = {"eval": cfg.to_dict(), "arch": params.arch.to_dict(),
               "grid": split.grid.manifest(), "test_contents": split.test_contents.tolist(),
               "extra": extra_hash}
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return EvalReport(config_hash(payload), cfg.seed, cfg.nfe, metrics, stamp, diagnostics)


def roundtrip_error_sweep(params, split, nfes=(1, 4, 16, 64), method="euler"):
    """Median (1 - cosine) of reverse-then-forward reconstruction per nfe."""
    _, raw, _, _ = _test_cells(split)
    return {n: float(np.median(1.0 - roundtrip_cosines(params, raw, n, method))) for n in nfes}


def scatter_rows(params, split, nfe=1, method="euler"):
    """PCA-2D coordinates for raw embeddings and both disentangled halves."""
    _, raw, content, style = _test_cells(split)
    zc, zs = disentangle_reverse(params, raw, SolverConfig("reverse_10", nfe, method))
    rows = []
    for space, x in (("raw", raw), ("content_half", zc), ("style_half", zs)):
        xy = pca_2d(x)
        rows.extend((float(p[0]), float(p[1]), int(c), int(s), space)
                    for p, c, s in zip(xy, content, style))
    return rows
