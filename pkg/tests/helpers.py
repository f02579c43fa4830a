"""Hand-built networks and small fixtures shared by the test modules."""
import itertools

import numpy as np

from mergeflow.flownet import (NetArch, VelocityNetParams, init_velocity_net, net_backward,
                               net_forward)
from mergeflow.metrics import cosine_distances


def random_net(arch, seed, scale=1.0):
    """Every weight and bias random, including the (normally zero) output layer."""
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal((fi, fo)) * scale / np.sqrt(fi) for fi, fo in arch.layer_dims]
    bs = [rng.standard_normal(fo) * 0.1 for _, fo in arch.layer_dims]
    return VelocityNetParams(arch, ws, bs)


def constant_field_net(embed_dim, k):
    """v(x, t) = k via a single zero-weight hidden layer and output bias k."""
    arch = NetArch(embed_dim, (1,), 2)
    p = init_velocity_net(arch, 0, dtype=np.float64)
    ws = [np.zeros_like(w) for w in p.weights]
    bs = [np.zeros(1), np.asarray(k, dtype=np.float64)]
    return VelocityNetParams(arch, ws, bs)


def negative_identity_net(embed_dim):
    """v(x, t) = -x, using silu(a) - silu(-a) = a."""
    n = 2 * embed_dim
    arch = NetArch(embed_dim, (2 * n,), 2)
    w1 = np.zeros((arch.in_dim, 2 * n))
    w1[:n, :n] = np.eye(n)
    w1[:n, n:] = -np.eye(n)
    w2 = np.vstack([-np.eye(n), np.eye(n)])
    return VelocityNetParams(arch, [w1, w2], [np.zeros(2 * n), np.zeros(n)])


def fd_gradient_errors(params, x, t, target, step=1e-5):
    """Relative errors of analytic vs central-difference gradients (|g| > 1e-8)."""
    def loss(p):
        v, _ = net_forward(p, x, t)
        r = v - target
        return float(np.mean(r * r))

    v, cache = net_forward(params, x, t)
    grads = net_backward(params, cache, 2.0 * (v - target) / v.shape[1])
    errors = []
    for tensor, g in zip(params.tensors(), grads.tensors()):
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + step
            up = loss(params)
            tensor[idx] = old - step
            down = loss(params)
            tensor[idx] = old
            fd = (up - down) / (2 * step)
            if abs(g[idx]) > 1e-8:
                errors.append(abs(g[idx] - fd) / max(abs(g[idx]), abs(fd)))
    return np.array(errors)


def brute_knn(train, q, k):
    """Vote over the k-subset with the smallest summed cosine distance."""
    d = cosine_distances(q[None, :], train.points)[0]
    best = min(itertools.combinations(range(len(d)), k), key=lambda s: sum(d[i] for i in s))
    tally = {}
    for i in best:
        lab = int(train.labels[i])
        c, s = tally.get(lab, (0, 0.0))
        tally[lab] = (c + 1, s + d[i])
    top = max(c for c, _ in tally.values())
    tied = [lab for lab, (c, _) in tally.items() if c == top]
    low = min(tally[lab][1] for lab in tied)
    return min(lab for lab in tied if tally[lab][1] <= low + 1e-12)


def brute_recall(queries, gallery, k):
    """Hit iff fewer than k gallery items beat the closest same-label item."""
    d = cosine_distances(queries.points, gallery.points)
    hits = 0
    for r, lab in enumerate(queries.labels):
        same = d[r][gallery.labels == lab]
        if same.size and (d[r] < same.min()).sum() < k:
            hits += 1
    return hits / len(queries.labels)
