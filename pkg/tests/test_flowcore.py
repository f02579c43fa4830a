import math

import numpy as np
import pytest

from helpers import constant_field_net, negative_identity_net, random_net
from mergeflow.errors import InvalidArgument, NumericError
from mergeflow.flowcore import (LossCurve, SolverConfig, TrainConfig, disentangle_reverse, fm_loss,
                                interpolate, merge_forward, ode_solve, target_velocity, train)
from mergeflow.flownet import NetArch, init_velocity_net, net_forward, read_checkpoint
from mergeflow.synthgen import TripletBatch, default_grid, sample_triplet_batch, split_grid

ARCH = NetArch(8, (16, 16), 4)


@pytest.fixture(scope="module")
def small_split():
    grid = default_grid(n_contents=10, n_styles=4, n_views=2, embed_dim=8, seed=3)
    return split_grid(grid, 0.7, 3)


def test_interpolate_boundaries():
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal(6), rng.standard_normal(6)
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    assert np.array_equal(interpolate([1, 0], [0, 1], 0.5), [0.5, 0.5])
    with pytest.raises(InvalidArgument):
        interpolate(x0, x1[:5], 0.5)
    with pytest.raises(InvalidArgument):
        interpolate(x0, x1, 1.2)


def test_target_velocity():
    x = np.array([0.3, -0.2])
    assert np.array_equal(target_velocity(x, x), [0.0, 0.0])
    assert np.array_equal(target_velocity([1, 0], [0, 1]), [-1.0, 1.0])
    # constant in t: the linear schedule's derivatives do not depend on t
    x0, x1 = np.array([0.1, 0.7]), np.array([-0.4, 0.2])
    eps = 1e-6
    for t in (0.2, 0.9):
        fd = (interpolate(x0, x1, t + eps) - interpolate(x0, x1, t - eps)) / (2 * eps)
        assert np.allclose(fd, target_velocity(x0, x1), atol=1e-9)


def _batch(x0, x1):
    return TripletBatch(np.asarray(x0, float), np.asarray(x1, float), np.zeros((len(x0), 7), int))


def test_fm_loss_zero_net():
    p = init_velocity_net(ARCH, 0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 16))
    loss, grads = fm_loss(p, _batch(x, x), np.random.default_rng(1))
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.tensors())
    x1 = rng.standard_normal((5, 16))
    loss, _ = fm_loss(p, _batch(x, x1), np.random.default_rng(1))
    assert loss == pytest.approx(np.mean((x1 - x) ** 2), rel=1e-14)


def test_fm_loss_matches_recomputation():
    p = random_net(ARCH, 2)
    rng = np.random.default_rng(5)
    x0, x1 = rng.standard_normal((6, 16)), rng.standard_normal((6, 16))
    loss, _ = fm_loss(p, _batch(x0, x1), np.random.default_rng(9))
    t = np.random.default_rng(9).random(6)
    total = 0.0
    for r in range(6):
        xt = (1 - t[r]) * x0[r] + t[r] * x1[r]
        v = net_forward(p, xt[None, :], np.array([t[r]]))[0][0]
        total += sum((v[c] - (x1[r, c] - x0[r, c])) ** 2 for c in range(16))
    assert loss == pytest.approx(total / (6 * 16), rel=1e-12)


def test_train_single_step(small_split):
    p = init_velocity_net(ARCH, 0)
    res = train(p, small_split, TrainConfig(1, 1, 8, 1e-3, 1))
    assert res.adam.step == 1
    assert len(res.curve.train_loss) == len(res.curve.heldout_loss) == 1


def test_train_config_positive():
    with pytest.raises(InvalidArgument):
        TrainConfig(epochs=0)


def test_train_deterministic(small_split):
    cfg = TrainConfig(2, 10, 16, 1e-3, 4)
    a = train(init_velocity_net(ARCH, 0), small_split, cfg)
    b = train(init_velocity_net(ARCH, 0), small_split, cfg)
    assert a.curve.train_loss == b.curve.train_loss
    assert a.curve.heldout_loss == b.curve.heldout_loss
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params.tensors(), b.params.tensors()))


def test_train_reduces_loss(small_split):
    batch = sample_triplet_batch(small_split, 5000, np.random.default_rng(0))
    initial = fm_loss(init_velocity_net(ARCH, 0), batch, np.random.default_rng(1), False)[0]
    assert initial == pytest.approx(np.mean((batch.x1 - batch.x0) ** 2), rel=1e-12)
    res = train(init_velocity_net(ARCH, 0), small_split, TrainConfig(8, 50, 32, 3e-3, 1))
    assert res.curve.train_loss[-1] < 0.5 * initial


def test_resume_matches_uninterrupted(small_split, tmp_path):
    full = train(init_velocity_net(ARCH, 0), small_split, TrainConfig(4, 5, 16, 1e-3, 2))
    path = tmp_path / "half.sck"
    train(init_velocity_net(ARCH, 0), small_split, TrainConfig(2, 5, 16, 1e-3, 2),
          checkpoint_path=path)
    ck = read_checkpoint(path)
    resumed = train(ck.params, small_split, TrainConfig(4, 5, 16, 1e-3, 2), adam=ck.adam,
                    rng_state=ck.rng_state,
                    curve=LossCurve(ck.history["train_loss"], ck.history["heldout_loss"]))
    assert resumed.curve.train_loss == full.curve.train_loss
    assert resumed.curve.heldout_loss == full.curve.heldout_loss
    assert all(x.tobytes() == y.tobytes()
               for x, y in zip(full.params.tensors(), resumed.params.tensors()))


def test_train_numeric_abort(small_split, tmp_path):
    p = init_velocity_net(ARCH, 0)
    p.weights[0][0, 0] = np.inf
    with pytest.raises(NumericError, match="none written yet"):
        train(p, small_split, TrainConfig(1, 2, 8, 1e-3, 1), checkpoint_path=tmp_path / "x.sck")


def test_train_abort_names_last_checkpoint(small_split, tmp_path, monkeypatch):
    from mergeflow import flowcore
    calls = {"n": 0}
    real = flowcore.fm_loss

    def flaky(*args, **kw):
        if kw.get("with_grad", True):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NumericError("injected")
        return real(*args, **kw)

    monkeypatch.setattr(flowcore, "fm_loss", flaky)
    path = tmp_path / "x.sck"
    with pytest.raises(NumericError, match=f"epoch 2: injected.*{path.name}") as err:
        train(init_velocity_net(ARCH, 0), small_split, TrainConfig(3, 2, 8, 1e-3, 1),
              checkpoint_path=path)
    assert err.value.checkpoint == path
    assert read_checkpoint(path).adam.step == 2


def test_adam_overflow_detected(small_split):
    p = init_velocity_net(ARCH, 0)
    p.weights[0][0, 0] = np.float32(1e38)
    with pytest.raises(NumericError):
        train(p, small_split, TrainConfig(1, 2, 8, 1e-3, 1))


# ---------------------------------------------------------------- ODE

@pytest.mark.parametrize("nfe", [1, 3, 10])
def test_constant_field_exact(nfe):
    k = np.linspace(-0.5, 0.5, 8)
    p = constant_field_net(4, k)
    x0 = np.random.default_rng(0).standard_normal((3, 8))
    out = ode_solve(p, x0, SolverConfig("forward_01", nfe))
    assert np.allclose(out, x0 + k, rtol=0, atol=1e-14)


@pytest.mark.parametrize("nfe", [1, 7, 64])
@pytest.mark.parametrize("direction", ["forward_01", "reverse_10"])
@pytest.mark.parametrize("method", ["euler", "midpoint"])
def test_zero_net_identity_flow(nfe, direction, method):
    p = init_velocity_net(ARCH, 1)
    x = np.random.default_rng(nfe).standard_normal((4, 16))
    assert np.array_equal(ode_solve(p, x, SolverConfig(direction, nfe, method)), x)


def test_linear_decay_oracle():
    p = negative_identity_net(3)
    x = np.random.default_rng(0).standard_normal((2, 6))
    assert np.allclose(ode_solve(p, x, SolverConfig("forward_01", 1)), 0.0, atol=1e-12)
    exact = x * math.exp(-1)
    errs = {}
    for nfe in [4, 8, 16, 32, 64, 128, 256, 512]:
        eu = ode_solve(p, x, SolverConfig("forward_01", nfe, "euler"))
        mid = ode_solve(p, x, SolverConfig("forward_01", nfe, "midpoint"))
        errs[nfe] = np.abs(eu - exact).max()
        assert np.abs(mid - exact).max() < errs[nfe]
        # Euler on v = -x is exact geometric decay
        assert np.allclose(eu, x * (1 - 1 / nfe) ** nfe, rtol=1e-12)
    vals = list(errs.values())
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert np.max(np.abs(ode_solve(p, x, SolverConfig("forward_01", 512)) / exact - 1)) < 0.01


def test_solver_config_validation():
    with pytest.raises(InvalidArgument):
        SolverConfig("sideways", 1)
    with pytest.raises(InvalidArgument):
        SolverConfig("forward_01", 0)
    with pytest.raises(InvalidArgument):
        SolverConfig("forward_01", 1, "rk4")
    assert SolverConfig("reverse_10", 4).step == -0.25


def test_ode_solve_nonfinite():
    p = constant_field_net(1, [np.inf, 0.0])
    with pytest.raises(NumericError, match="step 0"):
        ode_solve(p, np.zeros((1, 2)), SolverConfig("forward_01", 2))


# ---------------------------------------------------------------- inference ops

def test_merge_forward_zero_net_is_mean():
    p = init_velocity_net(ARCH, 0)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(8), rng.standard_normal(8)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    assert np.allclose(merge_forward(p, a, b), (a + b) / 2, rtol=0, atol=0)


def test_merge_forward_single_step_formula():
    p = random_net(ARCH, 3)
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(8), rng.standard_normal(8)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    x0 = np.concatenate([a, b])[None, :]
    y = x0 + net_forward(p, x0, 0.0)[0]
    expected = (y[0, :8] + y[0, 8:]) / 2
    assert np.allclose(merge_forward(p, a, b, SolverConfig("forward_01", 1)), expected, atol=1e-15)


def test_merge_forward_batch_and_renormalize():
    p = random_net(ARCH, 3)
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 8))
    b = rng.standard_normal((5, 8))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    out = merge_forward(p, a, b, renormalize=True)
    assert out.shape == (5, 8)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0)
    assert np.allclose(out[2] * np.linalg.norm(merge_forward(p, a[2], b[2])),
                       merge_forward(p, a[2], b[2]))


def test_merge_warns_on_non_unit_inputs():
    p = init_velocity_net(ARCH, 0)
    with pytest.warns(UserWarning):
        merge_forward(p, np.ones(8), np.ones(8))


def test_direction_mismatch():
    p = init_velocity_net(ARCH, 0)
    z = np.eye(8)[0]
    with pytest.raises(InvalidArgument):
        merge_forward(p, z, z, SolverConfig("reverse_10", 1))
    with pytest.raises(InvalidArgument):
        disentangle_reverse(p, z, SolverConfig("forward_01", 1))
    with pytest.raises(InvalidArgument):
        disentangle_reverse(p, np.ones(7), SolverConfig("reverse_10", 1))


def test_disentangle_zero_net_returns_input():
    p = init_velocity_net(ARCH, 0)
    z = np.random.default_rng(2).standard_normal(8)
    zc, zs = disentangle_reverse(p, z)
    assert np.array_equal(zc, z) and np.array_equal(zs, z)
