import math

import numpy as np

from budgetgs.backward import GaussianGrads
from budgetgs.core import GaussianSet, OpacityMode
from budgetgs.optim import AdamState, LearningRates, exponential_lr, switch_to_high_opacity


def _model(rng, n=3):
    return GaussianSet.from_points(rng.standard_normal((n, 3)), rng.random((n, 3)))


def _grads(rng, n, scale=1.0):
    g = GaussianGrads.zeros(n)
    for name in GaussianSet.PARAMS:
        setattr(g, name, scale * rng.standard_normal(getattr(g, name).shape))
    return g


def adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-15):
    # textbook Adam on one scalar, written out independently
    x, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_exponential_lr():
    assert math.isclose(exponential_lr(0, 1e-2, 1e-4, 100), 1e-2)
    assert math.isclose(exponential_lr(100, 1e-2, 1e-4, 100), 1e-4)
    assert math.isclose(exponential_lr(50, 1e-2, 1e-4, 100), 1e-3)
    assert math.isclose(exponential_lr(500, 1e-2, 1e-4, 100), 1e-4)


def test_adam_matches_scalar_oracle(rng):
    g = _model(rng, 1)
    opt = AdamState.create(g, LearningRates(), 1.0, 100, sh_batch_interval=1)
    start = g.sh_dc[0, 0]
    seq = [0.3, -0.1, 0.7, 0.2]
    for it, v in enumerate(seq, 1):
        grads = GaussianGrads.zeros(1)
        grads.sh_dc[0, 0] = v
        opt.step(g, grads, it)
    assert math.isclose(g.sh_dc[0, 0] - start, adam_oracle(seq, 2.5e-3), rel_tol=1e-12)


def test_learning_rates_per_group(rng):
    g = _model(rng, 2)
    before = g.copy()
    opt = AdamState.create(g, LearningRates(), scene_extent=2.0, total_iterations=10, sh_batch_interval=1)
    grads = _grads(rng, 2)
    grads.rotations[:] = 0
    opt.step(g, grads, 1)
    # first Adam step moves each coordinate by lr * sign(grad)
    lr_pos = exponential_lr(1, 1.6e-4 * 2, 1.6e-6 * 2, 10)
    assert np.allclose(before.positions - g.positions, lr_pos * np.sign(grads.positions))
    assert np.allclose(before.log_scales - g.log_scales, 5e-3 * np.sign(grads.log_scales))
    assert np.allclose(before.raw_opacities - g.raw_opacities, 0.025 * np.sign(grads.raw_opacities))
    assert np.allclose(before.sh_rest - g.sh_rest, 1e-3 * np.sign(grads.sh_rest))


def test_rotations_stay_normalized(rng):
    g = _model(rng, 4)
    opt = AdamState.create(g)
    for it in range(1, 5):
        opt.step(g, _grads(rng, 4), it)
    assert np.allclose(np.linalg.norm(g.rotations, axis=1), 1.0)


def test_sh_rest_batching_cadence(rng):
    for interval, expected in ((16, 10), (1, 160)):
        g = _model(rng, 2)
        opt = AdamState.create(g, sh_batch_interval=interval)
        for it in range(1, 161):
            opt.step(g, _grads(rng, 2), it)
        counts = opt.step_counts()
        assert counts["sh_rest"] == expected
        assert counts["positions"] == 160


def test_sh_rest_batch_uses_mean_gradient(rng):
    g = _model(rng, 1)
    start = g.sh_rest.copy()
    opt = AdamState.create(g, sh_batch_interval=4, reduction="mean")
    seq = [0.4, -0.2, 0.1, 0.5]
    for it, v in enumerate(seq, 1):
        grads = GaussianGrads.zeros(1)
        grads.sh_rest[:] = v
        opt.step(g, grads, it)
        if it < 4:
            assert np.array_equal(g.sh_rest, start)
    assert np.allclose(g.sh_rest - start, adam_oracle([np.mean(seq)], 1e-3))


def test_select_and_append_keep_rows_aligned(rng):
    g = _model(rng, 3)
    opt = AdamState.create(g, sh_batch_interval=16)
    opt.step(g, _grads(rng, 3), 1)
    m = opt.groups["positions"].m.copy()
    acc = opt.sh_accum.copy()
    opt.select([2, 0])
    assert np.array_equal(opt.groups["positions"].m, m[[2, 0]])
    opt.append(np.array([1]))
    assert opt.groups["positions"].m.shape == (3, 3)
    assert np.all(opt.groups["positions"].m[2] == 0)
    assert np.array_equal(opt.sh_accum[2], acc[0])


def test_high_opacity_switch_preserves_opacity(rng):
    g = _model(rng, 5)
    g.raw_opacities = rng.standard_normal(5)
    before = g.opacities()
    opt = AdamState.create(g)
    opt.step(g, _grads(rng, 5), 1)
    assert not switch_to_high_opacity(g, 9, 10, opt)
    o = g.opacities()
    assert switch_to_high_opacity(g, 10, 10, opt)
    assert g.opacity_mode is OpacityMode.HIGH_OPACITY_ABS
    assert np.allclose(g.opacities(), o, rtol=0, atol=1e-15)
    assert np.all(opt.groups["raw_opacities"].m == 0)
    assert not switch_to_high_opacity(g, 10, 10, opt)
    assert not switch_to_high_opacity(g, 10, None, opt)
    assert before.shape == o.shape


def test_high_opacity_switch_scales_opacity_lr_once(rng):
    g = _model(rng, 3)
    opt = AdamState.create(g)
    lr = opt.groups["raw_opacities"].lr
    assert switch_to_high_opacity(g, 4, 4, opt, lr_scale=0.25)
    assert opt.groups["raw_opacities"].lr == lr * 0.25
    assert not switch_to_high_opacity(g, 4, 4, opt, lr_scale=0.25)
    assert opt.groups["raw_opacities"].lr == lr * 0.25
