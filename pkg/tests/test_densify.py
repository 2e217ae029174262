import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetgs.backward import DensificationStats
from budgetgs.config import SCORE_COMPONENTS, ScoreWeights, TrainConfig
from budgetgs.core import Camera, GaussianSet, inverse_sigmoid
from budgetgs.densify import (ScoreReport, build_schedule, combine_components, compute_scores, densify_step,
                              median_scale, sample_candidates)
from budgetgs.optim import AdamState
from budgetgs.projection import project
from budgetgs.raster import render


# ---- schedule -------------------------------------------------------------

def test_schedule_examples():
    assert list(build_schedule(1000, 1000, 7).targets) == [1000] * 8
    assert list(build_schedule(100, 500, 2).targets) == [100, 400, 500]
    # printed coefficients, evaluated by hand: (396/4) k^2 + 2k + 500
    assert list(build_schedule(100, 500, 2, "paper-eq2").targets) == [500, 601, 900]
    with pytest.raises(ValueError):
        build_schedule(10, 5, 3)
    with pytest.raises(ValueError):
        build_schedule(10, 50, 0)


@given(st.integers(1, 5000), st.integers(0, 20000), st.integers(1, 200))
@settings(max_examples=300, deadline=None)
def test_schedule_properties(S, extra, N):
    B = S + extra
    t = build_schedule(S, B, N).targets
    assert t[0] == S and t[-1] == B
    inc = np.diff(t)
    assert np.all(inc >= 0)
    assert np.all(np.diff(inc) <= 0)
    # every integer increment is within one of the exact parabola increment
    k = np.arange(1, N + 1)
    exact = (B - S) * (2 * N - 2 * k + 1) / N ** 2
    assert np.all(np.abs(inc - exact) < 1)


# ---- scoring ----------------------------------------------------------------

def test_median_scale():
    assert np.allclose(median_scale([0, 1, 2, 3, 100]), [0, 0.4, 0.8, 1.2, 10])
    assert np.all(median_scale(np.zeros(4)) == 0)


def test_weighted_sum_with_unit_medians():
    comps = {k: np.array([1.0, 1.0, 3.0]) for k in SCORE_COMPONENTS}
    comps["pix"] = np.array([0.0, 1.0, 1.0])
    w = ScoreWeights()
    f = combine_components(comps, w)
    total = sum(w.as_tuple())
    # hand evaluation: Gaussian 2 has every component 3 except pix (1)
    assert np.isclose(f[0], total - w.pix)
    assert np.isclose(f[1], total)
    assert np.isclose(f[2], 3 * total - 2 * w.pix)


def test_component_rescaling_does_not_change_sampling():
    rng = np.random.default_rng(0)
    comps = {k: rng.random(50) * (rng.random(50) > 0.2) for k in SCORE_COMPONENTS}
    base = combine_components(comps, ScoreWeights())
    for k in SCORE_COMPONENTS:
        scaled = dict(comps)
        scaled[k] = comps[k] * 7.3
        s2 = combine_components(scaled, ScoreWeights())
        assert np.allclose(s2, base, rtol=1e-12)
        a = sample_candidates(base, 10, np.random.default_rng(5))
        b = sample_candidates(s2, 10, np.random.default_rng(5))
        assert np.array_equal(a, b)


def _two_symmetric():
    cam = Camera(32, 32, 30.0, 30.0, 16.0, 16.0, name="c")
    pos = np.array([[-0.5, 0.0, 3.0], [0.5, 0.0, 3.0]])
    g = GaussianSet(pos, [[1, 0, 0, 0]] * 2, np.log(np.full((2, 3), 0.15)), inverse_sigmoid(np.full(2, 0.7)),
                    np.ones((2, 3)), np.zeros((2, 15, 3)))
    cam.image = np.zeros((32, 32, 3))
    return g, cam


def test_symmetric_gaussians_get_identical_scores():
    g, cam = _two_symmetric()
    rep = compute_scores(g, [cam], TrainConfig(), None, 3)
    assert rep.scores[0] > 0
    assert np.isclose(rep.scores[0], rep.scores[1], rtol=1e-12)


def test_out_of_frustum_components_are_zero():
    g, cam = _two_symmetric()
    g = g.extend(GaussianSet([[0, 0, -3.0]], [[1, 0, 0, 0]], np.log([[0.2] * 3]), [0.0], [[1, 1, 1]],
                             np.zeros((1, 15, 3))))
    rep = compute_scores(g, [cam], TrainConfig(), None, 3)
    for k in ("pix", "dist", "sal", "blend", "depth"):
        assert rep.components[k][2] == 0
    assert rep.scores[2] > 0  # opacity and scale still count
    with pytest.raises(ValueError):
        compute_scores(g, [], TrainConfig())


def test_scores_are_error_weighted_view_sums():
    g, cam = _two_symmetric()
    cam2 = Camera(32, 32, 30.0, 30.0, 12.0, 16.0, name="d")
    cam2.image = np.full((32, 32, 3), 0.3)
    cfg = TrainConfig()
    r1 = compute_scores(g, [cam], cfg)
    r2 = compute_scores(g, [cam2], cfg)
    both = compute_scores(g, [cam, cam2], cfg)
    assert np.allclose(both.scores, r1.scores + r2.scores)
    p = np.mean(np.abs(render(project(g, cam2)).image - 0.3))
    assert np.isclose(r2.photometric[0], p)
    assert np.allclose(r2.scores, p * combine_components(r2.components, cfg.score_weights))


# ---- sampling ---------------------------------------------------------------

def test_sampling_examples():
    rng = np.random.default_rng(0)
    assert len(sample_candidates([1.0, 2.0], 0, rng)) == 0
    assert list(sample_candidates([0, 0, 5.0, 0], 1, rng)) == [2]
    with pytest.raises(ValueError):
        sample_candidates([1.0, 1.0], 3, rng)
    with pytest.raises(ValueError):
        sample_candidates([0.0, 0.0], 1, rng)
    with pytest.raises(ValueError):
        sample_candidates([1.0, -1.0], 1, rng)
    a = sample_candidates(np.arange(1, 21.0), 8, np.random.default_rng(3))
    b = sample_candidates(np.arange(1, 21.0), 8, np.random.default_rng(3))
    assert np.array_equal(a, b) and len(set(a)) == 8
    # zero-weight items come last
    assert set(sample_candidates([1, 0, 1, 0, 1.0], 3, rng)) == {0, 2, 4}
    assert len(sample_candidates([1.0, 1.0], 5, rng, replace=True)) == 5


# ---- densify step -----------------------------------------------------------

def _setup(n, rng, extent=1.0):
    g = GaussianSet.from_points(rng.standard_normal((n, 3)), rng.random((n, 3)), 0.5)
    scores = ScoreReport({k: np.zeros(n) for k in SCORE_COMPONENTS}, rng.random(n) + 0.1, [0.1],
                         np.full(n, 0.5 * extent), np.full(n, 5.0))
    stats = DensificationStats(n)
    opt = AdamState.create(g)
    return g, scores, stats, opt


def test_exact_additive_accounting():
    rng = np.random.default_rng(1)
    g, scores, stats, opt = _setup(100, rng)
    sched = build_schedule(100, 130, 3)
    sched.targets[1] = 110
    g2, rep = densify_step(g, sched, 1, scores, TrainConfig(), rng, stats, opt)
    assert rep.added == 10 and g2.count == 110
    assert len(scores) == len(stats) == len(opt.sh_accum) == 110
    # already at target: nothing happens
    sched.targets[2] = 105
    g3, rep = densify_step(g2, sched, 2, scores, TrainConfig(), rng, stats, opt)
    assert rep.added == 0 and g3.count == 110


def test_deficit_larger_than_live_count_is_filled_in_rounds():
    rng = np.random.default_rng(2)
    g, scores, stats, opt = _setup(10, rng)
    g2, rep = densify_step(g, build_schedule(10, 35, 1), 1, scores, TrainConfig(), rng, stats, opt)
    assert g2.count == 35 and rep.added == 25


def test_exhausted_schedule_is_noop():
    rng = np.random.default_rng(3)
    g, scores, stats, opt = _setup(10, rng)
    g2, rep = densify_step(g, build_schedule(10, 20, 2), 3, scores, TrainConfig(), rng, stats, opt)
    assert g2 is g and rep.added == 0


def test_prune_then_grow_to_target():
    rng = np.random.default_rng(4)
    g, scores, stats, opt = _setup(20, rng)
    g.raw_opacities[:5] = inverse_sigmoid(0.001)
    g2, rep = densify_step(g, build_schedule(20, 30, 1), 1, scores, TrainConfig(), rng, stats, opt)
    assert rep.pruned == 5 and rep.added == 15 and g2.count == 30
    assert np.all(g2.opacities() >= 0.005)


def test_never_prunes_everything():
    rng = np.random.default_rng(5)
    g, scores, stats, opt = _setup(4, rng)
    g.raw_opacities[:] = inverse_sigmoid(0.001)
    g2, rep = densify_step(g, build_schedule(4, 6, 1), 1, scores, TrainConfig(), rng, stats, opt)
    assert rep.pruned == 0 and g2.count == 6


def test_clone_renders_like_parent():
    rng = np.random.default_rng(6)
    g, scores, stats, opt = _setup(1, rng)
    g.positions[:] = [0, 0, 0]
    g.log_scales[:] = np.log(0.2)
    g2, rep = densify_step(g, build_schedule(1, 2, 1), 1, scores, TrainConfig(), rng, stats, opt)
    assert rep.clone == 1 and rep.split == 0
    cam = Camera.look_at((0, -3, 0), (0, 0, 0), 24, 24)
    a = render(project(g.subset([0]), cam)).image
    b = render(project(g2.subset([1]), cam)).image
    assert np.array_equal(a, b)
    assert g2.subset([1]).allclose(g, rtol=0, atol=0)


def test_split_replaces_parent_with_two_smaller_children():
    rng = np.random.default_rng(7)
    g, scores, stats, opt = _setup(1, rng)
    q = np.array([0.9, 0.1, -0.3, 0.2])
    g.rotations[:] = q / np.linalg.norm(q)
    g.log_scales[:] = np.log([0.5, 0.2, 0.1])
    stats.grad_norm_sum[:] = 1.0
    stats.hits[:] = 1
    parent = g.copy()
    g2, rep = densify_step(g, build_schedule(1, 2, 1), 1, scores, TrainConfig(), rng, stats, opt, 1.0)
    assert rep.split == 1 and rep.clone == 0 and g2.count == 2
    assert np.allclose(g2.log_scales, parent.log_scales - np.log(1.6))
    assert np.allclose(g2.sh_dc, parent.sh_dc) and np.allclose(g2.rotations, parent.rotations)
    assert not np.any(np.all(g2.positions == parent.positions, axis=1))
    assert np.all(stats.hits == 0) and np.all(opt.groups["positions"].m == 0)


def test_split_positions_follow_parent_density():
    rng = np.random.default_rng(8)
    n = 4000
    pos = np.zeros((n, 3))
    q = np.array([0.8, 0.2, 0.4, -0.1])
    q /= np.linalg.norm(q)
    g = GaussianSet(pos, np.tile(q, (n, 1)), np.tile(np.log([0.5, 0.2, 0.1]), (n, 1)),
                    np.zeros(n), np.zeros((n, 3)), np.zeros((n, 15, 3)))
    scores = ScoreReport({k: np.zeros(n) for k in SCORE_COMPONENTS}, np.ones(n), [0.1], np.ones(n), np.ones(n))
    stats = DensificationStats(n)
    stats.grad_norm_sum[:] = 1.0
    stats.hits[:] = 1
    g2, rep = densify_step(g, build_schedule(n, 2 * n, 1), 1, scores, TrainConfig(), rng, stats)
    assert rep.split == n
    cov = np.cov(g2.positions.T)
    assert np.allclose(cov, g.subset([0]).covariances()[0], atol=0.01)
    assert np.allclose(g2.positions.mean(axis=0), 0, atol=0.02)


def test_world_radius_mode_uses_activated_scale():
    rng = np.random.default_rng(9)
    g, scores, stats, opt = _setup(1, rng)
    stats.grad_norm_sum[:] = 1.0
    stats.hits[:] = 1
    scores.max_world_radius[:] = 100.0
    g.log_scales[:] = np.log(0.001)
    cfg = TrainConfig(split_radius_mode="world")
    _, rep = densify_step(g, build_schedule(1, 2, 1), 1, scores, cfg, rng, stats, opt, 1.0)
    assert rep.clone == 1
