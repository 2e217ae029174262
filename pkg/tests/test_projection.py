import numpy as np

from budgetgs.core import Camera, GaussianSet, inverse_sigmoid
from budgetgs.projection import LOW_PASS, project, project_vjp
from oracles import central_difference, tiny_scene


def _single(pos, scale=0.1, opacity=0.5):
    return GaussianSet(np.array([pos], float), [[1, 0, 0, 0]], np.log([[scale] * 3]), [inverse_sigmoid(opacity)],
                       np.zeros((1, 3)), np.zeros((1, 15, 3)))


def test_isotropic_gaussian_on_axis():
    # camera at origin looking down +z (identity pose)
    cam = Camera(32, 32, 40.0, 40.0, 16.0, 16.0)
    s = project(_single([0, 0, 2.0], 0.1), cam)
    assert len(s) == 1
    var = (40.0 * 0.1 / 2.0) ** 2 + LOW_PASS
    assert np.allclose(s.mean2d, [[16.0, 16.0]])
    assert np.allclose(s.conic, [[1 / var, 0, 1 / var]])
    assert np.allclose(s.radius, 3 * np.sqrt(var))
    assert np.allclose(s.depth, 2.0)
    assert np.allclose(s.opacity, 0.5)
    assert np.allclose(s.rgb, 0.5)


def test_culling_behind_and_offscreen():
    cam = Camera(32, 32, 40.0, 40.0, 16.0, 16.0)
    assert len(project(_single([0, 0, -1.0]), cam)) == 0
    assert len(project(_single([0, 0, 0.005]), cam)) == 0
    assert len(project(_single([5.0, 0, 1.0], 0.01), cam)) == 0
    g = _single([0, 0, 1.0]).extend(_single([0, 0, 3.0])).extend(_single([0.1, 0, 1.0]))
    s = project(g, cam)
    # depth order with index tie-break
    assert list(s.gaussian_index) == [0, 2, 1]
    assert s.num_gaussians == 3


def test_projection_vjp_matches_finite_differences(rng):
    for mode in ("sigmoid", "abs"):
        g, cam = tiny_scene(rng, 4, 16, mode)
        s = project(g, cam)
        k = len(s)
        w_mean, w_conic = rng.standard_normal((k, 2)), rng.standard_normal((k, 3))
        w_op, w_rgb = rng.standard_normal(k), rng.standard_normal((k, 3))

        def scalar(model):
            t = project(model, cam)
            assert np.array_equal(t.gaussian_index, s.gaussian_index)
            return (np.sum(w_mean * t.mean2d) + np.sum(w_conic * t.conic) + np.sum(w_op * t.opacity)
                    + np.sum(w_rgb * t.rgb))

        grads = project_vjp(s, g, cam, w_mean, w_conic, w_op, w_rgb)
        for name in GaussianSet.PARAMS:
            def f(x, name=name):
                m = g.copy()
                setattr(m, name, x)
                return scalar(m)

            fd = central_difference(f, getattr(g, name), 1e-6)
            scale = max(np.abs(fd).max(), 1e-8)
            assert np.abs(grads[name] - fd).max() / scale < 1e-6, name


def test_frustum_clamp_zeroes_jacobian_gradient():
    cam = Camera(16, 16, 8.0, 8.0, 8.0, 8.0)
    # far off to the side but wide enough to still touch the image
    g = _single([3.0, 0, 1.0], 2.0, 0.9)
    s = project(g, cam)
    assert len(s) == 1 and not s.unclamped_xy[0, 0]
    k = 1
    w_conic = np.ones((k, 3))
    grads = project_vjp(s, g, cam, np.zeros((k, 2)), w_conic, np.zeros(k), np.zeros((k, 3)))

    def f(x):
        m = g.copy()
        m.positions = x
        return np.sum(project(m, cam).conic)

    fd = central_difference(f, g.positions, 1e-6)
    assert np.allclose(grads["positions"], fd, rtol=1e-5, atol=1e-9)
