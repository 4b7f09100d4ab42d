import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model
from slimtensor.renderer import (
    BLACK,
    WHITE,
    Camera,
    all_pixels,
    composite,
    composite_backward,
    generate_rays,
    load_image,
    look_at,
    mse_loss,
    ray_box_intersect,
    render_image,
    sample_along_rays,
    save_image,
)


def loop_composite(sigma, rgb, delta, bg):
    """Front-to-back loop with explicit transmittance product."""
    Q, N = sigma.shape
    out = np.zeros((Q, 3))
    for q in range(Q):
        T = 1.0
        for n in range(N):
            a = 1.0 - np.exp(-delta[q] * sigma[q, n])
            out[q] += T * a * rgb[q, n]
            T *= np.exp(-delta[q] * sigma[q, n])
        out[q] += T * bg
    return out


class TestCamera:
    def test_look_at_orthonormal_and_facing(self):
        c2w = look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0])
        R = c2w[:3, :3]
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        forward = -R[:, 2]
        np.testing.assert_allclose(forward, -np.array([3, 1, 2]) / np.sqrt(14), atol=1e-12)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            Camera(10.0, 4, 4, 8, 8, np.diag([2.0, 1.0, 1.0, 1.0]))

    def test_center_ray_along_minus_z(self):
        cam = Camera(10.0, 2.0, 2.0, 4, 4, np.eye(4))
        o, d = generate_rays(cam, np.array([[1, 1], [2, 2]]))
        # pixel centers straddle the principal point symmetrically
        np.testing.assert_allclose(d[0] * [-1, 1, 1], d[1] * [1, -1, 1], atol=1e-12)
        assert d[0, 2] < 0 and d[0, 0] < 0 and d[0, 1] > 0  # upper-left pixel points left and up
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        np.testing.assert_array_equal(o, 0.0)

    def test_pixel_order_and_bounds(self):
        cam = Camera(5.0, 1.5, 1.0, 3, 2, np.eye(4))
        np.testing.assert_array_equal(all_pixels(cam)[:4], [[0, 0], [1, 0], [2, 0], [0, 1]])
        with pytest.raises(ValueError):
            generate_rays(cam, np.array([[3, 0]]))


class TestSampling:
    def test_box_intersection(self):
        o = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
        d = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        near, far, hit = ray_box_intersect(o, d, [[-1, -1, -1], [1, 1, 1]])
        np.testing.assert_allclose(near[:2], [4.0, 0.0])
        np.testing.assert_allclose(far[:2], [6.0, 1.0])
        np.testing.assert_array_equal(hit, [True, True, False])

    def test_stratified_samples_inside_chord(self):
        o = np.array([[0.0, 0.0, 5.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        off = np.random.default_rng(0).random((1, 8))
        t, delta, pts = sample_along_rays(o, d, [[-1, -1, -1], [1, 1, 1]], 8, off)
        assert delta[0] == pytest.approx(0.25)
        assert np.all((t >= 4.0) & (t <= 6.0)) and np.all(np.diff(t[0]) > 0)
        np.testing.assert_allclose(pts[0, :, 2], 5.0 - t[0])
        t_mid, _, _ = sample_along_rays(o, d, [[-1, -1, -1], [1, 1, 1]], 4)
        np.testing.assert_allclose(t_mid[0], [4.25, 4.75, 5.25, 5.75])

    def test_miss_has_zero_step(self):
        _, delta, _ = sample_along_rays(np.array([[5.0, 5, 5]]), np.array([[0.0, 0, 1]]), [[-1] * 3, [1] * 3], 4)
        assert delta[0] == 0.0


class TestCompositing:
    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        sigma, rgb, delta = rng.random((6, 10)) * 3, rng.random((6, 10, 3)), rng.random(6) * 0.5
        bg = np.array([0.2, 0.5, 0.9])
        np.testing.assert_allclose(composite(sigma, rgb, delta, bg).color, loop_composite(sigma, rgb, delta, bg), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 20.0), st.floats(0.001, 1.0), st.integers(1, 64))
    def test_constant_weight_sum_telescopes(self, s, delta, N):
        c = composite(np.full((1, N), s), np.zeros((1, N, 3)), np.array([delta]), BLACK)
        assert c.weights.sum() == pytest.approx(1.0 - np.exp(-N * delta * s), abs=1e-12)
        assert c.weights.sum() + c.residual[0] == pytest.approx(1.0, abs=1e-12)

    def test_transmittance_monotone(self):
        rng = np.random.default_rng(2)
        c = composite(rng.random((4, 20)) * 5, rng.random((4, 20, 3)), np.full(4, 0.1))
        assert np.all(np.diff(c.transmittance, axis=1) <= 0)
        assert np.all((c.weights >= 0) & (c.weights <= 1))

    def test_empty_space_gives_background(self):
        c = composite(np.zeros((3, 5)), np.random.default_rng(0).random((3, 5, 3)), np.full(3, 0.2), WHITE)
        np.testing.assert_array_equal(c.color, 1.0)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            composite(np.array([[np.nan]]), np.zeros((1, 1, 3)), np.array([0.1]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        Q, N = 3, 7
        sigma, rgb, delta = rng.random((Q, N)) * 2, rng.random((Q, N, 3)), rng.random(Q)
        bg = np.array([0.3, 0.6, 0.1])
        dcolor = rng.normal(size=(Q, 3))
        comp = composite(sigma, rgb, delta, bg)
        ds, dr = composite_backward(comp, rgb, delta, dcolor)
        h = 1e-6

        def f(s, c):
            return float(np.sum(composite(s, c, delta, bg).color * dcolor))

        for q in range(Q):
            for n in range(N):
                e = np.zeros_like(sigma)
                e[q, n] = h
                assert ds[q, n] == pytest.approx((f(sigma + e, rgb) - f(sigma - e, rgb)) / (2 * h), rel=1e-6, abs=1e-9)
                for k in range(3):
                    e3 = np.zeros_like(rgb)
                    e3[q, n, k] = h
                    assert dr[q, n, k] == pytest.approx((f(sigma, rgb + e3) - f(sigma, rgb - e3)) / (2 * h), rel=1e-6, abs=1e-9)


class TestLoss:
    def test_matches_loop(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((9, 3)), rng.random((9, 3))
        ref = sum(sum((a[q, k] - b[q, k]) ** 2 for k in range(3)) for q in range(9)) / 9
        assert mse_loss(a, b) == pytest.approx(ref, rel=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            mse_loss(np.zeros((2, 3)), np.zeros((3, 3)))


class TestImages:
    def test_render_deterministic(self):
        m = small_model()
        cam = Camera(6.0, 3, 3, 6, 6, look_at([3.0, 0.5, 1.0], [0, 0, 0]))
        a, b = render_image(m, cam, 16, chunk=7, seed=3), render_image(m, cam, 16, seed=3)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (6, 6, 3)
        np.testing.assert_array_equal(render_image(m, cam, 16), render_image(m, cam, 16))

    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_image_roundtrip(self, tmp_path, ext):
        img = np.random.default_rng(5).random((5, 7, 3))
        save_image(tmp_path / f"a{ext}", img)
        back = load_image(tmp_path / f"a{ext}")
        assert back.shape == (5, 7, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_bad_extension(self, tmp_path):
        with pytest.raises(ValueError):
            save_image(tmp_path / "a.jpg", np.zeros((2, 2, 3)))
