import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matgs.core import Camera, orbit_camera
from matgs.objectives import (LossConfig, ViewTarget, _image_terms, distortion_incremental,
                              distortion_oracle, geometry_loss, grad_check, image_loss, mse,
                              normal_consistency, normal_from_depth, psnr, ssim, ssim_loss, total_loss)
from matgs.rasterizer import GBuffer, SplatSample, render_fast

from conftest import gradcheck_problem, layered_scene, random_scene


def ssim_reference(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Per-pixel SSIM with an explicit 2D Gaussian window; outside pixels count as 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    H, W, C = x.shape
    r = size // 2
    g = np.array([math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)])
    win = np.outer(g, g) / g.sum() ** 2
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    total = 0.0
    for c in range(C):
        xp = np.pad(x[..., c], r)
        yp = np.pad(y[..., c], r)
        for i in range(H):
            for j in range(W):
                px, py = xp[i:i + size, j:j + size], yp[i:i + size, j:j + size]
                mx, my = (win * px).sum(), (win * py).sum()
                vx = (win * px * px).sum() - mx * mx
                vy = (win * py * py).sum() - my * my
                cxy = (win * px * py).sum() - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (H * W * C)


def gbuffer(h=8, w=8, albedo=0.5, roughness=0.5, metallic=0.5):
    gb = GBuffer.zeros(h, w)
    gb.albedo[:] = albedo
    gb.roughness[:] = roughness
    gb.metallic[:] = metallic
    return gb


def samples(ws, zs, normals=None):
    normals = normals or [None] * len(ws)
    return [SplatSample(i, (0.0, 0.0), 1.0, 1.0, z, w, 1.0, n) for i, (w, z, n) in enumerate(zip(ws, zs, normals))]


class TestImageTerms:
    def test_mse(self):
        a = np.zeros((4, 4))
        assert mse(a, a) == 0
        assert mse(a, a + 0.5) == 0.25
        with pytest.raises(ValueError):
            mse(a, np.zeros((4, 5)))

    def test_ssim_identical(self, rng):
        a = rng.uniform(0, 1, (12, 12, 3))
        assert ssim_loss(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_ssim_shift_matches_reference(self):
        a = np.full((13, 13), 0.5)
        assert ssim(a, a + 0.1) == pytest.approx(ssim_reference(a, a + 0.1), abs=1e-6)

    def test_ssim_random_matches_reference(self, rng):
        a, b = rng.uniform(0, 1, (9, 14, 3)), rng.uniform(0, 1, (9, 14, 3))
        assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-9)

    def test_ssim_negative_image(self, rng):
        a = rng.uniform(0, 1, (16, 16))
        assert ssim_loss(a, 1 - a) > 1

    def test_ssim_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_loss(np.zeros((4, 4)), np.zeros((4, 4, 3)))

    def test_image_loss(self):
        assert image_loss(gbuffer(), gbuffer()) == 0
        a, b = gbuffer(albedo=0.0), gbuffer(albedo=0.5)
        expected = 0.25 + ssim_loss(a.albedo, b.albedo)
        assert image_loss(a, b) == pytest.approx(expected, abs=1e-12)
        assert image_loss(gbuffer(roughness=0.4), gbuffer()) > 0
        with pytest.raises(ValueError):
            image_loss(gbuffer(8, 8), gbuffer(8, 9))

    def test_image_loss_nonnegative(self, rng):
        for _ in range(10):
            a, b = gbuffer(), gbuffer()
            for g in (a, b):
                g.albedo[:] = rng.uniform(0, 1, g.albedo.shape)
                g.roughness[:] = rng.uniform(0, 1, g.roughness.shape)
            assert image_loss(a, b) >= 0

    def test_image_gradient_finite_difference(self, rng):
        pred = rng.uniform(0.2, 0.8, (7, 9, 5))
        tgt = ViewTarget(None, rng.uniform(0, 1, (7, 9, 3)), rng.uniform(0, 1, (7, 9, 1)),
                         rng.uniform(0, 1, (7, 9, 1)))
        _, grad = _image_terms(pred, tgt, LossConfig())
        eps = 1e-6
        for idx in [(0, 0, 0), (3, 4, 1), (6, 8, 3), (2, 5, 4)]:
            p, m = pred.copy(), pred.copy()
            p[idx] += eps
            m[idx] -= eps
            fd = (_image_terms(p, tgt, LossConfig())[0] - _image_terms(m, tgt, LossConfig())[0]) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestGeometryLoss:
    def test_exact(self):
        gb = gbuffer()
        gb.depth[:] = 1.5
        gb.normal[..., 2] = 1.0
        assert geometry_loss(gb, gb.depth, gb.normal, np.ones((8, 8, 1))) == 0

    def test_depth_offset(self):
        gb = gbuffer()
        gb.depth[:] = 1.6
        gb.normal[..., 2] = 1.0
        gt_n = gb.normal.copy()
        gt_n[..., 2] = 0.0
        gt_n[..., 0] = 1.0
        alpha = np.zeros((8, 8, 1))
        alpha[2:6, 2:6] = 1
        # depth term 0.01 plus normal term: two components differ by 1 in each masked pixel
        assert geometry_loss(gb, np.full((8, 8, 1), 1.5), gt_n, alpha) == pytest.approx(0.01 + 2 / 3)

    def test_empty_mask(self):
        gb = gbuffer()
        gb.depth[:] = 3.0
        assert geometry_loss(gb, np.zeros((8, 8, 1)), np.zeros((8, 8, 3)), np.zeros((8, 8, 1))) == 0


class TestDistortion:
    def test_examples(self):
        assert distortion_oracle(samples([0.7], [2.0])) == 0
        assert distortion_oracle(samples([0.5, 0.5], [1, 2])) == 0.5
        assert distortion_incremental(samples([0.5, 0.5], [1, 2])) == 0.5
        assert distortion_oracle(samples([0.2, 0.3, 0.1], [1.5] * 3)) == 0
        assert distortion_incremental([]) == 0

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            distortion_incremental(samples([0.5, 0.5], [2, 1]))

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.1, 10)), max_size=40))
    def test_equivalence(self, pairs):
        pairs = sorted(pairs, key=lambda p: p[1])
        s = samples([p[0] for p in pairs], [p[1] for p in pairs])
        assert distortion_incremental(s) == pytest.approx(distortion_oracle(s), abs=1e-9)

    def test_linear_work(self):
        counts = []
        for n in (10, 100, 1000):
            c = {}
            distortion_incremental(samples([1 / n] * n, list(range(n))), counter=c)
            counts.append(c["steps"])
        assert counts == [10, 100, 1000]


class TestNormals:
    def test_constant_plane(self):
        cam = Camera(16, 16, 20.0, 20.0, 8.0, 8.0, np.eye(4))
        N = normal_from_depth(np.full((16, 16), 2.0), np.ones((16, 16)), cam)
        np.testing.assert_allclose(N[1:-1, 1:-1], np.broadcast_to([0, 0, -1.0], (14, 14, 3)), atol=1e-12)
        assert not np.any(N[0]) and not np.any(N[:, -1])

    def test_tilted_plane(self):
        cam = Camera(24, 24, 30.0, 30.0, 12.0, 12.0, np.eye(4))
        # plane z = 2 + 0.5 x  ->  normal proportional to (0.5, 0, -1)
        xs = (np.arange(24) + 0.5 - 12.0) / 30.0
        z = 2.0 / (1 - 0.5 * xs)
        depth = np.broadcast_to(z[None, :], (24, 24))
        N = normal_from_depth(depth, np.ones((24, 24)), cam)
        expected = np.array([0.5, 0.0, -1.0]) / math.sqrt(1.25)
        np.testing.assert_allclose(N[1:-1, 1:-1], np.broadcast_to(expected, (22, 22, 3)), atol=1e-3)

    def test_isolated_pixel(self):
        cam = Camera(8, 8, 10.0, 10.0, 4.0, 4.0, np.eye(4))
        alpha = np.zeros((8, 8))
        alpha[4, 4] = 1
        depth = alpha * 2.0
        assert not np.any(normal_from_depth(depth, alpha, cam))

    def test_consistency(self):
        n = (0.0, 0.0, 1.0)
        assert normal_consistency(samples([0.3, 0.6], [1, 2], [n, n]), n) == 0
        assert normal_consistency(samples([1.0], [1], [(0, 0, -1.0)]), n) == 2
        assert normal_consistency(samples([0.0, 0.0], [1, 2], [n, (1.0, 0, 0)]), n) == 0


def supervision_from(scene, cams, geo=4):
    return [ViewTarget.from_gbuffer(render_fast(scene, c), c, geometry=i < geo) for i, c in enumerate(cams)]


class TestTotalLoss:
    @pytest.fixture
    def problem(self, rng):
        gt = random_scene(rng, 12, scale=(0.08, 0.15))
        cams = [orbit_camera(a, e, width=20, height=20) for a, e in
                [(0, 0), (90, 0), (180, 0), (270, 0), (45, 30), (135, -30), (225, 30), (315, -30)]]
        return gt, supervision_from(gt, cams)

    def test_ground_truth_has_no_data_terms(self, problem):
        gt, sup = problem
        rep = total_loss(gt, sup)
        assert rep.l_image < 1e-8 and rep.l_geometry < 1e-8
        assert rep.l_total == pytest.approx(rep.gamma_d * rep.l_distortion + rep.gamma_n * rep.l_normal, abs=1e-8)
        assert (rep.gamma_d, rep.gamma_n) == (1000.0, 0.2)
        assert rep.composition_error() <= 1e-9

    def test_albedo_perturbation_isolated(self, problem):
        gt, sup = problem
        alb = np.array(gt.albedo)
        alb[0] = np.clip(alb[0] + 0.3, 0, 1) if alb[0].max() < 0.7 else alb[0] - 0.3
        base, moved = total_loss(gt, sup), total_loss(gt.replace(albedo=alb), sup)
        assert moved.l_image > base.l_image
        assert moved.l_geometry == base.l_geometry
        assert moved.l_distortion == base.l_distortion

    def test_missing_channel(self, problem):
        gt, sup = problem
        sup[3] = dataclasses.replace(sup[3], metallic=None)
        with pytest.raises(ValueError, match="metallic"):
            total_loss(gt, sup)

    def test_gamma_linearity(self, problem, rng):
        _, sup = problem
        scene = random_scene(rng, 12)
        a = total_loss(scene, sup, LossConfig(gamma_d=1000), with_gradients=False)
        b = total_loss(scene, sup, LossConfig(gamma_d=2000), with_gradients=False)
        assert b.l_total - a.l_total == pytest.approx(1000 * a.l_distortion, rel=1e-9)
        assert a.l_distortion > 0

    def test_zero_opacity_material_gradients(self, problem, rng):
        _, sup = problem
        scene = random_scene(rng, 6).replace(opacities=np.zeros(6))
        g = total_loss(scene, sup).gradients
        for name in ("albedo", "roughness", "metallic"):
            assert not np.any(g[name])

    def test_terms_nonnegative(self, problem, rng):
        _, sup = problem
        rep = total_loss(random_scene(rng, 12), sup, with_gradients=False)
        for v in (rep.l_image, rep.l_geometry, rep.l_distortion, rep.l_normal):
            assert v >= 0


class TestGradCheck:
    def test_small_scene(self):
        scene, sup = gradcheck_problem(0)
        res = grad_check(scene, sup, LossConfig(), 1e-4)
        assert res.max_error < 1e-3
        assert set(res.per_class) == {"position", "scale", "rotation", "opacity", "albedo", "roughness",
                                      "metallic"}

    def test_image_only_position_gradients(self):
        scene, sup = gradcheck_problem(2, n=4, size=16)
        cfg = LossConfig(gamma_d=0.0, gamma_n=0.0)
        sup = [dataclasses.replace(v, depth=None, normal=None, alpha=None) for v in sup]
        res = grad_check(scene, sup, cfg, 1e-4)
        assert np.any(np.abs(res.analytic.position) > 1e-6)
        assert res.per_class["position"] < 1e-3

    def test_zero_opacity_dead_materials(self):
        scene, sup = gradcheck_problem(3, n=3, size=12)
        scene = scene.replace(opacities=np.zeros(3))
        res = grad_check(scene, sup, LossConfig(), 1e-4)
        for name in ("albedo", "roughness", "metallic"):
            assert not np.any(res.analytic[name]) and not np.any(res.numeric[name])


class TestPsnr:
    def test_values(self):
        a = np.zeros((4, 4))
        assert psnr(a, a) == math.inf
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
