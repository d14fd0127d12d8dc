import numpy as np
import pytest
import torch

from helpers import ConstantField, finite_diff_check, random_scene
from triface.errors import InvalidArgumentError
from triface.geometry import Camera, RigidPose
from triface.triplane import (
    Decoder,
    RenderConfig,
    TriPlane,
    decode_point,
    decode_points_batch,
    reference_render,
    render,
    render_batch,
    render_patch,
    sample_plane,
)


def frontal_cam(res=32, dist=2.0):
    return Camera(RigidPose(translation=(0, 0, dist)), focal=1.4, resolution=(res, res))


def bilinear_oracle(plane: np.ndarray, u: float, v: float) -> np.ndarray:
    """Scalar hand-evaluated bilinear interpolation, independent of torch."""
    h, w, _ = plane.shape
    gu = (np.clip(u, -1, 1) + 1) * 0.5 * (w - 1)
    gv = (np.clip(v, -1, 1) + 1) * 0.5 * (h - 1)
    i0, j0 = int(min(np.floor(gu), w - 2)), int(min(np.floor(gv), h - 2))
    fu, fv = gu - i0, gv - j0
    return ((1 - fu) * (1 - fv) * plane[j0, i0] + fu * (1 - fv) * plane[j0, i0 + 1]
            + (1 - fu) * fv * plane[j0 + 1, i0] + fu * fv * plane[j0 + 1, i0 + 1])


class TestSamplePlane:
    def test_grid_node_returns_stored_feature(self):
        g = torch.Generator().manual_seed(0)
        plane = torch.randn(5, 5, 4, generator=g)
        # node (row 1, col 3): u, v in [-1,1] hitting exact indices
        u = -1 + 2 * 3 / 4
        v = -1 + 2 * 1 / 4
        out = sample_plane(plane, u, v)
        torch.testing.assert_close(out, plane[1, 3], atol=1e-6, rtol=0)

    def test_horizontal_midpoint_is_mean(self):
        plane = torch.arange(2 * 3 * 2, dtype=torch.float32).reshape(2, 3, 2)
        u = -1 + 2 * 0.5 / 2   # halfway between cols 0 and 1
        v = -1.0               # row 0
        out = sample_plane(plane, u, v)
        torch.testing.assert_close(out, 0.5 * (plane[0, 0] + plane[0, 1]))

    def test_fractional_query_matches_hand_oracle(self):
        g = torch.Generator().manual_seed(1)
        plane = torch.randn(8, 8, 3, generator=g)
        u, v = 0.25, 0.75
        out = sample_plane(plane, u, v).numpy()
        np.testing.assert_allclose(out, bilinear_oracle(plane.numpy(), u, v), atol=1e-6)

    def test_border_clamp(self):
        plane = torch.randn(4, 4, 2, generator=torch.Generator().manual_seed(2))
        torch.testing.assert_close(sample_plane(plane, -5.0, -5.0), plane[0, 0])
        torch.testing.assert_close(sample_plane(plane, 5.0, 5.0), plane[3, 3])

    def test_vectorized_matches_scalar(self):
        plane = torch.randn(6, 6, 2, generator=torch.Generator().manual_seed(3))
        us = torch.tensor([0.1, -0.4, 0.9])
        vs = torch.tensor([-0.2, 0.3, 0.8])
        batched = sample_plane(plane, us, vs)
        for i in range(3):
            torch.testing.assert_close(batched[i], sample_plane(plane, us[i], vs[i]))

    def test_differentiable_wrt_plane_and_coords(self):
        plane = torch.randn(4, 4, 2, dtype=torch.float64, requires_grad=True)
        uv = torch.tensor([0.17, -0.35], dtype=torch.float64, requires_grad=True)
        out = sample_plane(plane, uv[0], uv[1]).sum()
        g_plane, g_uv = torch.autograd.grad(out, [plane, uv])
        assert g_plane.abs().sum() > 0
        assert g_uv.abs().sum() > 0


class TestDecodePoint:
    def test_zero_triplane_biased_decoder_gives_zero_density(self):
        tp = TriPlane.zeros(8, 4)
        torch.manual_seed(0)
        dec = Decoder(4)
        with torch.no_grad():
            dec.density_head.bias.fill_(-40.0)
        for p in [(0, 0, 0), (0.3, -0.7, 0.2)]:
            _, density = decode_point(tp, dec, p)
            assert density.item() < 1e-12

    def test_axis_assignment_contract(self, monkeypatch):
        """T0 is looked up at (x,y), T1 at (y,z), T2 at (z,x)."""
        calls = []
        import triface.triplane as m
        orig = m.sample_plane

        def spy(plane, u, v):
            calls.append((float(plane[0, 0, 0]), float(u), float(v)))
            return orig(plane, u, v)

        monkeypatch.setattr(m, "sample_plane", spy)
        tp = TriPlane(torch.stack([torch.full((4, 4, 2), float(i)) for i in range(3)]))
        torch.manual_seed(0)
        dec = Decoder(2)
        x, y, z = 0.1, 0.2, 0.3
        m.decode_point(tp, dec, (x, y, z))
        assert calls == [
            (0.0, pytest.approx(x), pytest.approx(y)),
            (1.0, pytest.approx(y), pytest.approx(z)),
            (2.0, pytest.approx(z), pytest.approx(x)),
        ]

    def test_swapping_y_and_z_changes_only_plane_lookups(self, monkeypatch):
        calls = []
        import triface.triplane as m
        orig = m.sample_plane

        def spy(plane, u, v):
            calls.append((float(u), float(v)))
            return orig(plane, u, v)

        monkeypatch.setattr(m, "sample_plane", spy)
        tp = TriPlane.randn(4, 2, seed=1)
        torch.manual_seed(0)
        dec = Decoder(2)
        m.decode_point(tp, dec, (0.1, 0.2, 0.3))
        first = list(calls)
        calls.clear()
        m.decode_point(tp, dec, (0.1, 0.3, 0.2))
        second = list(calls)
        # T0 keeps u=x; T1/T2 swap their coordinates accordingly.
        assert first[0][0] == second[0][0]
        assert first[1] == (pytest.approx(0.2), pytest.approx(0.3))
        assert second[1] == (pytest.approx(0.3), pytest.approx(0.2))

    def test_matches_manual_composition(self):
        tp, dec = random_scene(7, res=8, channels=4)
        p = torch.tensor([0.21, -0.54, 0.33])
        color, density = decode_point(tp, dec, p)
        f0 = sample_plane(tp.data[0], p[0], p[1])
        f1 = sample_plane(tp.data[1], p[1], p[2])
        f2 = sample_plane(tp.data[2], p[2], p[0])
        c2, d2 = dec(torch.cat([f0, f1, f2]))
        torch.testing.assert_close(color, c2)
        torch.testing.assert_close(density, d2)

    def test_camera_independent(self):
        tp, dec = random_scene(8, res=8, channels=4)
        p = (0.1, 0.2, -0.3)
        before = decode_point(tp, dec, p)
        render(tp, dec, frontal_cam(8), RenderConfig(samples_per_ray=4, render_resolution=8))
        render(tp, dec, Camera.look_at((1.5, 0.5, 1.5), (0, 0, 0), resolution=(8, 8)),
               RenderConfig(samples_per_ray=4, render_resolution=8))
        after = decode_point(tp, dec, p)
        assert torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])

    def test_batched_decode_matches_decode_point(self):
        tp, dec = random_scene(9, res=16, channels=8)
        pts = torch.rand(50, 3) * 2 - 1
        planes_cf = tp.data.unsqueeze(0).permute(0, 1, 4, 2, 3).contiguous()
        cb, db = decode_points_batch(planes_cf, dec, pts.unsqueeze(0))
        for i in range(0, 50, 13):
            c, d = decode_point(tp, dec, pts[i])
            torch.testing.assert_close(cb[0, i], c, atol=2e-6, rtol=1e-5)
            torch.testing.assert_close(db[0, i], d, atol=2e-6, rtol=1e-5)


class TestRender:
    def test_zero_density_gives_background(self):
        tp = TriPlane.zeros(8, 4)
        torch.manual_seed(0)
        dec = Decoder(4)
        with torch.no_grad():
            dec.density_head.bias.fill_(-40.0)
        cfg = RenderConfig(samples_per_ray=16, render_resolution=16,
                           background_color=(0.2, 0.4, 0.6))
        out = render(tp, dec, frontal_cam(16), cfg)
        expected = torch.tensor([0.2, 0.4, 0.6]).expand(16, 16, 3)
        torch.testing.assert_close(out.rgb, expected, atol=1e-6, rtol=0)
        torch.testing.assert_close(out.alpha, torch.zeros(16, 16), atol=1e-6, rtol=0)

    def test_opaque_limit(self):
        tp = TriPlane.zeros(8, 4)
        dec = ConstantField((0.3, 0.5, 0.7), 1e4)
        cfg = RenderConfig(samples_per_ray=8, render_resolution=9, stratified=False)
        out = render(tp, dec, frontal_cam(9), cfg)
        center = out.rgb[4, 4]
        torch.testing.assert_close(center, torch.tensor([0.3, 0.5, 0.7]), atol=1e-6, rtol=0)
        assert out.alpha[4, 4].item() > 1 - 1e-6

    def test_constant_slab_closed_form(self):
        """Constant density composites to the analytic slab answer at any
        sample count because bins partition [t_near, t_far] exactly."""
        tp = TriPlane.zeros(8, 4)
        sigma, color, bg = 2.0, (0.8, 0.1, 0.2), (1.0, 1.0, 1.0)
        dec = ConstantField(color, sigma)
        cfg = RenderConfig(samples_per_ray=5, render_resolution=9,
                           background_color=bg, stratified=False)
        out = render(tp, dec, frontal_cam(9), cfg)
        ln = 2.0  # central ray crosses z in [-1, 1]
        trans = np.exp(-sigma * ln)
        expected = np.asarray(color) * (1 - trans) + np.asarray(bg) * trans
        np.testing.assert_allclose(out.rgb[4, 4].numpy(), expected, atol=1e-5)
        # jittered sampling hits the same closed form for constant fields
        out_j = render(tp, dec, frontal_cam(9), RenderConfig(
            samples_per_ray=5, render_resolution=9, background_color=bg, stratified=True))
        np.testing.assert_allclose(out_j.rgb[4, 4].numpy(), expected, atol=1e-5)

    def test_matches_reference_on_random_scenes(self):
        for seed in range(3):
            tp, dec = random_scene(seed)
            cam = frontal_cam(32)
            cfg = RenderConfig(samples_per_ray=48, render_resolution=32, seed=seed)
            out = render(tp, dec, cam, cfg)
            ref = reference_render(tp, dec, cam, 768)
            rmse = torch.sqrt(((out.rgb - ref) ** 2).mean()).item()
            assert rmse <= 1e-3, f"seed {seed}: RMSE {rmse:.2e}"

    def test_reference_convergence_monotone(self):
        tp, dec = random_scene(11)
        cam = frontal_cam(32)
        ref = reference_render(tp, dec, cam, 768)
        errs = []
        for s in (48, 96, 192, 384):
            out = render(tp, dec, cam, RenderConfig(samples_per_ray=s, seed=5))
            errs.append(torch.sqrt(((out.rgb - ref) ** 2).mean()).item())
        assert all(errs[i + 1] <= errs[i] for i in range(len(errs) - 1)), errs

    def test_reference_rejects_sparse_sampling(self):
        tp, dec = random_scene(0, res=8, channels=4)
        with pytest.raises(InvalidArgumentError):
            reference_render(tp, dec, frontal_cam(8), 128)

    def test_reference_zero_density_is_background(self):
        tp = TriPlane.zeros(8, 4)
        torch.manual_seed(0)
        dec = Decoder(4)
        with torch.no_grad():
            dec.density_head.bias.fill_(-40.0)
        img = reference_render(tp, dec, frontal_cam(8), 256, background=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(img.numpy(), np.tile((0.1, 0.2, 0.3), (8, 8, 1)), atol=1e-6)

    def test_compositing_invariants(self):
        tp, dec = random_scene(13, res=16, channels=8)
        cfg = RenderConfig(samples_per_ray=24, render_resolution=16)
        _, aux = render(tp, dec, frontal_cam(16), cfg, return_aux=True)
        w = aux["weights"]
        assert (w >= 0).all()
        assert (w.sum(-1) <= 1 + 1e-5).all()
        alpha = w  # alias for readability below
        del alpha
        # transmittance along every ray is non-increasing
        trans = 1 - torch.cumsum(w, dim=-1)
        assert (trans[..., 1:] <= trans[..., :-1] + 1e-6).all()

    def test_determinism(self):
        tp, dec = random_scene(3, res=16, channels=8)
        cfg = RenderConfig(samples_per_ray=16, render_resolution=16, seed=7)
        a = render(tp, dec, frontal_cam(16), cfg)
        b = render(tp, dec, frontal_cam(16), cfg)
        assert torch.equal(a.rgb, b.rgb)


class TestRenderPatch:
    def test_full_frame_patch_equals_render(self):
        tp, dec = random_scene(4, res=16, channels=8)
        cam = frontal_cam(16)
        cfg = RenderConfig(samples_per_ray=8, render_resolution=16, seed=3)
        full = render(tp, dec, cam, cfg)
        patch = render_patch(tp, dec, cam, cfg.with_patch((0, 0, 16)))
        assert torch.equal(full.rgb, patch.rgb)

    def test_patch_is_bitwise_crop_of_full(self):
        tp, dec = random_scene(5, res=16, channels=8)
        cam = frontal_cam(16)
        cfg = RenderConfig(samples_per_ray=8, render_resolution=16, seed=9)
        full = render(tp, dec, cam, cfg)
        x, y, s = 3, 5, 7
        patch = render_patch(tp, dec, cam, cfg.with_patch((x, y, s)))
        assert torch.equal(patch.rgb, full.rgb[y:y + s, x:x + s])
        assert torch.equal(patch.alpha, full.alpha[y:y + s, x:x + s])

    def test_disjoint_patches_tile_without_seams(self):
        tp, dec = random_scene(6, res=16, channels=8)
        cam = frontal_cam(16)
        cfg = RenderConfig(samples_per_ray=8, render_resolution=16, seed=2)
        full = render(tp, dec, cam, cfg)
        for x, y in [(0, 0), (8, 0), (0, 8), (8, 8)]:
            patch = render_patch(tp, dec, cam, cfg.with_patch((x, y, 8)))
            assert torch.equal(patch.rgb, full.rgb[y:y + 8, x:x + 8])

    def test_out_of_bounds_patch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RenderConfig(render_resolution=16, patch=(10, 10, 8))

    def test_paper_and_toy_patch_ratios_recorded(self):
        from triface.triplane import RESOLUTION_PRESETS
        assert RESOLUTION_PRESETS["full"]["patch"] == 172
        assert RESOLUTION_PRESETS["full"]["render_high"] == 256
        assert RESOLUTION_PRESETS["toy"]["patch"] == 44
        assert RESOLUTION_PRESETS["toy"]["render_high"] == 64


class TestGradients:
    def test_render_gradients_match_finite_differences(self):
        tp, dec = random_scene(21, res=8, channels=4, dtype=torch.float64)
        planes = tp.data.clone().requires_grad_(True)
        cam = frontal_cam(4)
        cfg = RenderConfig(samples_per_ray=6, render_resolution=4, seed=1)

        def make_loss():
            rgb, alpha, _ = render_batch(planes.unsqueeze(0), dec, [cam], cfg)
            return rgb.mean() + 0.1 * alpha.mean()

        params = [planes] + [p for p in dec.parameters()]
        for p in params:
            p.requires_grad_(True)
        finite_diff_check(make_loss, params, n_coords=5, h=1e-6, rel_tol=1e-3)


class TestConfigValidation:
    def test_too_few_samples_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RenderConfig(samples_per_ray=1)

    def test_triplane_shape_validation(self):
        with pytest.raises(InvalidArgumentError):
            TriPlane(torch.zeros(2, 4, 4, 2))
        with pytest.raises(InvalidArgumentError):
            TriPlane(torch.full((3, 4, 4, 2), float("nan")))
