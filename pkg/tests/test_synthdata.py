import numpy as np
import pytest

from triface.errors import FormatError, InvalidArgumentError, InvalidStateError
from triface.geometry import Camera, RigidPose
from triface.synthdata import (
    EXP_DIM,
    EXP_PARAM_NAMES,
    ID_DIM,
    MOUTH_BBOX,
    SELECT_FRAMES_PAPER_DEFAULT_K,
    DatasetSpec,
    HeadField,
    build_scene,
    canonical_camera,
    eye_mask,
    gen_dataset,
    gt_render,
    landmarks2d,
    load_dataset,
    sample_stage1_batch,
    save_dataset,
    select_frames,
    synthesize_stage2_dataset,
)

EXP_INDEX = {n: i for i, n in enumerate(EXP_PARAM_NAMES)}


def make_scene(seed=0, **exp_overrides):
    rng = np.random.default_rng(seed)
    tid = rng.uniform(-1, 1, ID_DIM)
    tex = np.zeros(EXP_DIM)
    for name, val in exp_overrides.items():
        tex[EXP_INDEX[name]] = val
    return build_scene(tid, tex)


def field_oracle(scene: HeadField, pts: np.ndarray):
    """Independent per-blob re-implementation of the kernel superposition."""
    sigma = np.zeros(len(pts))
    num = np.zeros((len(pts), 3))
    for c, inv2, a, col in zip(scene.centers, scene.inv_axes_sq,
                               scene.amplitudes, scene.colors):
        r2 = (((pts - c) ** 2) * inv2).sum(axis=1)
        w = np.maximum(1.0 - r2, 0.0) ** 2
        sigma += a * w
        num += (a * w)[:, None] * col
    return num / (sigma[:, None] + 1e-9), sigma


class TestBuildScene:
    def test_matches_independent_blob_formula(self):
        scene = make_scene(3, mouth_open=0.7, tongue=0.5, brow_left=-0.4)
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, size=(10, 3)).astype(np.float32)
        rgb, sigma = scene.density_color(pts)
        rgb_o, sigma_o = field_oracle(scene, pts.astype(np.float64))
        np.testing.assert_allclose(sigma, sigma_o, rtol=1e-4, atol=1e-4)
        np.testing.assert_allclose(rgb, rgb_o, rtol=1e-4, atol=1e-4)

    def test_neutral_definition(self):
        scene = make_scene(1)
        names = dict(zip(scene.names, range(len(scene.names))))
        # tongue amplitude vanishes (smooth positive part of 0 is ~0.05)
        assert scene.amplitudes[names["tongue"]] < 0.05 * 220 + 1e-6
        # brows level
        assert abs(scene.centers[names["brow_left"]][1]
                   - scene.centers[names["brow_right"]][1]) < 1e-12
        # mouth near-closed: height close to the minimum
        mouth_inv2 = scene.inv_axes_sq[names["mouth"]]
        mh = 1.0 / np.sqrt(mouth_inv2[1])
        assert mh < 0.05

    def test_mouth_open_changes_density_only_inside_bbox(self):
        closed = make_scene(2, mouth_open=0.0)
        opened = make_scene(2, mouth_open=1.0)
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, size=(4000, 3))
        inside = np.all((pts >= MOUTH_BBOX[:, 0]) & (pts <= MOUTH_BBOX[:, 1]), axis=1)
        _, s_closed = closed.density_color(pts.astype(np.float32))
        _, s_open = opened.density_color(pts.astype(np.float32))
        diff = np.abs(s_closed - s_open)
        assert np.all(diff[~inside] == 0.0)
        assert diff[inside].max() > 1.0  # the mouth actually moved

    def test_parameter_validation(self):
        with pytest.raises(InvalidArgumentError):
            build_scene(np.zeros(ID_DIM - 1), np.zeros(EXP_DIM))
        with pytest.raises(InvalidArgumentError):
            build_scene(np.zeros(ID_DIM), np.full(EXP_DIM, 1.5))

    def test_equal_parameters_give_identical_scene(self):
        a = make_scene(7, mouth_open=0.3)
        b = make_scene(7, mouth_open=0.3)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.amplitudes, b.amplitudes)


def mirror_camera_x(cam: Camera) -> Camera:
    """Reflect a camera across the x = 0 plane, keeping right-handedness."""
    m = np.diag([-1.0, 1.0, 1.0, 1.0])
    flip = np.diag([-1.0, 1.0, 1.0, 1.0])
    mirrored = m @ cam.extrinsic.matrix() @ flip
    return Camera(RigidPose.from_matrix(mirrored), cam.focal,
                  cam.principal_point, cam.resolution)


class TestGtRender:
    def test_empty_scene_is_background(self):
        scene = make_scene(0)
        empty = HeadField(scene.theta_id, scene.theta_exp, scene.centers,
                          scene.inv_axes_sq, np.zeros_like(scene.amplitudes),
                          scene.colors, scene.names)
        img = gt_render(empty, canonical_camera(12), background=(0.3, 0.6, 0.9))
        np.testing.assert_allclose(img, np.tile((0.3, 0.6, 0.9), (12, 12, 1)), atol=1e-6)

    def test_deterministic(self):
        scene = make_scene(1, mouth_open=0.5)
        cam = canonical_camera(16)
        np.testing.assert_array_equal(gt_render(scene, cam), gt_render(scene, cam))

    def test_mirrored_camera_mirrors_image(self):
        # symmetric expression components only
        rng = np.random.default_rng(9)
        tid = rng.uniform(-1, 1, ID_DIM)
        tex = np.zeros(EXP_DIM)
        tex[EXP_INDEX["mouth_open"]] = 0.8
        tex[EXP_INDEX["brow_left"]] = tex[EXP_INDEX["brow_right"]] = 0.5
        tex[EXP_INDEX["gaze_left_pitch"]] = tex[EXP_INDEX["gaze_right_pitch"]] = 0.4
        tex[EXP_INDEX["tongue"]] = 0.6
        scene = build_scene(tid, tex)
        cam = Camera.look_at((0.9, 0.3, 2.3), (0, 0, 0), resolution=(24, 24))
        img = gt_render(scene, cam)
        img_m = gt_render(scene, mirror_camera_x(cam))
        np.testing.assert_allclose(img_m, img[:, ::-1], atol=1e-6)

    def test_multiview_consistency_by_reprojection(self):
        scene = make_scene(11, mouth_open=0.6)
        cam_a = Camera.look_at((0.8, 0.2, 2.4), (0, 0, 0), resolution=(24, 24))
        img_a, alpha_a, depth_a = gt_render(scene, cam_a, return_aux=True)
        del img_a
        from triface.geometry import generate_rays
        rays = generate_rays(cam_a)
        solid = (alpha_a.reshape(-1) > 0.98) & rays.valid
        t_surf = depth_a.reshape(-1)[solid]
        pts = rays.origins[solid] + t_surf[:, None] * rays.directions[solid]
        _, sigma = scene.density_color(pts.astype(np.float32))
        # expected-termination depths land in high-density material
        assert (sigma > 1.0).mean() > 0.9


class TestLandmarksAndMasks:
    def test_landmark_layout_frontal(self):
        scene = make_scene(0)
        cam = canonical_camera(32)
        lm = landmarks2d(scene, cam)
        names = dict(eye_left=0, eye_right=1, mouth=6)
        assert lm[names["eye_left"], 0] < lm[names["eye_right"], 0]
        assert lm[names["mouth"], 1] > lm[names["eye_left"], 1]  # mouth lower (y down)

    def test_gaze_moves_projected_pupil(self):
        base = make_scene(0)
        right = make_scene(0, gaze_left_yaw=1.0, gaze_right_yaw=1.0)
        cam = canonical_camera(32)
        assert landmarks2d(right, cam)[2, 0] > landmarks2d(base, cam)[2, 0]

    def test_eye_mask_covers_projected_eyes(self):
        scene = make_scene(0)
        cam = canonical_camera(32)
        mask = eye_mask(scene, cam, 32)
        assert mask.any() and not mask.all()
        lm = landmarks2d(scene, cam)
        for e in (0, 1):
            x, y = int(lm[e, 0]), int(lm[e, 1])
            assert mask[y, x]


@pytest.fixture(scope="module")
def tiny_ds():
    return gen_dataset(DatasetSpec(n_identities=3, n_expressions=3, n_views=2,
                                   resolution=16, seed=42))


class TestDataset:
    def test_seed_determinism(self, tiny_ds):
        again = gen_dataset(DatasetSpec(3, 3, 2, 16, 42))
        np.testing.assert_array_equal(tiny_ds.images, again.images)
        np.testing.assert_array_equal(tiny_ds.theta_id, again.theta_id)

    def test_spec_validation(self):
        with pytest.raises(InvalidArgumentError):
            DatasetSpec(n_identities=0)

    def test_stage1_batch_invariants(self, tiny_ds):
        batch = sample_stage1_batch(tiny_ds, 64, seed=1)
        assert len(batch) == 64
        for pair in batch:
            assert pair.source[0] == pair.driver[0]
            assert pair.cross[0] != pair.source[0]

    def test_stage1_batch_seed_determinism(self, tiny_ds):
        a = sample_stage1_batch(tiny_ds, 16, seed=5)
        b = sample_stage1_batch(tiny_ds, 16, seed=5)
        assert a == b

    def test_stage1_cross_identity_never_matches(self, tiny_ds):
        batch = sample_stage1_batch(tiny_ds, 10_000, seed=7)
        matches = sum(p.cross[0] == p.source[0] for p in batch)
        assert matches == 0

    def test_stage1_requires_two_identities(self):
        ds1 = gen_dataset(DatasetSpec(1, 2, 1, 8, 0))
        with pytest.raises(InvalidStateError):
            sample_stage1_batch(ds1, 4, seed=0)


class _StubModel:
    def reenact_image(self, source, driver, cam):
        return 0.5 * (np.asarray(source) + np.asarray(driver))


class TestStage2Synthesis:
    def test_records_and_provenance(self, tiny_ds):
        recs = synthesize_stage2_dataset(_StubModel(), tiny_ds, 12, seed=3)
        assert len(recs) == 12
        for r in recs:
            assert r.source_from_gt_render and r.gt_from_gt_render
            assert r.driver_identity != r.source[0]
            assert r.source[0] == r.gt[0]
            assert r.driver_synthetic.shape == (16, 16, 3)

    def test_missing_model_rejected(self, tiny_ds):
        with pytest.raises(InvalidStateError):
            synthesize_stage2_dataset(None, tiny_ds, 4)


class TestSelectFrames:
    def test_k_equals_n_selects_all(self):
        rng = np.random.default_rng(0)
        lm = rng.normal(size=(12, 6))
        sel = select_frames(list(range(12)), lm, 12)
        assert sorted(sel.tolist()) == list(range(12))

    def test_two_separated_clusters(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(20, 4)) * 0.1
        b = rng.normal(size=(20, 4)) * 0.1 + 50.0
        lm = np.concatenate([a, b])
        sel = select_frames(list(range(40)), lm, 2, seed=3)
        sides = sorted(int(i >= 20) for i in sel)
        assert sides == [0, 1]

    def test_paper_default_recorded(self):
        assert SELECT_FRAMES_PAPER_DEFAULT_K == 200

    def test_invalid_k(self):
        lm = np.zeros((5, 2))
        with pytest.raises(InvalidArgumentError):
            select_frames(list(range(5)), lm, 0)
        with pytest.raises(InvalidArgumentError):
            select_frames(list(range(5)), lm, 6)


class TestContainer:
    def test_round_trip_bitwise(self, tiny_ds, tmp_path):
        p = tmp_path / "world.vxpd"
        save_dataset(tiny_ds, p)
        back = load_dataset(p)
        np.testing.assert_array_equal(back.images, tiny_ds.images)
        np.testing.assert_array_equal(back.theta_id, tiny_ds.theta_id)
        np.testing.assert_array_equal(back.theta_exp, tiny_ds.theta_exp)
        np.testing.assert_array_equal(back.camera_params, tiny_ds.camera_params)
        assert back.spec == tiny_ds.spec

    def test_future_version_rejected(self, tiny_ds, tmp_path):
        p = tmp_path / "world.vxpd"
        save_dataset(tiny_ds, p)
        blob = bytearray(p.read_bytes())
        blob[4:6] = (99).to_bytes(2, "little")
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_corrupt_truncation_reports_offset(self, tiny_ds, tmp_path):
        p = tmp_path / "world.vxpd"
        save_dataset(tiny_ds, p)
        blob = p.read_bytes()[:-100]
        p.write_bytes(blob)
        with pytest.raises(FormatError) as exc:
            load_dataset(p)
        assert exc.value.offset is not None

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vxpd"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_file_size_linear_in_record_count(self, tmp_path):
        ds1 = gen_dataset(DatasetSpec(2, 2, 1, 8, 1))
        ds2 = gen_dataset(DatasetSpec(2, 2, 2, 8, 1))
        p1, p2 = tmp_path / "a.vxpd", tmp_path / "b.vxpd"
        save_dataset(ds1, p1)
        save_dataset(ds2, p2)
        header = 4 + 2 + 12 + 8 + 8
        per_record_1 = (p1.stat().st_size - header) / ds1.spec.n_frames
        per_record_2 = (p2.stat().st_size - header) / ds2.spec.n_frames
        assert per_record_1 == per_record_2


class TestExpressionRecoverability:
    def test_raw_pixel_probe_beats_shuffled_baseline(self):
        """Least-squares probe from frontal pixels to theta_exp gets
        above-chance R^2, so the expression signal is learnable."""
        rng = np.random.default_rng(0)
        n = 160
        cam = canonical_camera(20)
        xs, ys = [], []
        tid = rng.uniform(-1, 1, ID_DIM)
        for _ in range(n):
            tex = rng.uniform(-1, 1, EXP_DIM)
            img = gt_render(build_scene(tid, tex), cam, n_samples=64)
            xs.append(img.reshape(-1))
            ys.append(tex)
        x = np.stack(xs)
        y = np.stack(ys)
        x = np.concatenate([x, np.ones((n, 1))], axis=1)
        n_train = 120
        w, *_ = np.linalg.lstsq(x[:n_train], y[:n_train], rcond=1e-6)
        pred = x[n_train:] @ w
        resid = ((pred - y[n_train:]) ** 2).sum()
        total = ((y[n_train:] - y[:n_train].mean(0)) ** 2).sum()
        r2 = 1 - resid / total

        y_shuf = y[rng.permutation(n)]
        w_s, *_ = np.linalg.lstsq(x[:n_train], y_shuf[:n_train], rcond=1e-6)
        pred_s = x[n_train:] @ w_s
        r2_s = 1 - ((pred_s - y_shuf[n_train:]) ** 2).sum() / total
        assert r2 > max(0.2, r2_s + 0.2), (r2, r2_s)
