"""Procedural synthetic head world with analytic ground truth.

A head is a superposition of compactly-supported quartic blobs (ellipsoid
kernels w = max(0, 1 - r^2)^2) whose centers, sizes, colors, and amplitudes
are smooth functions of an identity vector and an expression vector, both in
[-1, 1]^k. Density is the amplitude-weighted kernel sum; color is the
amplitude-weighted mix. Compact support makes expression edits exactly local:
the mouth/tongue blobs live inside a fixed bounding box for every parameter
value.

Ground-truth images come from the same dense-quadrature compositing used by
the tri-plane reference renderer, with the analytic field in place of the
decoder. Blob centers double as landmark proxies for frame selection and eye
masks.

Dataset container ("VXPD", little-endian)
-----------------------------------------
    magic       4s   = b"VXPD"
    version     u16  = 1
    n_identities u32, n_expressions u32, n_views u32
    seed        u64
    record_count u64
    records, each:
        id_index u32, exp_index u32, view_index u32
        img_h u16, img_w u16
        camera: quaternion wxyz + translation xyz (7 f32), focal f32,
                principal point (2 f32)
        theta_id_len u32, theta_id (f32 * len)
        theta_exp_len u32, theta_exp (f32 * len)
        image: raw uint8, h*w*3 bytes (lossless)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgumentError, InvalidStateError
from .geometry import Camera, RigidPose
from .triplane import quadrature_render_np

ID_PARAM_NAMES = (
    "head_rx", "head_ry", "head_rz",
    "skin_r", "skin_g", "skin_b",
    "eye_dist", "eye_height", "mouth_width", "accessory",
)
EXP_PARAM_NAMES = (
    "mouth_open", "mouth_asym", "brow_left", "brow_right",
    "gaze_left_yaw", "gaze_left_pitch", "gaze_right_yaw", "gaze_right_pitch",
    "tongue",
)
ID_DIM = len(ID_PARAM_NAMES)
EXP_DIM = len(EXP_PARAM_NAMES)

GT_SAMPLES = 128
BACKGROUND = (1.0, 1.0, 1.0)

# Every mouth/tongue configuration stays inside this box (x, y, z ranges).
MOUTH_BBOX = np.array([[-0.45, 0.45], [-0.52, -0.08], [0.15, 0.80]])

LANDMARK_NAMES = (
    "eye_left", "eye_right", "pupil_left", "pupil_right",
    "brow_left", "brow_right", "mouth", "tongue",
)

EYE_RADIUS = 0.13
PUPIL_RADIUS = 0.06

_CANONICAL_EYE = np.array((0.0, 0.0, 2.6))
CANONICAL_FOCAL = 1.4


def canonical_camera(resolution: int = 32) -> Camera:
    """The fixed frontal camera of the canonical head frame."""
    return Camera.look_at(_CANONICAL_EYE, (0.0, 0.0, 0.0), focal=CANONICAL_FOCAL,
                          resolution=(resolution, resolution))


def _smooth_relu(x: float) -> float:
    # softplus-like positive part, smooth in the parameters
    return 0.5 * (x + np.sqrt(x * x + 0.01))


@dataclass
class HeadField:
    """Analytic density/color field of one head configuration."""

    theta_id: np.ndarray
    theta_exp: np.ndarray
    centers: np.ndarray      # (K, 3)
    inv_axes_sq: np.ndarray  # (K, 3) = 1 / semi_axes^2
    amplitudes: np.ndarray   # (K,)
    colors: np.ndarray       # (K, 3)
    names: tuple = ()

    def density_color(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate (rgb, sigma) at (P, 3) points. Matmul-structured."""
        pts = np.ascontiguousarray(pts, dtype=np.float32)
        inv2 = self.inv_axes_sq.T.astype(np.float32)              # (3, K)
        cinv2 = (self.centers * self.inv_axes_sq).T.astype(np.float32)
        const = (self.centers ** 2 * self.inv_axes_sq).sum(axis=1).astype(np.float32)
        r2 = (pts * pts) @ inv2 - 2.0 * (pts @ cinv2) + const      # (P, K)
        w = np.maximum(1.0 - r2, 0.0, out=r2)
        w *= w
        amp = self.amplitudes.astype(np.float32)
        sigma = w @ amp
        rgb = (w @ (self.colors.astype(np.float32) * amp[:, None])) / (sigma[:, None] + 1e-9)
        return rgb, sigma

    def landmarks3d(self) -> np.ndarray:
        """3D centers of the named feature blobs, shape (8, 3)."""
        idx = {n: i for i, n in enumerate(self.names)}
        return np.stack([self.centers[idx[n]] for n in LANDMARK_NAMES])


def build_scene(theta_id, theta_exp) -> HeadField:
    """Closed-form head field from identity/expression parameters in [-1, 1]."""
    tid = np.asarray(theta_id, dtype=np.float64).reshape(-1)
    texp = np.asarray(theta_exp, dtype=np.float64).reshape(-1)
    if tid.shape != (ID_DIM,):
        raise InvalidArgumentError(f"theta_id must have {ID_DIM} entries, got {tid.shape}")
    if texp.shape != (EXP_DIM,):
        raise InvalidArgumentError(f"theta_exp must have {EXP_DIM} entries, got {texp.shape}")
    if np.abs(tid).max() > 1 + 1e-9 or np.abs(texp).max() > 1 + 1e-9:
        raise InvalidArgumentError("parameters must lie in [-1, 1]")

    p_id = dict(zip(ID_PARAM_NAMES, tid))
    p_ex = dict(zip(EXP_PARAM_NAMES, texp))

    ax = 0.58 + 0.10 * p_id["head_rx"]
    ay = 0.66 + 0.10 * p_id["head_ry"]
    az = 0.52 + 0.08 * p_id["head_rz"]
    skin = np.array([0.62 + 0.18 * p_id["skin_r"],
                     0.48 + 0.18 * p_id["skin_g"],
                     0.40 + 0.18 * p_id["skin_b"]])

    ex = 0.24 + 0.05 * p_id["eye_dist"]
    ey = 0.12 + 0.05 * p_id["eye_height"]

    def z_surf(x, y):
        return az * np.sqrt(max(0.0, 1.0 - (x / ax) ** 2 - (y / ay) ** 2))

    names: list[str] = []
    centers: list = []
    axes: list = []
    amps: list = []
    colors: list = []

    def add(name, center, semi_axes, amp, color):
        names.append(name)
        centers.append(center)
        axes.append(semi_axes)
        amps.append(amp)
        colors.append(color)

    add("head", (0.0, 0.0, 0.0), (ax, ay, az), 30.0, skin)

    ez = 0.93 * z_surf(ex, ey)
    for side, sign in (("left", -1.0), ("right", 1.0)):
        cx = sign * ex
        add(f"eye_{side}", (cx, ey, ez), (EYE_RADIUS,) * 3, 80.0, (0.93, 0.93, 0.90))
        gy = p_ex[f"gaze_{side}_yaw"]
        gp = p_ex[f"gaze_{side}_pitch"]
        add(f"pupil_{side}",
            (cx + 0.075 * gy, ey + 0.06 * gp, ez + 0.085),
            (PUPIL_RADIUS,) * 3, 300.0, (0.06, 0.05, 0.08))
        brow_y = ey + 0.17 + 0.07 * p_ex[f"brow_{side}"]
        add(f"brow_{side}", (cx, brow_y, 0.92 * z_surf(cx, brow_y)),
            (0.14, 0.035, 0.06), 120.0, (0.10, 0.07, 0.05))

    mouth_y = -0.30
    zm = 0.92 * z_surf(0.0, mouth_y)
    mw = 0.26 + 0.06 * p_id["mouth_width"]
    mh = 0.035 + 0.11 * _smooth_relu(p_ex["mouth_open"])
    mx = 0.07 * p_ex["mouth_asym"]
    add("mouth", (mx, mouth_y, zm), (mw, mh, 0.06), 150.0, (0.42, 0.10, 0.12))

    t_amt = _smooth_relu(p_ex["tongue"])
    add("tongue", (mx, mouth_y - 0.03, zm + 0.05 + 0.04 * t_amt),
        (0.09, 0.05, 0.08), 220.0 * t_amt, (0.82, 0.42, 0.47))

    hat_amp = 100.0 / (1.0 + np.exp(-8.0 * p_id["accessory"]))
    add("hat", (0.0, 0.85 * ay, 0.0), (0.40, 0.10, 0.40), hat_amp, (0.15, 0.20, 0.60))

    return HeadField(
        theta_id=tid.astype(np.float32),
        theta_exp=texp.astype(np.float32),
        centers=np.asarray(centers, dtype=np.float64),
        inv_axes_sq=1.0 / np.asarray(axes, dtype=np.float64) ** 2,
        amplitudes=np.asarray(amps, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float64),
        names=tuple(names),
    )


def gt_render(scene: HeadField, cam: Camera, resolution: int | None = None,
              n_samples: int = GT_SAMPLES, background=BACKGROUND,
              return_aux: bool = False):
    """Ground-truth view: dense-quadrature compositing of the analytic field."""
    if resolution is not None and cam.resolution != (resolution, resolution):
        cam = cam.with_resolution((resolution, resolution))
    return quadrature_render_np(scene.density_color, cam, n_samples, background,
                                return_aux=return_aux)


def project_points(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Project world points to pixel coordinates (x, y), float."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = cam.extrinsic.rotation_matrix()
    local = (pts - cam.extrinsic.translation) @ r
    z = -local[:, 2]
    z = np.where(np.abs(z) < 1e-9, 1e-9, z)
    w, h = cam.resolution
    px, py = cam.principal_point
    u = px + cam.focal * local[:, 0] / z
    v = py - cam.focal * (local[:, 1] / z) * (w / h)
    return np.stack([u * w, v * h], axis=1)


def landmarks2d(scene: HeadField, cam: Camera) -> np.ndarray:
    """Projected feature-blob centers, shape (8, 2) in pixels."""
    return project_points(cam, scene.landmarks3d()).astype(np.float32)


def eye_mask(scene: HeadField, cam: Camera, resolution: int) -> np.ndarray:
    """Boolean mask of the two eye regions as seen from `cam`."""
    if cam.resolution != (resolution, resolution):
        cam = cam.with_resolution((resolution, resolution))
    lm3 = scene.landmarks3d()
    idx = {n: i for i, n in enumerate(LANDMARK_NAMES)}
    eye_centers = lm3[[idx["eye_left"], idx["eye_right"]]]
    pix = project_points(cam, eye_centers)
    dist = np.linalg.norm(eye_centers - cam.extrinsic.translation, axis=1)
    r_pix = cam.focal * EYE_RADIUS / dist * resolution * 1.5
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    mask = np.zeros((resolution, resolution), dtype=bool)
    for (cx, cy), r in zip(pix, r_pix):
        mask |= (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r ** 2
    return mask


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 4
    n_expressions: int = 4
    n_views: int = 2
    resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("n_identities", "n_expressions", "n_views", "resolution"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")

    @property
    def n_frames(self) -> int:
        return self.n_identities * self.n_expressions * self.n_views


def _sample_camera(rng: np.random.Generator, resolution: int) -> Camera:
    azim = rng.uniform(-55, 55) * np.pi / 180
    elev = rng.uniform(-20, 20) * np.pi / 180
    radius = rng.uniform(2.4, 2.8)
    eye = np.array([
        radius * np.cos(elev) * np.sin(azim),
        radius * np.sin(elev),
        radius * np.cos(elev) * np.cos(azim),
    ])
    return Camera.look_at(eye, (0.0, 0.0, 0.0), focal=CANONICAL_FOCAL,
                          resolution=(resolution, resolution))


class HeadDataset:
    """In-memory synthetic dataset: uint8 images + parameters + cameras."""

    def __init__(self, spec: DatasetSpec, images: np.ndarray, theta_id: np.ndarray,
                 theta_exp: np.ndarray, camera_params: np.ndarray):
        self.spec = spec
        self.images = images              # (I, E, V, H, W, 3) uint8
        self.theta_id = theta_id          # (I, ID_DIM) f32
        self.theta_exp = theta_exp        # (I, E, EXP_DIM) f32
        self.camera_params = camera_params  # (I, E, V, 10) f32: pose7, focal, pp2

    @property
    def n_identities(self) -> int:
        return self.spec.n_identities

    @property
    def n_expressions(self) -> int:
        return self.spec.n_expressions

    @property
    def n_views(self) -> int:
        return self.spec.n_views

    def image(self, i: int, e: int, v: int) -> np.ndarray:
        """Float image in [0, 1], (H, W, 3)."""
        return self.images[i, e, v].astype(np.float32) / 255.0

    def camera(self, i: int, e: int, v: int) -> Camera:
        p = self.camera_params[i, e, v]
        res = self.spec.resolution
        return Camera(RigidPose(p[:4], p[4:7]), float(p[7]),
                      (float(p[8]), float(p[9])), (res, res))

    def scene(self, i: int, e: int) -> HeadField:
        return build_scene(self.theta_id[i], self.theta_exp[i, e])

    def landmarks(self, i: int, e: int, v: int) -> np.ndarray:
        return landmarks2d(self.scene(i, e), self.camera(i, e, v))

    def frames(self):
        for i in range(self.n_identities):
            for e in range(self.n_expressions):
                for v in range(self.n_views):
                    yield i, e, v


def gen_dataset(spec: DatasetSpec, progress: bool = False) -> HeadDataset:
    """Render the full identity x expression x view grid."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    images = np.zeros((spec.n_identities, spec.n_expressions, spec.n_views, res, res, 3),
                      dtype=np.uint8)
    theta_id = rng.uniform(-1, 1, size=(spec.n_identities, ID_DIM)).astype(np.float32)
    theta_exp = rng.uniform(-1, 1, size=(spec.n_identities, spec.n_expressions, EXP_DIM)).astype(np.float32)
    cam_params = np.zeros((spec.n_identities, spec.n_expressions, spec.n_views, 10),
                          dtype=np.float32)
    for i in range(spec.n_identities):
        for e in range(spec.n_expressions):
            scene = build_scene(theta_id[i], theta_exp[i, e])
            for v in range(spec.n_views):
                cam = _sample_camera(rng, res)
                img = gt_render(scene, cam)
                images[i, e, v] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                cam_params[i, e, v, :4] = cam.extrinsic.quaternion
                cam_params[i, e, v, 4:7] = cam.extrinsic.translation
                cam_params[i, e, v, 7] = cam.focal
                cam_params[i, e, v, 8:10] = cam.principal_point
        if progress:
            print(f"  identity {i + 1}/{spec.n_identities}", flush=True)
    return HeadDataset(spec, images, theta_id, theta_exp, cam_params)


@dataclass(frozen=True)
class SamplePair:
    """Stage-1 sampling unit: source, same-identity driver, cross-identity driver."""

    source: tuple[int, int, int]
    driver: tuple[int, int, int]
    cross: tuple[int, int, int]

    def validate(self):
        if self.source[0] != self.driver[0]:
            raise InvalidStateError("source and same-video driver must share identity")
        if self.cross[0] == self.source[0]:
            raise InvalidStateError("cross driver must come from a different identity")


def sample_stage1_batch(ds: HeadDataset, batch_size: int, seed: int) -> list[SamplePair]:
    """Uniform stage-1 pairs, reproducible by seed."""
    if ds.n_identities < 2:
        raise InvalidStateError("stage-1 sampling needs at least 2 identities for cross pairs")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(batch_size):
        i = int(rng.integers(ds.n_identities))
        e_s, v_s = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        e_d, v_d = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        j = int(rng.integers(ds.n_identities - 1))
        if j >= i:
            j += 1
        e_c, v_c = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        pair = SamplePair((i, e_s, v_s), (i, e_d, v_d), (j, e_c, v_c))
        pair.validate()
        out.append(pair)
    return out


@dataclass
class Stage2Record:
    source: tuple[int, int, int]        # x_s1 frame indices in the hires dataset
    gt: tuple[int, int, int]            # x_d1 frame, same identity
    driver_synthetic: np.ndarray        # network-rendered cross driver, (h, w, 3) float
    driver_identity: int                # s2 identity used to synthesize the driver
    source_from_gt_render: bool = True  # provenance flags: never network output
    gt_from_gt_render: bool = True


def synthesize_stage2_dataset(stage1_model, ds: HeadDataset, n_records: int,
                              seed: int = 0) -> list[Stage2Record]:
    """Cross-reenactment drivers from the stage-1 model; real source/ground truth.

    stage1_model must expose reenact_image(source_img, driver_img, cam) -> float
    image; source and ground truth stay gt_render frames of the same identity.
    """
    if stage1_model is None:
        raise InvalidStateError("synthesize_stage2_dataset requires a trained stage-1 model")
    if ds.n_identities < 2:
        raise InvalidStateError("need >= 2 identities to build cross drivers")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_records):
        i = int(rng.integers(ds.n_identities))
        e_s, v_s = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        e_d, v_d = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        s2 = int(rng.integers(ds.n_identities - 1))
        if s2 >= i:
            s2 += 1
        e_2, v_2 = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
        cam = ds.camera(i, e_d, v_d)
        r = getattr(stage1_model, "input_res", None)
        if r is not None:
            cam = cam.with_resolution((r, r))
        driver = stage1_model.reenact_image(
            ds.image(s2, e_2, v_2), ds.image(i, e_d, v_d), cam)
        records.append(Stage2Record(
            source=(i, e_s, v_s), gt=(i, e_d, v_d),
            driver_synthetic=np.asarray(driver, dtype=np.float32),
            driver_identity=s2))
    return records


def select_frames(frames, landmarks: np.ndarray, k: int, seed: int = 0,
                  iterations: int = 20) -> np.ndarray:
    """Cluster landmark vectors with k centers; per center keep the nearest frame.

    Returns indices into `frames`, length k, duplicates resolved by
    next-nearest. The paper-scale default is k = 200.
    """
    n = len(frames)
    if k <= 0:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    if k > n:
        raise InvalidArgumentError(f"k = {k} exceeds frame count {n}")
    x = np.asarray(landmarks, dtype=np.float64).reshape(n, -1)
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iterations):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)  # (n, k)
        assign = d.argmin(1)
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(0)
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    used = np.zeros(n, dtype=bool)
    selected = np.empty(k, dtype=np.int64)
    for c in range(k):
        order = np.argsort(d[:, c], kind="stable")
        pick = next(i for i in order if not used[i])
        used[pick] = True
        selected[c] = pick
    return selected


SELECT_FRAMES_PAPER_DEFAULT_K = 200


# ---------------------------------------------------------------------------
# VXPD container

_MAGIC = b"VXPD"
_VERSION = 1


def save_dataset(ds: HeadDataset, path) -> None:
    spec = ds.spec
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<III", spec.n_identities, spec.n_expressions, spec.n_views))
        f.write(struct.pack("<Q", spec.seed))
        f.write(struct.pack("<Q", spec.n_frames))
        for i, e, v in ds.frames():
            f.write(struct.pack("<III", i, e, v))
            f.write(struct.pack("<HH", spec.resolution, spec.resolution))
            f.write(ds.camera_params[i, e, v].astype("<f4").tobytes())
            tid = ds.theta_id[i].astype("<f4")
            f.write(struct.pack("<I", len(tid)))
            f.write(tid.tobytes())
            tex = ds.theta_exp[i, e].astype("<f4")
            f.write(struct.pack("<I", len(tex)))
            f.write(tex.tobytes())
            f.write(ds.images[i, e, v].tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(
                f"unexpected end of file: wanted {n} bytes, "
                f"{len(self.data) - self.off} remain", offset=self.off)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_dataset(path) -> HeadDataset:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.read(4) != _MAGIC:
        raise FormatError("bad magic: not a VXPD dataset container", offset=0)
    (version,) = r.unpack("<H")
    if version > _VERSION:
        raise FormatError(f"unsupported future container version {version}", offset=4)
    n_id, n_exp, n_view = r.unpack("<III")
    (seed,) = r.unpack("<Q")
    (count,) = r.unpack("<Q")
    if count != n_id * n_exp * n_view:
        raise FormatError(f"record count {count} does not match grid "
                          f"{n_id}x{n_exp}x{n_view}", offset=r.off - 8)
    images = None
    theta_id = np.zeros((n_id, ID_DIM), np.float32)
    theta_exp = None
    cam_params = np.zeros((n_id, n_exp, n_view, 10), np.float32)
    res = None
    for _ in range(count):
        i, e, v = r.unpack("<III")
        h, w = r.unpack("<HH")
        if res is None:
            res = h
            images = np.zeros((n_id, n_exp, n_view, h, w, 3), np.uint8)
        if h != res or w != res:
            raise FormatError(f"inconsistent image size {h}x{w}", offset=r.off - 4)
        cam_params[i, e, v] = np.frombuffer(r.read(40), dtype="<f4")
        (lid,) = r.unpack("<I")
        tid = np.frombuffer(r.read(4 * lid), dtype="<f4")
        if lid != ID_DIM:
            raise FormatError(f"theta_id length {lid} != {ID_DIM}", offset=r.off - 4 * lid)
        theta_id[i] = tid
        (lex,) = r.unpack("<I")
        tex = np.frombuffer(r.read(4 * lex), dtype="<f4")
        if lex != EXP_DIM:
            raise FormatError(f"theta_exp length {lex} != {EXP_DIM}", offset=r.off - 4 * lex)
        if theta_exp is None:
            theta_exp = np.zeros((n_id, n_exp, EXP_DIM), np.float32)
        theta_exp[i, e] = tex
        images[i, e, v] = np.frombuffer(r.read(h * w * 3), np.uint8).reshape(h, w, 3)
    if r.off != len(r.data):
        raise FormatError(f"{len(r.data) - r.off} trailing bytes after last record",
                          offset=r.off)
    spec = DatasetSpec(n_id, n_exp, n_view, int(res), int(seed))
    return HeadDataset(spec, images, theta_id, theta_exp, cam_params)
