"""Evaluation metrics and reenactment reports.

PSNR and SSIM follow the standard definitions (SSIM: 11x11 Gaussian window,
sigma 1.5, K1=0.01, K2=0.03, dynamic range 1, valid window positions).
Identity similarity is the cosine of frozen identity-embedder outputs.
Expression distance is a proxy: a ridge probe maps frontal renders to the
synthetic expression parameters, and AED is the mean absolute parameter
error. Pose distance is geodesic rotation angle plus translation distance
between the rendered and ground-truth poses.

LPIPS, FID, and AKD are intentionally omitted (their pretrained backbones
are out of scope) and reports list them as omitted rather than reporting
substitute numbers under the same name.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, InvalidStateError
from .geometry import RigidPose
from .synthdata import EXP_DIM, HeadDataset, build_scene, canonical_camera, gt_render
from .training import IdentityEmbedder, ReenactModel, chw

OMITTED_METRICS = ("LPIPS", "FID", "AKD")

PSNR_CAP_DB = 100.0


def _as_float_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def metric_psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    x, y = _as_float_array(a), _as_float_array(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"PSNR shape mismatch: {x.shape} vs {y.shape}")
    mse = float(((x - y) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse), PSNR_CAP_DB))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2D valid-mode correlation via stride tricks (float64)."""
    kh, kw = kernel.shape
    windows = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def metric_ssim(a, b, window: int = 11, sigma: float = 1.5,
                k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a Gaussian window, averaged over channels
    and valid window positions. Dynamic range is 1."""
    x, y = _as_float_array(a), _as_float_array(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"SSIM shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    if x.shape[0] < window or x.shape[1] < window:
        raise InvalidArgumentError(f"image smaller than SSIM window {window}")
    kernel = _gaussian_kernel(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mx = _filter_valid(xc, kernel)
        my = _filter_valid(yc, kernel)
        mxx = _filter_valid(xc * xc, kernel)
        myy = _filter_valid(yc * yc, kernel)
        mxy = _filter_valid(xc * yc, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def metric_csim_proxy(a, b, embedder: IdentityEmbedder) -> float:
    """Cosine similarity of identity embeddings (unit-norm by construction)."""
    if embedder is None:
        raise InvalidStateError("identity embedder missing")

    def embed(img):
        if isinstance(img, np.ndarray):
            img = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
        if img.ndim == 3:
            img = img.unsqueeze(0)
        if img.shape[-1] == 3 and img.shape[1] != 3:
            img = chw(img)
        with torch.no_grad():
            return embedder(img)[0]

    return float((embed(a) * embed(b)).sum())


def rotation_geodesic(p: RigidPose, q: RigidPose) -> float:
    """Angle of the relative rotation, in [0, pi]."""
    dot = abs(float(np.dot(p.quaternion, q.quaternion)))
    return 2.0 * float(np.arccos(min(1.0, dot)))


def metric_apd(rendered_pose: RigidPose, gt_pose: RigidPose) -> float:
    """Geodesic rotation distance plus translation distance."""
    return rotation_geodesic(rendered_pose, gt_pose) + float(
        np.linalg.norm(rendered_pose.translation - gt_pose.translation))


class ExpressionProbe:
    """Ridge regression from frontal-render pixels to expression parameters."""

    def __init__(self, weights: np.ndarray, resolution: int):
        self.weights = weights  # (H*W*3 + 1, EXP_DIM)
        self.resolution = resolution

    @classmethod
    def fit(cls, images: np.ndarray, thetas: np.ndarray, ridge: float = 1e-3) -> "ExpressionProbe":
        n = images.shape[0]
        res = images.shape[1]
        x = images.reshape(n, -1).astype(np.float64)
        x = np.concatenate([x, np.ones((n, 1))], axis=1)
        y = thetas.astype(np.float64)
        xtx = x.T @ x + ridge * np.eye(x.shape[1])
        w = np.linalg.solve(xtx, x.T @ y)
        return cls(w, res)

    def predict(self, image) -> np.ndarray:
        img = _as_float_array(image)
        if img.ndim == 3:
            img = img[None]
        if img.shape[1] != self.resolution or img.shape[2] != self.resolution:
            raise InvalidArgumentError(
                f"probe expects {self.resolution}x{self.resolution} frontal renders")
        x = img.reshape(img.shape[0], -1)
        x = np.concatenate([x, np.ones((img.shape[0], 1))], axis=1)
        out = x @ self.weights
        return out[0] if out.shape[0] == 1 else out


def build_expression_probe(ds: HeadDataset, n_scenes: int = 600, seed: int = 0,
                           resolution: int = 32) -> ExpressionProbe:
    """Fit the probe on ground-truth frontal renders of random scenes drawn
    from the dataset's identity pool."""
    rng = np.random.default_rng(seed)
    cam = canonical_camera(resolution)
    imgs, thetas = [], []
    for _ in range(n_scenes):
        i = int(rng.integers(ds.n_identities))
        tex = rng.uniform(-1, 1, EXP_DIM)
        imgs.append(gt_render(build_scene(ds.theta_id[i], tex), cam))
        thetas.append(tex)
    return ExpressionProbe.fit(np.stack(imgs), np.stack(thetas))


def metric_aed_apd(probe: ExpressionProbe, pred_frontal, gt_theta_exp,
                   rendered_pose: RigidPose, gt_pose: RigidPose) -> tuple[float, float]:
    """(AED-proxy, APD): mean absolute probe-recovered expression error and
    pose distance. The probe-based proxy measures synthetic-parameter
    recovery, not the paper's pretrained-network expression distance."""
    if probe is None:
        raise InvalidStateError("expression probe missing; fit it before evaluating AED")
    theta_hat = probe.predict(pred_frontal)
    aed = float(np.abs(theta_hat - np.asarray(gt_theta_exp, dtype=np.float64)).mean())
    return aed, metric_apd(rendered_pose, gt_pose)


def laplacian_energy(img) -> float:
    """Mean absolute Laplacian response: a high-frequency energy measure."""
    x = torch.as_tensor(_as_float_array(img), dtype=torch.float32)
    if x.ndim == 3:
        x = chw(x.unsqueeze(0))
    k = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    k = k.view(1, 1, 3, 3).repeat(x.shape[1], 1, 1, 1)
    lap = F.conv2d(x, k, groups=x.shape[1])
    return float(lap.abs().mean())


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    METRIC_COLUMNS = ("psnr", "ssim", "csim", "aed", "apd")

    def aggregates(self) -> dict:
        out = {}
        for col in self.METRIC_COLUMNS:
            vals = [r[col] for r in self.rows if r.get(col) is not None]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def to_csv(self, path) -> None:
        agg = self.aggregates()
        with open(path, "w", newline="") as f:
            for k in sorted(self.metadata):
                f.write(f"# {k}={self.metadata[k]}\n")
            f.write(f"# omitted_metrics={','.join(OMITTED_METRICS)}\n")
            cols = ["pair"] + list(self.METRIC_COLUMNS)
            w = csv.writer(f)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["pair"]] + [("" if r.get(c) is None else repr(r[c]))
                                          for c in self.METRIC_COLUMNS])
            w.writerow(["mean"] + [("" if agg[c] is None else repr(agg[c]))
                                   for c in self.METRIC_COLUMNS])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def evaluate_model(model: ReenactModel, ds: HeadDataset, mode: str,
                   embedder: IdentityEmbedder, probe: ExpressionProbe,
                   max_pairs: int = 64, seed: int = 0,
                   metadata: dict | None = None) -> EvalReport:
    """Self-/cross-reenactment evaluation.

    Self mode: the first frame of each identity's sequence is the source and
    the remaining frames drive it (pixel metrics apply). Cross mode: drivers
    come from other identities (identity/expression/pose metrics only).
    """
    if mode not in ("self", "cross"):
        raise InvalidArgumentError(f"mode must be 'self' or 'cross', got {mode!r}")
    rng = np.random.default_rng(seed)
    rows = []
    canon = canonical_camera(probe.resolution)
    pairs = []
    if mode == "self":
        for i in range(ds.n_identities):
            frames = [(i, e, v) for e in range(ds.n_expressions)
                      for v in range(ds.n_views)]
            source, drivers = frames[0], frames[1:]
            pairs.extend((source, d) for d in drivers)
    else:
        all_ids = np.arange(ds.n_identities)
        for i in all_ids:
            source = (i, 0, 0)
            for _ in range(max(1, max_pairs // ds.n_identities)):
                j = int(rng.choice(all_ids[all_ids != i]))
                d = (j, int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views)))
                pairs.append((source, d))
    if len(pairs) > max_pairs:
        keep = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[k] for k in sorted(keep)]

    for source, driver in pairs:
        if mode == "cross" and source[0] == driver[0]:
            raise InvalidStateError("cross mode paired identical identities")
        src_img = ds.image(*source)
        drv_img = ds.image(*driver)
        drv_cam = ds.camera(*driver)
        out = model.reenact_image(src_img, drv_img, drv_cam)
        out_frontal = model.reenact_image(src_img, drv_img, canon)
        aed, apd = metric_aed_apd(probe, out_frontal, ds.theta_exp[driver[0], driver[1]],
                                  drv_cam.extrinsic, drv_cam.extrinsic)
        row = {
            "pair": f"{source[0]}.{source[1]}.{source[2]}->{driver[0]}.{driver[1]}.{driver[2]}",
            "csim": metric_csim_proxy(out, src_img, embedder),
            "aed": aed,
            "apd": apd,
        }
        if mode == "self":
            row["psnr"] = metric_psnr(out, drv_img)
            row["ssim"] = metric_ssim(out, drv_img)
        else:
            row["psnr"] = None
            row["ssim"] = None
        rows.append(row)
    return EvalReport(rows=rows, metadata={"mode": mode, "seed": seed,
                                           **(metadata or {})})
