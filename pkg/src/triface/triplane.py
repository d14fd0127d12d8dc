"""Tri-plane radiance fields: sampling, decoding, and volumetric rendering.

A field is three axis-aligned feature planes plus a small MLP decoder. A 3D
point (x, y, z) gathers bilinear features T0(x, y), T1(y, z), T2(z, x); the
decoder maps the concatenated features to color (sigmoid, [0,1]^3) and
density (softplus, >= 0).

Rendering integrates density/color along camera rays with discrete
transmittance compositing over equal bins of [t_near, t_far]:

    alpha_i = 1 - exp(-sigma_i * delta),   T_i = prod_{j<i} (1 - alpha_j)
    pixel   = sum_i T_i * alpha_i * c_i + T_final * background

Samples sit at bin midpoints, or uniformly jittered inside their bin when
stratified. Since bin widths partition [t_near, t_far] exactly, constant
density composites to the closed-form slab answer at any sample count.

`render` is the differentiable torch path; `reference_render` is a separate
non-differentiable dense-quadrature oracle whose compositing runs in numpy
(shared with the synthetic world's ground-truth renderer).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError
from .geometry import Camera, generate_rays

DEFAULT_PLANE_RES = 32
DEFAULT_CHANNELS = 16

# Named presets: full-scale resolutions alongside the desk-scale defaults.
RESOLUTION_PRESETS = {
    "full": {"plane_res": 128, "render_low": 128, "render_high": 256, "superres_out": 512,
             "patch": 172},
    "toy": {"plane_res": 32, "render_low": 32, "render_high": 64, "superres_out": 128,
            "patch": 44},
}


@dataclass
class TriPlane:
    """Three feature planes stacked as one tensor of shape (3, H, W, C)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InvalidArgumentError(f"tri-plane tensor must be (3, H, W, C), got {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise InvalidArgumentError("tri-plane contains non-finite values")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @classmethod
    def zeros(cls, res: int = DEFAULT_PLANE_RES, channels: int = DEFAULT_CHANNELS,
              dtype=torch.float32) -> "TriPlane":
        return cls(torch.zeros(3, res, res, channels, dtype=dtype))

    @classmethod
    def randn(cls, res: int = DEFAULT_PLANE_RES, channels: int = DEFAULT_CHANNELS,
              scale: float = 0.5, seed: int = 0, dtype=torch.float32) -> "TriPlane":
        g = torch.Generator().manual_seed(seed)
        return cls(torch.randn(3, res, res, channels, generator=g, dtype=dtype) * scale)


class Decoder(nn.Module):
    """MLP mapping concatenated plane features to (color, density).

    tanh activations keep the whole render path smooth for finite-difference
    gradient checks; density uses softplus, color a sigmoid squash.
    """

    def __init__(self, channels: int = DEFAULT_CHANNELS, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.Linear(3 * channels, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
        )
        self.color_head = nn.Linear(hidden, 3)
        self.density_head = nn.Linear(hidden, 1)
        nn.init.constant_(self.density_head.bias, -0.5)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.net(feat)
        color = torch.sigmoid(self.color_head(h))
        density = F.softplus(self.density_head(h).squeeze(-1))
        return color, density


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 48
    render_resolution: int = 32
    background_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = True
    patch: tuple[int, int, int] | None = None  # (x, y, size) in pixels
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise InvalidArgumentError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if self.render_resolution < 1:
            raise InvalidArgumentError("render_resolution must be >= 1")
        if self.patch is not None:
            x, y, s = self.patch
            r = self.render_resolution
            if s < 1 or x < 0 or y < 0 or x + s > r or y + s > r:
                raise InvalidArgumentError(f"patch {self.patch} does not fit in {r}x{r} frame")

    def with_patch(self, patch: tuple[int, int, int] | None) -> "RenderConfig":
        return replace(self, patch=patch)


@dataclass
class RenderResult:
    rgb: torch.Tensor    # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)


def sample_plane(plane: torch.Tensor, u, v) -> torch.Tensor:
    """Bilinear lookup of a (H, W, C) plane at (u, v) in [-1, 1]^2.

    u indexes the width axis, v the height axis; -1 maps to index 0 and +1 to
    the last index. Out-of-range queries clamp to the border. Differentiable
    w.r.t. the plane and the query coordinates.
    """
    if plane.ndim != 3:
        raise InvalidArgumentError(f"plane must be (H, W, C), got {tuple(plane.shape)}")
    h, w, _ = plane.shape
    u = torch.as_tensor(u, dtype=plane.dtype)
    v = torch.as_tensor(v, dtype=plane.dtype)
    gu = (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (w - 1)
    gv = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (h - 1)
    i0 = gu.detach().floor().clamp(0, max(w - 2, 0)).long()
    j0 = gv.detach().floor().clamp(0, max(h - 2, 0)).long()
    fu = (gu - i0).unsqueeze(-1)
    fv = (gv - j0).unsqueeze(-1)
    i1 = (i0 + 1).clamp(max=w - 1)
    j1 = (j0 + 1).clamp(max=h - 1)
    p00 = plane[j0, i0]
    p01 = plane[j0, i1]
    p10 = plane[j1, i0]
    p11 = plane[j1, i1]
    return (p00 * (1 - fu) * (1 - fv) + p01 * fu * (1 - fv)
            + p10 * (1 - fu) * fv + p11 * fu * fv)


def decode_point(tp: TriPlane, dec: Decoder, p) -> tuple[torch.Tensor, torch.Tensor]:
    """Color and density at a 3D point, via the plane-axis assignment
    T0(x, y), T1(y, z), T2(z, x)."""
    p = torch.as_tensor(p, dtype=tp.data.dtype)
    if not bool(torch.isfinite(p).all()):
        raise InvalidArgumentError("query point must be finite")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    f0 = sample_plane(tp.data[0], x, y)
    f1 = sample_plane(tp.data[1], y, z)
    f2 = sample_plane(tp.data[2], z, x)
    feat = torch.cat([f0, f1, f2], dim=-1)
    return dec(feat)


def _planes_channels_first(planes: torch.Tensor) -> torch.Tensor:
    # (B, 3, H, W, C) -> (B, 3, C, H, W), contiguous for grid_sample
    return planes.permute(0, 1, 4, 2, 3).contiguous()


# Points are decoded in constant-size padded blocks so every grid_sample and
# GEMM call sees one fixed shape. CPU BLAS picks kernels by shape; a fixed
# block keeps results bitwise identical whether a point arrives via a full
# frame, a patch, or any other grouping.
DECODE_BLOCK = 4096


def decode_points_batch(planes_cf: torch.Tensor, dec: Decoder,
                        pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized decode of (B, P, 3) points against (B, 3, C, H, W) planes.

    Uses grid_sample (align_corners=True, border padding), which matches
    sample_plane's bilinear semantics.
    """
    b, p = pts.shape[0], pts.shape[1]
    out_colors = []
    out_densities = []
    for bi in range(b):
        planes_one = planes_cf[bi:bi + 1]
        colors = []
        densities = []
        for start in range(0, p, DECODE_BLOCK):
            n = min(DECODE_BLOCK, p - start)
            chunk = pts[bi, start:start + n]
            if n < DECODE_BLOCK:
                chunk = torch.cat([chunk, chunk.new_zeros(DECODE_BLOCK - n, 3)])
            block = chunk.unsqueeze(0)  # (1, BLOCK, 3)
            x, y, z = block[..., 0], block[..., 1], block[..., 2]
            feats = []
            for i, (gu, gv) in enumerate(((x, y), (y, z), (z, x))):
                grid = torch.stack([gu, gv], dim=-1).unsqueeze(2)  # (1, BLOCK, 1, 2)
                f = F.grid_sample(planes_one[:, i], grid, mode="bilinear",
                                  padding_mode="border", align_corners=True)
                feats.append(f.squeeze(-1).transpose(1, 2))  # (1, BLOCK, C)
            feat = torch.cat(feats, dim=-1)
            color, density = dec(feat)
            colors.append(color[0, :n])
            densities.append(density[0, :n])
        out_colors.append(torch.cat(colors))
        out_densities.append(torch.cat(densities))
    return torch.stack(out_colors), torch.stack(out_densities)


def _ray_tensors(cam: Camera, dtype):
    rays = generate_rays(cam)
    o = torch.from_numpy(rays.origins.astype(np.float64)).to(dtype)
    d = torch.from_numpy(rays.directions.astype(np.float64)).to(dtype)
    tn = torch.from_numpy(rays.t_near.astype(np.float64)).to(dtype)
    tf = torch.from_numpy(rays.t_far.astype(np.float64)).to(dtype)
    valid = torch.from_numpy(rays.valid.copy())
    return o, d, tn, tf, valid


def render_batch(planes: torch.Tensor, dec: Decoder, cams: list[Camera],
                 cfg: RenderConfig, return_aux: bool = False):
    """Differentiable render of B tri-planes at B cameras.

    planes: (B, 3, H, W, C). Returns rgb (B, R, R, 3), alpha (B, R, R),
    depth (B, R, R) where R is cfg.render_resolution (or the patch size when
    cfg.patch is set). Sample jitter is drawn for the full frame and sliced
    for patches, so a patch render is bitwise equal to the crop of the full
    render under the same seed.
    """
    if planes.ndim != 5 or planes.shape[1] != 3:
        raise InvalidArgumentError(f"planes must be (B, 3, H, W, C), got {tuple(planes.shape)}")
    b = planes.shape[0]
    if len(cams) != b:
        raise InvalidArgumentError("one camera per tri-plane required")
    dtype = planes.dtype
    res = cfg.render_resolution
    s = cfg.samples_per_ray

    origins, dirs, tns, tfs, valids = [], [], [], [], []
    for cam in cams:
        if cam.resolution != (res, res):
            cam = cam.with_resolution((res, res))
        o, d, tn, tf, valid = _ray_tensors(cam, dtype)
        origins.append(o)
        dirs.append(d)
        tns.append(tn)
        tfs.append(tf)
        valids.append(valid)
    o = torch.stack(origins)   # (B, N, 3)
    d = torch.stack(dirs)
    tn = torch.stack(tns)      # (B, N)
    tf = torch.stack(tfs)
    valid = torch.stack(valids)

    g = torch.Generator().manual_seed(cfg.seed)
    if cfg.stratified:
        jitter = torch.rand(b, res, res, s, generator=g, dtype=dtype)
    else:
        jitter = torch.full((b, res, res, s), 0.5, dtype=dtype)

    if cfg.patch is not None:
        px, py, ps = cfg.patch
        idx_rows = torch.arange(py, py + ps)
        idx = (idx_rows.unsqueeze(1) * res + torch.arange(px, px + ps).unsqueeze(0)).reshape(-1)
        o = o[:, idx]
        d = d[:, idx]
        tn = tn[:, idx]
        tf = tf[:, idx]
        valid = valid[:, idx]
        jitter = jitter[:, py:py + ps, px:px + ps, :]
        out_res = ps
    else:
        out_res = res

    n = o.shape[1]
    jitter = jitter.reshape(b, n, s)
    delta = ((tf - tn) / s).unsqueeze(-1)                      # (B, N, 1)
    steps = torch.arange(s, dtype=dtype).reshape(1, 1, s)
    t = tn.unsqueeze(-1) + (steps + jitter) * delta            # (B, N, S)
    pts = o.unsqueeze(2) + t.unsqueeze(-1) * d.unsqueeze(2)    # (B, N, S, 3)

    planes_cf = _planes_channels_first(planes)
    color, density = decode_points_batch(planes_cf, dec, pts.reshape(b, n * s, 3))
    color = color.reshape(b, n, s, 3)
    density = density.reshape(b, n, s)

    background = torch.as_tensor(cfg.background_color, dtype=dtype)
    alpha = 1.0 - torch.exp(-density * delta)
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    t_excl = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = alpha * t_excl
    t_final = trans[..., -1]
    rgb = (weights.unsqueeze(-1) * color).sum(dim=-2) + t_final.unsqueeze(-1) * background
    alpha_map = 1.0 - t_final
    depth = (weights * t).sum(dim=-1)

    vm = valid.to(dtype)
    rgb = torch.where(valid.unsqueeze(-1), rgb, background.expand_as(rgb))
    alpha_map = alpha_map * vm
    depth = depth * vm

    rgb = rgb.reshape(b, out_res, out_res, 3)
    alpha_map = alpha_map.reshape(b, out_res, out_res)
    depth = depth.reshape(b, out_res, out_res)
    if return_aux:
        return rgb, alpha_map, depth, {"weights": weights, "t": t, "valid": valid}
    return rgb, alpha_map, depth


def render(tp: TriPlane, dec: Decoder, cam: Camera, cfg: RenderConfig,
           return_aux: bool = False):
    """Render one tri-plane; see render_batch for semantics."""
    out = render_batch(tp.data.unsqueeze(0), dec, [cam], cfg, return_aux=return_aux)
    if return_aux:
        rgb, alpha, depth, aux = out
        return RenderResult(rgb[0], alpha[0], depth[0]), aux
    rgb, alpha, depth = out
    return RenderResult(rgb[0], alpha[0], depth[0])


def render_patch(tp: TriPlane, dec: Decoder, cam: Camera, cfg: RenderConfig) -> RenderResult:
    """Render only cfg.patch; pixel-identical to the same crop of a full render."""
    if cfg.patch is None:
        raise InvalidArgumentError("render_patch requires cfg.patch")
    return render(tp, dec, cam, cfg)


def quadrature_render_np(field, cam: Camera, n_samples: int,
                         background=(1.0, 1.0, 1.0), chunk_rays: int = 4096,
                         return_aux: bool = False):
    """Dense fixed-step midpoint quadrature of the compositing integral (numpy).

    field(pts (P,3) float32) -> (rgb (P,3), sigma (P,)). Deterministic and
    non-differentiable; shared by the tri-plane reference renderer and the
    synthetic world's ground-truth renderer.
    """
    rays = generate_rays(cam)
    n = len(rays)
    bg = np.asarray(background, dtype=np.float32)
    img = np.tile(bg, (n, 1))
    alpha_out = np.zeros(n, dtype=np.float32)
    depth_out = np.zeros(n, dtype=np.float32)

    valid_idx = np.flatnonzero(rays.valid)
    steps = (np.arange(n_samples, dtype=np.float32) + 0.5)
    for start in range(0, len(valid_idx), chunk_rays):
        idx = valid_idx[start:start + chunk_rays]
        o = rays.origins[idx].astype(np.float32)
        d = rays.directions[idx].astype(np.float32)
        tn = rays.t_near[idx].astype(np.float32)[:, None]
        tf = rays.t_far[idx].astype(np.float32)[:, None]
        delta = (tf - tn) / n_samples
        t = tn + steps[None, :] * delta                       # (n, S)
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        rgb, sigma = field(pts.reshape(-1, 3))
        rgb = rgb.reshape(len(idx), n_samples, 3)
        sigma = sigma.reshape(len(idx), n_samples)
        alpha = 1.0 - np.exp(-sigma * delta)
        trans = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((len(idx), 1), np.float32), trans[:, :-1]], axis=1)
        w = alpha * t_excl
        t_final = trans[:, -1]
        img[idx] = (w[..., None] * rgb).sum(axis=1) + t_final[:, None] * bg
        alpha_out[idx] = 1.0 - t_final
        depth_out[idx] = (w * t).sum(axis=1)

    h, wid = cam.resolution[1], cam.resolution[0]
    img = img.reshape(h, wid, 3)
    if return_aux:
        return img, alpha_out.reshape(h, wid), depth_out.reshape(h, wid)
    return img


def reference_render(tp: TriPlane, dec: Decoder, cam: Camera, n_samples: int,
                     background=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Ground-truth renderer for `render`: dense midpoint quadrature.

    Deterministic, non-differentiable, numpy compositing. Requires
    n_samples >= 256.
    """
    if n_samples < 256:
        raise InvalidArgumentError(f"reference_render needs n_samples >= 256, got {n_samples}")
    dtype = tp.data.dtype
    planes_cf = _planes_channels_first(tp.data.unsqueeze(0))

    def field(pts_np: np.ndarray):
        with torch.no_grad():
            pts = torch.from_numpy(pts_np).to(dtype).unsqueeze(0)
            color, density = decode_points_batch(planes_cf, dec, pts)
        return (color[0].to(torch.float32).numpy(), density[0].to(torch.float32).numpy())

    img = quadrature_render_np(field, cam, n_samples, background)
    return torch.from_numpy(img)
