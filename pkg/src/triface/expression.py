"""Expression encoding and residual cross-attention injection.

The driver image is encoded into a token sequence by a small vision
transformer. Per low-level lifting block, an injector runs self-attention
over the incoming token features and cross-attention against the expression
tokens, entering the lifting stream through a zero-initialized projection:

    F_i = B_i_low(F_{i-1}) + injector_i(F_{i-1}, expression_tokens)

Driver frontalization renders the driver's lifted field from the fixed
canonical frontal camera, stripping head pose before encoding; seeded
color-patch/masking augmentation fights identity leakage in stage 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgumentError, InvalidStateError
from .geometry import Camera
from .lifting import CrossAttention, LiftingNet, TransformerBlock, _single_image_to_batch
from .synthdata import canonical_camera
from .triplane import RenderConfig, TriPlane, render_batch

FRONTAL_RENDER_SAMPLES = 32


@dataclass(frozen=True)
class ExpressionConfig:
    input_res: int = 32
    token_patch: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4

    @property
    def n_tokens(self) -> int:
        return (self.input_res // self.token_patch) ** 2


@dataclass
class ExpressionVector:
    """Token sequence plus pooled summary."""

    tokens: torch.Tensor  # (n_tokens, width)
    pooled: torch.Tensor  # (width,)


class ExpressionEncoder(nn.Module):
    def __init__(self, cfg: ExpressionConfig = ExpressionConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.token_patch, stride=cfg.token_patch)
        self.pos_emb = nn.Parameter(torch.zeros(1, cfg.n_tokens, cfg.width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.width)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, R, R) -> expression tokens (B, n_tokens, width)."""
        r = self.cfg.input_res
        if images.shape[-2:] != (r, r) or images.shape[1] != 3:
            raise InvalidArgumentError(
                f"expression encoder expects (B, 3, {r}, {r}), got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_emb
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


def encode_expression(enc: ExpressionEncoder, driver_image) -> ExpressionVector:
    t = _single_image_to_batch(driver_image, enc.cfg.input_res)
    with torch.no_grad():
        tokens = enc(t)[0]
    return ExpressionVector(tokens=tokens, pooled=tokens.mean(dim=0))


class InjectorBlock(nn.Module):
    """Self-attention over the lifting tokens, cross-attention with the
    expression tokens, then a zero-initialized output projection."""

    def __init__(self, width: int = 64, heads: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.self_attn = TransformerBlock(width, heads).attn
        self.ln2 = nn.LayerNorm(width)
        self.cross_attn = CrossAttention(width, heads)
        self.out_proj = nn.Linear(width, width)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, f_prev: torch.Tensor, expr_tokens: torch.Tensor) -> torch.Tensor:
        x = f_prev + self.self_attn(self.ln1(f_prev))
        x = x + self.cross_attn(self.ln2(x), expr_tokens)
        return self.out_proj(x)


def make_injectors(lifter: LiftingNet, heads: int | None = None) -> nn.ModuleList:
    """One injector per low-level block, zero-initialized."""
    h = heads if heads is not None else lifter.cfg.heads
    return nn.ModuleList(
        InjectorBlock(lifter.cfg.width, h) for _ in range(lifter.cfg.depth_low))


def reenact_lift(lifter: LiftingNet, injectors: nn.ModuleList, enc: ExpressionEncoder,
                 source_image, driver_image) -> TriPlane:
    """Lift the source with every block output augmented by its injector's
    expression residual."""
    if len(injectors) != lifter.cfg.depth_low:
        raise InvalidStateError(
            f"{len(injectors)} injectors for {lifter.cfg.depth_low} lifting blocks")
    src = _single_image_to_batch(source_image, lifter.cfg.input_res)
    drv = _single_image_to_batch(driver_image, enc.cfg.input_res)
    with torch.no_grad():
        expr = enc(drv)
        planes = lifter(src, injectors=injectors, expr=expr)
    return TriPlane(planes[0])


def reenact_lift_batch(lifter: LiftingNet, injectors: nn.ModuleList,
                       enc: ExpressionEncoder, source: torch.Tensor,
                       driver: torch.Tensor) -> torch.Tensor:
    """Differentiable batched variant: (B,3,R,R) x2 -> planes (B,3,H,W,C)."""
    if len(injectors) != lifter.cfg.depth_low:
        raise InvalidStateError(
            f"{len(injectors)} injectors for {lifter.cfg.depth_low} lifting blocks")
    expr = enc(driver)
    return lifter(source, injectors=injectors, expr=expr)


def frontalize(lifter: LiftingNet, image, canonical_cam: Camera | None = None) -> torch.Tensor:
    """Render the lifted field from the fixed canonical frontal camera.

    The output camera is the same constant for every input, which is what
    removes head pose. Returns (R, R, 3).
    """
    cam = canonical_cam if canonical_cam is not None else canonical_camera(lifter.cfg.input_res)
    t = _single_image_to_batch(image, lifter.cfg.input_res)
    with torch.no_grad():
        planes = lifter(t)
        rgb, _, _ = render_batch(planes, lifter.decoder, [cam],
                                 _frontal_config(cam.resolution[0]))
    return rgb[0]


def frontalize_batch(lifter: LiftingNet, images: torch.Tensor,
                     canonical_cam: Camera | None = None) -> torch.Tensor:
    """(B, 3, R, R) -> frontalized renders (B, R, R, 3), no gradients."""
    cam = canonical_cam if canonical_cam is not None else canonical_camera(lifter.cfg.input_res)
    with torch.no_grad():
        planes = lifter(images)
        rgb, _, _ = render_batch(planes, lifter.decoder, [cam] * images.shape[0],
                                 _frontal_config(cam.resolution[0]))
    return rgb


def _frontal_config(res: int) -> RenderConfig:
    # deterministic midpoint sampling: frontalized drivers are a fixed
    # function of the input, independent of any training step
    return RenderConfig(samples_per_ray=FRONTAL_RENDER_SAMPLES, render_resolution=res,
                        stratified=False, seed=0)


@dataclass(frozen=True)
class AugmentConfig:
    color_patches: tuple[int, int] = (1, 3)   # inclusive count range
    masks: tuple[int, int] = (0, 2)
    area_range: tuple[float, float] = (0.05, 0.20)  # fraction of image area


def augment_driver(image, seed: int, cfg: AugmentConfig = AugmentConfig()):
    """Seeded color patches and zero masks on a (H, W, 3) image.

    Pixels outside the sampled rectangles are untouched; zero configured
    patches and masks return the input unchanged.
    """
    is_tensor = isinstance(image, torch.Tensor)
    img = image.clone() if is_tensor else np.array(image, copy=True)
    h, w = img.shape[0], img.shape[1]
    rng = np.random.default_rng(seed)
    n_color = int(rng.integers(cfg.color_patches[0], cfg.color_patches[1] + 1))
    n_mask = int(rng.integers(cfg.masks[0], cfg.masks[1] + 1))

    def rect():
        area = rng.uniform(*cfg.area_range) * h * w
        aspect = rng.uniform(0.5, 2.0)
        rh = int(np.clip(np.sqrt(area * aspect), 1, h))
        rw = int(np.clip(np.sqrt(area / aspect), 1, w))
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        return y, x, rh, rw

    for _ in range(n_color):
        y, x, rh, rw = rect()
        color = rng.uniform(0, 1, size=3)
        img[y:y + rh, x:x + rw] = torch.tensor(color, dtype=img.dtype) if is_tensor \
            else color.astype(img.dtype)
    for _ in range(n_mask):
        y, x, rh, rw = rect()
        img[y:y + rh, x:x + rw] = 0
    return img
