"""Image-to-triplane lifting network and its neutralizer variant.

The lifter has two branches: a patch-embedding transformer stack extracting
low-level token features F_i, and a small convolutional branch for
high-frequency detail. A fusion transformer merges both token streams and a
linear head expands tokens into the three feature planes.

The low-level blocks are the attachment points for two kinds of residual
module: expression injectors (added in parallel to each block's output) and
the neutralizer's extra self-attention blocks (applied after designated
blocks). Both use zero-initialized output projections, so a freshly built
variant reproduces the base lifter exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgumentError, NumericFailureError
from .features import PerceptualProxy
from .synthdata import HeadDataset
from .triplane import Decoder, RenderConfig, TriPlane, render_batch


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        assert width % heads == 0
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / self.head_dim ** 0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(out)


class CrossAttention(nn.Module):
    """Queries from the token stream, keys/values from a conditioning sequence."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        assert width % heads == 0
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        t = ctx.shape[1]
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(ctx).chunk(2, dim=-1)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / self.head_dim ** 0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class ZeroResidualBlock(nn.Module):
    """Self-attention block whose residual enters through a zero-initialized
    projection: the module is an exact identity at initialization."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        self.inner = TransformerBlock(width, heads)
        self.out_proj = nn.Linear(width, width)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.out_proj(self.inner(x))


@dataclass(frozen=True)
class LiftingConfig:
    input_res: int = 32
    token_patch: int = 4          # token grid = input_res / token_patch
    width: int = 64
    depth_low: int = 3
    depth_fuse: int = 2
    heads: int = 4
    plane_res: int = 32
    plane_channels: int = 16
    insert_positions: tuple[int, ...] = (0, 2)  # neutralizer inserts, after these blocks

    def __post_init__(self):
        if self.depth_low < 2:
            raise InvalidArgumentError("depth_low must be >= 2 (injectors attach per block)")
        if self.input_res % self.token_patch != 0:
            raise InvalidArgumentError("token_patch must divide input_res")
        if any(p < 0 or p >= self.depth_low for p in self.insert_positions):
            raise InvalidArgumentError("insert_positions out of range")

    @property
    def token_grid(self) -> int:
        return self.input_res // self.token_patch

    @property
    def n_tokens(self) -> int:
        return self.token_grid ** 2


class LiftingNet(nn.Module):
    """Single-image 3D lifting into a canonical tri-plane."""

    def __init__(self, cfg: LiftingConfig = LiftingConfig()):
        super().__init__()
        self.cfg = cfg
        g = cfg.token_grid
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.token_patch, stride=cfg.token_patch)
        self.pos_emb = nn.Parameter(torch.zeros(1, cfg.n_tokens, cfg.width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.low_blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth_low))
        # high-frequency conv branch, pooled to the token grid
        stride_total = cfg.input_res // g
        layers: list[nn.Module] = [nn.Conv2d(3, 32, 3, padding=1), nn.GELU()]
        s = stride_total
        ch = 32
        while s > 1:
            layers += [nn.Conv2d(ch, cfg.width if s == 2 else 32, 3, stride=2, padding=1),
                       nn.GELU()]
            ch = cfg.width if s == 2 else 32
            s //= 2
        self.high_branch = nn.Sequential(*layers)
        self.fuse_blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth_fuse))
        # token -> plane pixels: each token covers an up x up block of each plane
        self.up = cfg.plane_res // g
        if cfg.plane_res % g != 0:
            raise InvalidArgumentError("plane_res must be a multiple of the token grid")
        self.ln_out = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, self.up * self.up * 3 * cfg.plane_channels)
        # render decoder, trained jointly with the lifter
        self.decoder = Decoder(cfg.plane_channels)

    def expected_resolution(self) -> int:
        return self.cfg.input_res

    def low_tokens(self, images: torch.Tensor, injectors=None, expr=None,
                   inserts: dict[int, nn.Module] | None = None) -> torch.Tensor:
        """Run the low-level branch. Residual modules hook per block:
        F_i = B_i(F_{i-1}) + injector_i(F_{i-1}, expr), then any insert at i."""
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_emb
        for i, blk in enumerate(self.low_blocks):
            out = blk(x)
            if injectors is not None:
                out = out + injectors[i](x, expr)
            if inserts is not None and i in inserts:
                out = inserts[i](out)
            x = out
        return x

    def forward(self, images: torch.Tensor, injectors=None, expr=None,
                inserts: dict[int, nn.Module] | None = None) -> torch.Tensor:
        """images (B, 3, R, R) in [0,1] -> planes (B, 3, H, W, C)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise InvalidArgumentError(f"expected (B, 3, R, R) images, got {tuple(images.shape)}")
        r = self.cfg.input_res
        if images.shape[-2:] != (r, r):
            raise InvalidArgumentError(
                f"lifting expects {r}x{r} input, got {tuple(images.shape[-2:])}")
        b = images.shape[0]
        g = self.cfg.token_grid
        x = self.low_tokens(images, injectors, expr, inserts)
        x = x + self.high_branch(images).flatten(2).transpose(1, 2)
        for blk in self.fuse_blocks:
            x = blk(x)
        x = self.head(self.ln_out(x))  # (B, g*g, up*up*3*C)
        c = self.cfg.plane_channels
        up = self.up
        x = x.view(b, g, g, up, up, 3, c)
        x = x.permute(0, 5, 1, 3, 2, 4, 6)  # (B, 3, g, up, g, up, C)
        return x.reshape(b, 3, g * up, g * up, c)


def lift(net: LiftingNet, image) -> TriPlane:
    """Lift one image (H, W, 3) or (3, H, W) to its canonical tri-plane."""
    t = _single_image_to_batch(image, net.cfg.input_res)
    with torch.no_grad():
        planes = net(t)
    return TriPlane(planes[0])


def _single_image_to_batch(image, res: int) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if image.ndim != 3:
        raise InvalidArgumentError(f"expected one image, got shape {tuple(image.shape)}")
    if image.shape[-1] == 3 and image.shape[0] != 3:
        image = image.permute(2, 0, 1)
    if image.shape != (3, res, res):
        raise InvalidArgumentError(
            f"lifting expects 3x{res}x{res}, got {tuple(image.shape)}")
    return image.unsqueeze(0).contiguous()


class NeutralizerNet(nn.Module):
    """A lifter with extra self-attention blocks inside the low-level branch.

    Only the inserted blocks are trainable; the base lifter is a frozen copy.
    With the inserts' zero-initialized output projections, the forward pass
    equals the base lifter exactly.
    """

    def __init__(self, base: LiftingNet, insert_positions: tuple[int, ...] | None = None):
        super().__init__()
        self.base = copy.deepcopy(base)
        for p in self.base.parameters():
            p.requires_grad_(False)
        positions = tuple(insert_positions if insert_positions is not None
                          else base.cfg.insert_positions)
        self.positions = positions
        self.inserts = nn.ModuleDict({
            str(i): ZeroResidualBlock(base.cfg.width, base.cfg.heads) for i in positions})

    @property
    def cfg(self) -> LiftingConfig:
        return self.base.cfg

    def insert_map(self) -> dict[int, nn.Module]:
        return {int(k): v for k, v in self.inserts.items()}

    def trainable_parameters(self):
        return list(self.inserts.parameters())

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.base(images, inserts=self.insert_map())


def neutralize(net: NeutralizerNet, image) -> TriPlane:
    """Expression-averaged tri-plane of the subject in `image`."""
    t = _single_image_to_batch(image, net.cfg.input_res)
    with torch.no_grad():
        planes = net(t)
    return TriPlane(planes[0])


@dataclass(frozen=True)
class LiftTrainConfig:
    steps: int = 600
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    samples_per_ray: int = 24
    render_resolution: int = 32
    perceptual_weight: float = 0.1
    # The plane-producing head learns on a faster schedule; with a uniform lr
    # the net settles into rendering the dataset mean.
    head_lr_multiplier: float = 10.0
    # Weight photometric error toward non-background pixels. The flat white
    # background covers over half of every frame and otherwise pulls the
    # density field to full transparency (a white render is a strong local
    # optimum with vanishing density gradients).
    foreground_weighting: bool = True
    log_every: int = 25


def foreground_weight(target: torch.Tensor, background) -> torch.Tensor:
    """Per-pixel weights in [0.25, 1], saturating where the target differs
    from the background color. target: (B, H, W, 3)."""
    bg = torch.as_tensor(background, dtype=target.dtype)
    m = (target - bg).abs().mean(-1, keepdim=True)
    return 0.25 + 0.75 * (3.0 * m).clamp(0.0, 1.0)


def weighted_l1(pred: torch.Tensor, target: torch.Tensor, background) -> torch.Tensor:
    w = foreground_weight(target, background)
    return ((pred - target).abs() * w).sum() / (w.sum() * pred.shape[-1])


def _batch_views(ds: HeadDataset, rng: np.random.Generator, batch: int):
    """(input image, target image, target camera) triples from one scene each."""
    imgs_in, imgs_out, cams = [], [], []
    for _ in range(batch):
        i = int(rng.integers(ds.n_identities))
        e = int(rng.integers(ds.n_expressions))
        v_in = int(rng.integers(ds.n_views))
        v_out = int(rng.integers(ds.n_views))
        imgs_in.append(ds.image(i, e, v_in))
        imgs_out.append(ds.image(i, e, v_out))
        cams.append(ds.camera(i, e, v_out))
    x_in = torch.from_numpy(np.stack(imgs_in)).permute(0, 3, 1, 2)
    x_out = torch.from_numpy(np.stack(imgs_out))
    return x_in, x_out, cams


def train_lifting(net: LiftingNet, ds: HeadDataset, cfg: LiftTrainConfig,
                  perceptual: PerceptualProxy | None = None):
    """Multi-view photometric training of the lifter on the synthetic world.

    Loss per step: L1(render(lift(x), cam'), target view) plus a perceptual
    proxy term. Returns (net, history); history rows carry per-term values.
    """
    if ds is None or ds.spec.n_frames == 0:
        raise InvalidArgumentError("empty dataset")
    if ds.spec.resolution != net.cfg.input_res:
        raise InvalidArgumentError(
            f"dataset resolution {ds.spec.resolution} != lifter input {net.cfg.input_res}")
    perceptual = perceptual or PerceptualProxy()
    head_params = list(net.head.parameters()) + list(net.ln_out.parameters())
    head_ids = {id(p) for p in head_params}
    rest = [p for p in net.parameters() if id(p) not in head_ids]
    opt = torch.optim.Adam([
        {"params": rest, "lr": cfg.lr},
        {"params": head_params, "lr": cfg.lr * cfg.head_lr_multiplier},
    ])
    background = (1.0, 1.0, 1.0)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(cfg.seed * 1_000_003 + step)
        x_in, x_out, cams = _batch_views(ds, rng, cfg.batch_size)
        planes = net(x_in)
        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray,
                            render_resolution=cfg.render_resolution,
                            seed=cfg.seed * 7_919 + step)
        rgb, _, _ = render_batch(planes, net.decoder, cams, rcfg)
        if cfg.foreground_weighting:
            l1 = weighted_l1(rgb, x_out, background)
        else:
            l1 = (rgb - x_out).abs().mean()
        perc = perceptual.distance(rgb.permute(0, 3, 1, 2), x_out.permute(0, 3, 1, 2))
        loss = l1 + cfg.perceptual_weight * perc
        if not torch.isfinite(loss):
            raise NumericFailureError(
                f"non-finite lifting loss at step {step}: l1={l1.item()}, perc={perc.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item(), "l1": l1.item(),
                            "perceptual": perc.item()})
    return net, history


@dataclass(frozen=True)
class NeutralizerTrainConfig:
    steps: int = 1200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    norm: str = "l1"  # 'l1' per the default loss; 'l2' for the conditional-mean variant
    log_every: int = 50


def train_neutralizer(net: NeutralizerNet, ds: HeadDataset, cfg: NeutralizerTrainConfig):
    """Noise2Noise-style training: predict the frozen lifter's tri-plane of a
    *different frame of the same identity*. Only inserted blocks update.
    """
    base_snapshot = [p.detach().clone() for p in net.base.parameters()]
    if cfg.norm not in ("l1", "l2"):
        raise InvalidArgumentError(f"norm must be 'l1' or 'l2', got {cfg.norm}")
    opt = torch.optim.Adam(net.trainable_parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(cfg.seed * 1_000_003 + step)
        xs, targets = [], []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(ds.n_identities))
            e1, v1 = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
            e2, v2 = int(rng.integers(ds.n_expressions)), int(rng.integers(ds.n_views))
            xs.append(ds.image(i, e1, v1))
            targets.append(ds.image(i, e2, v2))
        x = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2)
        with torch.no_grad():
            t_target = net.base(torch.from_numpy(np.stack(targets)).permute(0, 3, 1, 2))
        pred = net(x)
        diff = pred - t_target
        loss = diff.abs().mean() if cfg.norm == "l1" else (diff ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite neutralizer loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item()})
    for p, snap in zip(net.base.parameters(), base_snapshot):
        if not torch.equal(p.detach(), snap):
            raise NumericFailureError("frozen base lifter changed during neutralizer training")
    return net, history
