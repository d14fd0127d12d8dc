"""Loss functions, the three training stages, super-resolution, and few-shot
fine-tuning.

Stage 1 (coarse): injectors + expression encoder train on self-reenactment
with frontalized, augmented drivers; a cross-identity driver feeds the
neutralizing loss. Lifting stays frozen.

Stage 2 (fine): doubled render resolution with square patch losses; drivers
are raw frames plus stage-1-synthesized cross drivers; eye-region loss on the
frontal view. Frontalization, augmentation, and the neutralizing loss are off.

Stage 3 (global): synthetic drivers are built on the fly under stop-gradient,
the lifting module unfreezes, and a projected GAN term sharpens the output.

Every stage logs per-term loss values; the logged total equals the weighted
sum of the logged terms. Randomness is keyed by (seed, absolute step) so a
resumed run reproduces an uninterrupted one bitwise.
"""

from __future__ import annotations

import copy
import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .errors import InvalidArgumentError, InvalidStateError, NumericFailureError
from .expression import ExpressionConfig, ExpressionEncoder, augment_driver, \
    frontalize_batch, make_injectors, reenact_lift_batch
from .features import PerceptualProxy
from .geometry import Camera
from .lifting import LiftingConfig, LiftingNet, NeutralizerNet, weighted_l1
from .synthdata import HeadDataset, canonical_camera, eye_mask, \
    gt_render, sample_stage1_batch, synthesize_stage2_dataset
from .triplane import RenderConfig, render_batch

PATCH_SIZE_TOY = 44
PATCH_SIZE_PAPER = 172


def _step_seed(seed: int, step: int, salt: int) -> int:
    return (seed * 1_000_003 + step * 7_919 + salt * 104_729) % (2 ** 31 - 1)


def chw(img: torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) -> (B, 3, H, W)."""
    return img.permute(0, 3, 1, 2)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    identity: float = 1.0
    eye: float = 1.0
    lambda_neu: float = 0.01
    lambda_gan: float = 0.05

    def __post_init__(self):
        for name in ("l1", "perceptual", "identity", "eye", "lambda_neu", "lambda_gan"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class StageConfig:
    stage: int | str = 1  # 1, 2, 3, "superres", "fewshot"
    steps: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    render_resolution: int = 32
    samples_per_ray: int = 24
    patch_size: int | None = None
    eye_loss: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    frozen_modules: tuple[str, ...] = ("lifter",)
    lift_finetune_steps: int = 0       # stage 2 pre-phase
    n_stage2_records: int = 256
    log_every: int = 25
    start_step: int = 0

    def __post_init__(self):
        if self.stage in (1, 2) and "lifter" not in self.frozen_modules:
            raise InvalidArgumentError(f"stage {self.stage} must freeze the lifting module")
        if self.stage == 3 and "lifter" in self.frozen_modules:
            raise InvalidArgumentError("stage 3 unfreezes the lifting module")
        if self.patch_size is not None and self.patch_size > self.render_resolution:
            raise InvalidArgumentError("patch_size exceeds render resolution")


class IdentityEmbedder(nn.Module):
    """Unit-norm identity embeddings; contrastive-pretrained on synthetic
    identities, frozen afterwards. Stands in for a face-recognition net in
    the identity loss and the identity-similarity metric."""

    def __init__(self, dim: int = 64, seed: int = 77):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.GELU(),
            )
            self.fc = nn.Linear(64 * 4 * 4, dim)
        self.trained = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != 32:
            x = F.adaptive_avg_pool2d(x, 32)
        h = self.net(x)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        e = self.fc(h)
        return e / (e.norm(dim=-1, keepdim=True) + 1e-8)


@dataclass(frozen=True)
class EmbedderTrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    margin: float = 0.4
    seed: int = 0


def pretrain_identity_embedder(emb: IdentityEmbedder, ds: HeadDataset,
                               cfg: EmbedderTrainConfig = EmbedderTrainConfig()):
    """Margin contrastive pretraining: same identity close, others far."""
    if ds.n_identities < 2:
        raise InvalidStateError("embedder pretraining needs >= 2 identities")
    opt = torch.optim.Adam(emb.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(_step_seed(cfg.seed, step, 1))
        anchors, positives, negatives = [], [], []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(ds.n_identities))
            j = int(rng.integers(ds.n_identities - 1))
            j += j >= i
            def draw(idx):
                return ds.image(idx, int(rng.integers(ds.n_expressions)),
                                int(rng.integers(ds.n_views)))
            anchors.append(draw(i))
            positives.append(draw(i))
            negatives.append(draw(j))
        a = emb(chw(torch.from_numpy(np.stack(anchors))))
        p = emb(chw(torch.from_numpy(np.stack(positives))))
        n = emb(chw(torch.from_numpy(np.stack(negatives))))
        loss = F.relu(cfg.margin - (a * p).sum(-1) + (a * n).sum(-1)).mean()
        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite embedder loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item()})
    for p_ in emb.parameters():
        p_.requires_grad_(False)
    emb.trained = True
    return emb, history


class Discriminator(nn.Module):
    """Projected-feature discriminator: frozen random multi-scale projector
    plus trainable 1x1 heads (zero-initialized: logits start at 0)."""

    def __init__(self, seed: int = 99):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.proj1 = nn.Conv2d(3, 16, 3, padding=1)
            self.proj2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
            self.proj3 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        for p in (list(self.proj1.parameters()) + list(self.proj2.parameters())
                  + list(self.proj3.parameters())):
            p.requires_grad_(False)
        self.heads = nn.ModuleList([nn.Conv2d(c, 1, 1) for c in (16, 32, 32)])
        for h in self.heads:
            nn.init.zeros_(h.weight)
            nn.init.zeros_(h.bias)

    def trainable_parameters(self):
        return list(self.heads.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated per-pixel logits across scales, (B, P)."""
        f1 = torch.tanh(self.proj1(x))
        f2 = torch.tanh(self.proj2(f1))
        f3 = torch.tanh(self.proj3(f2))
        logits = [h(f).flatten(1) for h, f in zip(self.heads, (f1, f2, f3))]
        return torch.cat(logits, dim=1)


def loss_gan(disc: Discriminator, fake: torch.Tensor, real: torch.Tensor):
    """Non-saturating logistic objectives over projected features.

    Returns (generator term, discriminator term). The generator term treats
    discriminator parameters as constants and the discriminator term sees a
    detached fake, so the two terms touch disjoint parameter sets.
    """
    flags = [p.requires_grad for p in disc.parameters()]
    for p in disc.parameters():
        p.requires_grad_(False)
    g_term = F.softplus(-disc(fake)).mean()
    for p, r in zip(disc.parameters(), flags):
        p.requires_grad_(r)
    d_term = 0.5 * (F.softplus(disc(fake.detach())).mean()
                    + F.softplus(-disc(real)).mean())
    return g_term, d_term


def loss_rec(pred: torch.Tensor, target: torch.Tensor, source_for_id: torch.Tensor,
             embedder: IdentityEmbedder, perceptual: PerceptualProxy,
             weights: LossWeights = LossWeights()):
    """L1 + perceptual proxy vs the target, identity term vs the source.

    All images (B, 3, H, W). Identity term is the negative cosine similarity
    of identity embeddings (pred vs source). Returns (total, parts dict).
    """
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    l1 = (pred - target).abs().mean()
    perc = perceptual.distance(pred, target)
    e_pred = embedder(pred)
    e_src = embedder(source_for_id)
    id_term = -(e_pred * e_src).sum(-1).mean()
    total = weights.l1 * l1 + weights.perceptual * perc + weights.identity * id_term
    return total, {"l1": l1, "perceptual": perc, "identity": id_term}


def loss_neutralizing(neutralizer: NeutralizerNet, x_source: torch.Tensor,
                      x_cross_reenacted: torch.Tensor) -> torch.Tensor:
    """L1 between neutralized tri-planes of the source and of the
    cross-reenacted output. Gradients reach only the reenactment path; the
    neutralizer itself is frozen."""
    if not getattr(neutralizer, "trained", False):
        warnings.warn("neutralizer has not been trained; the neutralizing loss "
                      "will not impose identity structure", stacklevel=2)
    with torch.no_grad():
        t_src = neutralizer(x_source)
    flags = [p.requires_grad for p in neutralizer.parameters()]
    for p in neutralizer.parameters():
        p.requires_grad_(False)
    t_cross = neutralizer(x_cross_reenacted)
    for p, r in zip(neutralizer.parameters(), flags):
        p.requires_grad_(r)
    return (t_cross - t_src).abs().mean()


def loss_eye(pred_frontal: torch.Tensor, target_frontal: torch.Tensor,
             mask: torch.Tensor) -> torch.Tensor:
    """L1 restricted to the eye mask; defined as 0 for an empty mask."""
    if pred_frontal.shape != target_frontal.shape:
        raise InvalidArgumentError("eye loss inputs must have equal shapes")
    m = mask.to(pred_frontal.dtype)
    denom = m.sum() * pred_frontal.shape[1]
    if denom.item() == 0:
        warnings.warn("empty eye mask; eye loss is 0", stacklevel=2)
        return pred_frontal.sum() * 0.0
    while m.ndim < pred_frontal.ndim:
        m = m.unsqueeze(0)
    return ((pred_frontal - target_frontal).abs() * m).sum() / (denom * pred_frontal.shape[0])


class ReenactModel(nn.Module):
    """Lifter + injectors + expression encoder: the one-shot reenactor."""

    def __init__(self, lifter: LiftingNet, injectors: nn.ModuleList,
                 encoder: ExpressionEncoder):
        super().__init__()
        self.lifter = lifter
        self.injectors = injectors
        self.encoder = encoder

    @classmethod
    def build(cls, lift_cfg: LiftingConfig = LiftingConfig(),
              exp_cfg: ExpressionConfig = ExpressionConfig(), seed: int = 0) -> "ReenactModel":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            lifter = LiftingNet(lift_cfg)
            enc = ExpressionEncoder(exp_cfg)
            injectors = make_injectors(lifter)
        return cls(lifter, injectors, enc)

    @property
    def input_res(self) -> int:
        return self.lifter.cfg.input_res

    def modules_dict(self) -> dict[str, nn.Module]:
        return {"lifter": self.lifter, "injectors": self.injectors,
                "encoder": self.encoder}

    def _prep(self, img) -> torch.Tensor:
        """Accept (B,3,R,R) / (B,R,R,3) tensors or numpy, downsample 2^k."""
        if isinstance(img, np.ndarray):
            img = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
        if img.ndim == 3:
            img = img.unsqueeze(0)
        if img.shape[-1] == 3 and img.shape[1] != 3:
            img = chw(img)
        r = self.input_res
        while img.shape[-1] > r and img.shape[-1] % 2 == 0:
            img = F.avg_pool2d(img, 2)
        return img

    def reenact_planes(self, source: torch.Tensor, driver: torch.Tensor) -> torch.Tensor:
        return reenact_lift_batch(self.lifter, self.injectors, self.encoder,
                                  self._prep(source), self._prep(driver))

    def reenact_image(self, source, driver, cam: Camera, samples: int = 32) -> np.ndarray:
        """Deterministic single-pair reenactment render at `cam`."""
        with torch.no_grad():
            planes = self.reenact_planes(self._prep(source), self._prep(driver))
            res = cam.resolution[0]
            rcfg = RenderConfig(samples_per_ray=samples, render_resolution=res,
                                stratified=False, seed=0)
            rgb, _, _ = render_batch(planes, self.lifter.decoder, [cam], rcfg)
        return rgb[0].numpy()


@dataclass
class TrainBundle:
    model: ReenactModel
    embedder: IdentityEmbedder
    perceptual: PerceptualProxy
    neutralizer: NeutralizerNet | None = None
    discriminator: Discriminator | None = None


def _snapshot(module: nn.Module) -> list[torch.Tensor]:
    return [p.detach().clone() for p in module.parameters()]


def _assert_unchanged(module: nn.Module, snapshot, what: str):
    for p, s in zip(module.parameters(), snapshot):
        if not torch.equal(p.detach(), s):
            raise NumericFailureError(f"frozen module '{what}' changed during training")


def _set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _audit(parts: dict, weights: dict) -> float:
    return sum(weights[k] * v for k, v in parts.items())


def write_history_csv(history: list[dict], path) -> None:
    if not history:
        return
    keys = sorted({k for row in history for k in row})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


class _FrontalCache:
    """Lazily frontalizes driver frames through the frozen lifter."""

    def __init__(self, model: ReenactModel, ds: HeadDataset):
        self.model = model
        self.ds = ds
        self.cache: dict[tuple[int, int, int], np.ndarray] = {}

    def get_batch(self, frames: list[tuple[int, int, int]]) -> list[np.ndarray]:
        missing = [f for f in set(frames) if f not in self.cache]
        if missing:
            imgs = torch.from_numpy(np.stack(
                [self.ds.image(*f) for f in missing]))
            fronts = frontalize_batch(self.model.lifter, chw(imgs))
            for f, img in zip(missing, fronts):
                self.cache[f] = img.numpy()
        return [self.cache[f] for f in frames]


def stage1_optimizer(bundle: TrainBundle, cfg: StageConfig) -> torch.optim.Optimizer:
    """The stage-1/2 trainable set: injectors + expression encoder."""
    trainables = (list(bundle.model.injectors.parameters())
                  + list(bundle.model.encoder.parameters()))
    return torch.optim.Adam(trainables, lr=cfg.lr)


def run_stage1(bundle: TrainBundle, ds: HeadDataset, cfg: StageConfig,
               out_dir=None, optimizer: torch.optim.Optimizer | None = None):
    """Coarse-level reenactment training (paper render 128, toy 32).

    Loss: L_rec(self-reenactment, driver frame) + lambda_neu * L_neu(source,
    cross-reenactment). Drivers are frontalized and augmented before
    encoding. Lifting (and the neutralizer) stay frozen and bit-identical.
    Pass a preloaded optimizer (and cfg.start_step) to resume a run.
    """
    if cfg.stage != 1:
        raise InvalidArgumentError(f"run_stage1 got stage {cfg.stage}")
    model = bundle.model
    w = cfg.weights
    use_neu = w.lambda_neu > 0
    if use_neu and bundle.neutralizer is None:
        raise InvalidStateError("stage 1 with lambda_neu > 0 requires a neutralizer")
    lifter_snapshot = _snapshot(model.lifter)
    neu_snapshot = _snapshot(bundle.neutralizer) if bundle.neutralizer is not None else None
    _set_requires_grad(model.lifter, False)
    if bundle.neutralizer is not None:
        _set_requires_grad(bundle.neutralizer, False)
    for p in list(model.injectors.parameters()) + list(model.encoder.parameters()):
        p.requires_grad_(True)
    opt = optimizer if optimizer is not None else stage1_optimizer(bundle, cfg)
    frontal = _FrontalCache(model, ds)
    history: list[dict] = []
    last_good = None
    res = cfg.render_resolution

    for step in range(cfg.start_step, cfg.steps):
        pairs = sample_stage1_batch(ds, cfg.batch_size, _step_seed(cfg.seed, step, 2))
        src = chw(torch.from_numpy(np.stack([ds.image(*p.source) for p in pairs])))
        gt_d1 = torch.from_numpy(np.stack([ds.image(*p.driver) for p in pairs]))
        cams_d1 = [ds.camera(*p.driver) for p in pairs]

        # frontalize + augment the same-identity drivers, then encode
        fronts = frontal.get_batch([p.driver for p in pairs])
        drv = chw(torch.from_numpy(np.stack([
            augment_driver(f, _step_seed(cfg.seed, step, 10 + b))
            for b, f in enumerate(fronts)])))
        planes = model.reenact_planes(src, drv)
        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, render_resolution=res,
                            seed=_step_seed(cfg.seed, step, 3))
        pred, _, _ = render_batch(planes, model.lifter.decoder, cams_d1, rcfg)
        rec_total, parts = loss_rec(chw(pred), chw(gt_d1), src,
                                    bundle.embedder, bundle.perceptual, w)

        if use_neu:
            fronts2 = frontal.get_batch([p.cross for p in pairs])
            drv2 = chw(torch.from_numpy(np.stack([
                augment_driver(f, _step_seed(cfg.seed, step, 50 + b))
                for b, f in enumerate(fronts2)])))
            planes2 = model.reenact_planes(src, drv2)
            cams_d2 = [ds.camera(*p.cross) for p in pairs]
            rcfg2 = replace(rcfg, seed=_step_seed(cfg.seed, step, 4))
            pred_cross, _, _ = render_batch(planes2, model.lifter.decoder, cams_d2, rcfg2)
            l_neu = loss_neutralizing(bundle.neutralizer, src, chw(pred_cross))
        else:
            l_neu = torch.zeros(())
        parts = dict(parts, neu=l_neu)
        total = rec_total + w.lambda_neu * l_neu

        if not torch.isfinite(total):
            if last_good is not None:
                model.load_state_dict(last_good)
            raise NumericFailureError(
                f"non-finite stage-1 loss at step {step}; model restored to last good state")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "total": total.item(),
                   **{k: v.item() for k, v in parts.items()}}
            weights_map = {"l1": w.l1, "perceptual": w.perceptual,
                           "identity": w.identity, "neu": w.lambda_neu}
            row["weighted_sum"] = _audit({k: row[k] for k in weights_map}, weights_map)
            history.append(row)
            last_good = copy.deepcopy(model.state_dict())

    _assert_unchanged(model.lifter, lifter_snapshot, "lifter")
    if neu_snapshot is not None:
        _assert_unchanged(bundle.neutralizer, neu_snapshot, "neutralizer")
    meta = {"stage": 1, "seed": cfg.seed, "step": cfg.steps,
            "ablation_no_neu": not use_neu}
    if out_dir is not None:
        save_checkpoint(f"{out_dir}/stage1.vxpc", model.modules_dict(), meta, opt)
        write_history_csv(history, f"{out_dir}/stage1_loss.csv")
    return bundle, history, opt


def _random_patch(rng: np.random.Generator, res: int, patch: int) -> tuple[int, int, int]:
    x = int(rng.integers(0, res - patch + 1))
    y = int(rng.integers(0, res - patch + 1))
    return (x, y, patch)


def _lift_finetune(bundle: TrainBundle, ds: HeadDataset, cfg: StageConfig):
    """Stage-2 pre-phase: fine-tune the lifter at the doubled render
    resolution with patch losses (multi-view photometric)."""
    model = bundle.model
    _set_requires_grad(model.lifter, True)
    opt = torch.optim.Adam(model.lifter.parameters(), lr=cfg.lr)
    res, patch = cfg.render_resolution, cfg.patch_size
    for step in range(cfg.lift_finetune_steps):
        rng = np.random.default_rng(_step_seed(cfg.seed, step, 20))
        idx = [(int(rng.integers(ds.n_identities)), int(rng.integers(ds.n_expressions)),
                int(rng.integers(ds.n_views)), int(rng.integers(ds.n_views)))
               for _ in range(cfg.batch_size)]
        x_in = chw(torch.from_numpy(np.stack([ds.image(i, e, v) for i, e, v, _ in idx])))
        gt = torch.from_numpy(np.stack([ds.image(i, e, v2) for i, e, _, v2 in idx]))
        cams = [ds.camera(i, e, v2) for i, e, _, v2 in idx]
        px, py, ps = _random_patch(rng, res, patch)
        planes = model.lifter(bundle.model._prep(x_in))
        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, render_resolution=res,
                            patch=(px, py, ps), seed=_step_seed(cfg.seed, step, 21))
        pred, _, _ = render_batch(planes, model.lifter.decoder, cams, rcfg)
        gt_patch = gt[:, py:py + ps, px:px + ps]
        loss = weighted_l1(pred, gt_patch, (1.0, 1.0, 1.0)) \
            + 0.1 * bundle.perceptual.distance(chw(pred), chw(gt_patch))
        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite lift-finetune loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    _set_requires_grad(model.lifter, False)


class _FrontalGtCache:
    """Ground-truth frontal views and eye masks for eye-region supervision."""

    def __init__(self, ds: HeadDataset, res: int):
        self.ds = ds
        self.res = res
        self.cam = canonical_camera(res)
        self.views: dict[tuple[int, int], np.ndarray] = {}
        self.masks: dict[int, np.ndarray] = {}

    def frontal(self, i: int, e: int) -> np.ndarray:
        key = (i, e)
        if key not in self.views:
            self.views[key] = gt_render(self.ds.scene(i, e), self.cam)
        return self.views[key]

    def mask(self, i: int) -> np.ndarray:
        if i not in self.masks:
            self.masks[i] = eye_mask(self.ds.scene(i, 0), self.cam, self.res)
        return self.masks[i]


def run_stage2(bundle: TrainBundle, stage1_model: ReenactModel, ds: HeadDataset,
               cfg: StageConfig, out_dir=None, stage2_records=None):
    """Fine-level training at doubled render resolution with patch losses.

    Paper resolutions: 128 -> 256 render with 172x172 patches; toy preset:
    32 -> 64 render with 44x44 patches. Drivers: the raw same-identity frame
    plus a stage-1-synthesized cross driver. Frontalization, augmentation,
    and the neutralizing loss are disabled; the eye loss is on.
    """
    if cfg.stage != 2:
        raise InvalidArgumentError(f"run_stage2 got stage {cfg.stage}")
    if stage1_model is None:
        raise InvalidStateError("stage 2 requires the trained stage-1 model")
    if cfg.patch_size is None:
        raise InvalidArgumentError("stage 2 uses patch rendering; set patch_size")
    model = bundle.model
    w = cfg.weights
    res, patch = cfg.render_resolution, cfg.patch_size

    if stage2_records is None:
        stage2_records = synthesize_stage2_dataset(
            stage1_model, ds, cfg.n_stage2_records, seed=cfg.seed)

    if cfg.lift_finetune_steps > 0:
        _lift_finetune(bundle, ds, cfg)

    lifter_snapshot = _snapshot(model.lifter)
    _set_requires_grad(model.lifter, False)
    trainables = list(model.injectors.parameters()) + list(model.encoder.parameters())
    for p in trainables:
        p.requires_grad_(True)
    opt = torch.optim.Adam(trainables, lr=cfg.lr)
    gt_frontal = _FrontalGtCache(ds, model.input_res)
    history = []
    last_good = None

    for step in range(cfg.start_step, cfg.steps):
        rng = np.random.default_rng(_step_seed(cfg.seed, step, 30))
        recs = [stage2_records[int(rng.integers(len(stage2_records)))]
                for _ in range(cfg.batch_size)]
        src = chw(torch.from_numpy(np.stack([ds.image(*r.source) for r in recs])))
        gt = torch.from_numpy(np.stack([ds.image(*r.gt) for r in recs]))
        cams = [ds.camera(*r.gt) for r in recs]
        d1_raw = chw(torch.from_numpy(np.stack([ds.image(*r.gt) for r in recs])))
        drv_syn = chw(torch.from_numpy(np.stack([r.driver_synthetic for r in recs])))

        px, py, ps = _random_patch(rng, res, patch)
        gt_patch = gt[:, py:py + ps, px:px + ps]
        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, render_resolution=res,
                            patch=(px, py, ps), seed=_step_seed(cfg.seed, step, 31))

        planes_syn = model.reenact_planes(src, drv_syn)
        pred_syn, _, _ = render_batch(planes_syn, model.lifter.decoder, cams, rcfg)
        rec_syn, parts_syn = loss_rec(chw(pred_syn), chw(gt_patch), src,
                                      bundle.embedder, bundle.perceptual, w)

        planes_self = model.reenact_planes(src, d1_raw)
        rcfg_self = replace(rcfg, seed=_step_seed(cfg.seed, step, 32))
        pred_self, _, _ = render_batch(planes_self, model.lifter.decoder, cams, rcfg_self)
        rec_self, parts_self = loss_rec(chw(pred_self), chw(gt_patch), src,
                                        bundle.embedder, bundle.perceptual, w)

        if cfg.eye_loss:
            canon = gt_frontal.cam
            rcfg_eye = RenderConfig(samples_per_ray=cfg.samples_per_ray,
                                    render_resolution=gt_frontal.res,
                                    seed=_step_seed(cfg.seed, step, 33))
            pred_frontal, _, _ = render_batch(
                planes_self, model.lifter.decoder, [canon] * len(recs), rcfg_eye)
            gt_front = torch.from_numpy(np.stack(
                [gt_frontal.frontal(r.gt[0], r.gt[1]) for r in recs]))
            masks = torch.from_numpy(np.stack(
                [gt_frontal.mask(r.gt[0]) for r in recs]))
            l_eye = torch.stack([
                loss_eye(chw(pred_frontal[b:b + 1]), chw(gt_front[b:b + 1]), masks[b])
                for b in range(len(recs))]).mean()
        else:
            l_eye = torch.zeros(())

        total = rec_syn + rec_self + w.eye * l_eye
        if not torch.isfinite(total):
            if last_good is not None:
                model.load_state_dict(last_good)
            raise NumericFailureError(
                f"non-finite stage-2 loss at step {step}; model restored to last good state")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "total": total.item(), "eye": l_eye.item(),
                   "rec_syn": rec_syn.item(), "rec_self": rec_self.item()}
            row["weighted_sum"] = row["rec_syn"] + row["rec_self"] + w.eye * row["eye"]
            history.append(row)
            last_good = copy.deepcopy(model.state_dict())
        del parts_syn, parts_self

    _assert_unchanged(model.lifter, lifter_snapshot, "lifter")
    meta = {"stage": 2, "seed": cfg.seed, "step": cfg.steps, "eye_loss": cfg.eye_loss}
    if out_dir is not None:
        save_checkpoint(f"{out_dir}/stage2.vxpc", model.modules_dict(), meta, opt)
        write_history_csv(history, f"{out_dir}/stage2_loss.csv")
    return bundle, history, stage2_records


def synthesize_stop_gradient_driver(model: ReenactModel, s2_imgs: torch.Tensor,
                                    d1_raw: torch.Tensor, cams: list[Camera],
                                    samples: int) -> torch.Tensor:
    """On-the-fly cross driver x_{s2->d1} rendered by the current model.

    Values pass forward; gradients are blocked entirely (the stop-gradient
    contract), so the returned tensor is a constant w.r.t. all parameters.
    """
    with torch.no_grad():
        planes_sg = model.reenact_planes(s2_imgs, d1_raw)
        rcfg_sg = RenderConfig(samples_per_ray=samples,
                               render_resolution=model.input_res,
                               stratified=False, seed=0)
        cams_low = [c.with_resolution((model.input_res,) * 2) for c in cams]
        sg_driver, _, _ = render_batch(planes_sg, model.lifter.decoder, cams_low, rcfg_sg)
    return chw(sg_driver).detach()


def run_stage3(bundle: TrainBundle, ds: HeadDataset, cfg: StageConfig, out_dir=None):
    """Global fine-tuning: on-the-fly stop-gradient drivers, unfrozen lifting,
    and the projected GAN term (lambda_gan = 0.05 default)."""
    if cfg.stage != 3:
        raise InvalidArgumentError(f"run_stage3 got stage {cfg.stage}")
    if cfg.patch_size is None:
        raise InvalidArgumentError("stage 3 uses patch rendering; set patch_size")
    if bundle.discriminator is None:
        raise InvalidStateError("stage 3 requires a discriminator")
    model = bundle.model
    disc = bundle.discriminator
    w = cfg.weights
    res, patch = cfg.render_resolution, cfg.patch_size
    _set_requires_grad(model, True)
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(disc.trainable_parameters(), lr=cfg.lr)
    history = []
    last_good = None

    for step in range(cfg.start_step, cfg.steps):
        pairs = sample_stage1_batch(ds, cfg.batch_size, _step_seed(cfg.seed, step, 40))
        src = chw(torch.from_numpy(np.stack([ds.image(*p.source) for p in pairs])))
        gt = torch.from_numpy(np.stack([ds.image(*p.driver) for p in pairs]))
        cams = [ds.camera(*p.driver) for p in pairs]
        d1_raw = chw(torch.from_numpy(np.stack([ds.image(*p.driver) for p in pairs])))
        s2_imgs = chw(torch.from_numpy(np.stack([ds.image(*p.cross) for p in pairs])))

        sg_driver = synthesize_stop_gradient_driver(
            model, s2_imgs, d1_raw, cams, cfg.samples_per_ray)

        rng = np.random.default_rng(_step_seed(cfg.seed, step, 41))
        px, py, ps = _random_patch(rng, res, patch)
        gt_patch = gt[:, py:py + ps, px:px + ps]
        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, render_resolution=res,
                            patch=(px, py, ps), seed=_step_seed(cfg.seed, step, 42))

        planes_cross = model.reenact_planes(src, sg_driver)
        pred_cross, _, _ = render_batch(planes_cross, model.lifter.decoder, cams, rcfg)
        rec_cross, _ = loss_rec(chw(pred_cross), chw(gt_patch), src,
                                bundle.embedder, bundle.perceptual, w)

        planes_self = model.reenact_planes(src, d1_raw)
        rcfg_self = replace(rcfg, seed=_step_seed(cfg.seed, step, 43))
        pred_self, _, _ = render_batch(planes_self, model.lifter.decoder, cams, rcfg_self)
        rec_self, _ = loss_rec(chw(pred_self), chw(gt_patch), src,
                               bundle.embedder, bundle.perceptual, w)

        g_term, d_term = loss_gan(disc, chw(pred_cross), chw(gt_patch))
        total = rec_cross + rec_self + w.lambda_gan * g_term

        if not (torch.isfinite(total) and torch.isfinite(d_term)):
            if last_good is not None:
                model.load_state_dict(last_good)
            raise NumericFailureError(
                f"non-finite stage-3 loss at step {step}; model restored to last good state")
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_d.zero_grad(set_to_none=True)
        d_term.backward()
        opt_g.step()
        opt_d.step()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "total": total.item(), "rec_cross": rec_cross.item(),
                   "rec_self": rec_self.item(), "gan_g": g_term.item(),
                   "gan_d": d_term.item()}
            row["weighted_sum"] = (row["rec_cross"] + row["rec_self"]
                                   + w.lambda_gan * row["gan_g"])
            history.append(row)
            last_good = copy.deepcopy(model.state_dict())

    meta = {"stage": 3, "seed": cfg.seed, "step": cfg.steps}
    if out_dir is not None:
        save_checkpoint(f"{out_dir}/stage3.vxpc", model.modules_dict(), meta, opt_g)
        save_checkpoint(f"{out_dir}/stage3_disc.vxpc", {"discriminator": disc},
                        meta, opt_d)
        write_history_csv(history, f"{out_dir}/stage3_loss.csv")
    return bundle, history


class SuperRes(nn.Module):
    """2x upsampler: bilinear skip + learned residual (pixel shuffle)."""

    def __init__(self, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(3, 48, 3, padding=1), nn.GELU(),
                nn.Conv2d(48, 48, 3, padding=1), nn.GELU(),
                nn.Conv2d(48, 12, 3, padding=1),
            )
            nn.init.zeros_(self.body[-1].weight)
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, 3, 2H, 2W)."""
        up = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return up + F.pixel_shuffle(self.body(x), 2)


@dataclass(frozen=True)
class SuperResTrainConfig:
    n_pairs: int = 96
    steps: int = 300
    batch_size: int = 4
    lr: float = 2e-3
    seed: int = 0
    holdout: int = 16


def build_superres_pairs(model: ReenactModel, ds: HeadDataset, n_pairs: int,
                         hires: int, seed: int = 0):
    """(model self-reenactment at base res, ground truth at 2x) pairs.

    Paper pairing: 512 ground truth vs 256 renders; toy preset 128 vs 64.
    """
    rng = np.random.default_rng(seed)
    lows, highs = [], []
    for _ in range(n_pairs):
        i = int(rng.integers(ds.n_identities))
        e = int(rng.integers(ds.n_expressions))
        v = int(rng.integers(ds.n_views))
        cam = ds.camera(i, e, v)
        img = ds.image(i, e, v)
        low = model.reenact_image(img, img, cam.with_resolution(
            (ds.spec.resolution, ds.spec.resolution)))
        high = gt_render(ds.scene(i, e), cam.with_resolution((hires, hires)))
        lows.append(low)
        highs.append(high)
    return (torch.from_numpy(np.stack(lows)), torch.from_numpy(np.stack(highs)))


def train_superres(model: ReenactModel, ds: HeadDataset,
                   cfg: SuperResTrainConfig = SuperResTrainConfig()):
    """Train the 2x upsampler on (self-reenactment render, hi-res gt) pairs."""
    hires = ds.spec.resolution * 2
    low, high = build_superres_pairs(model, ds, cfg.n_pairs, hires, cfg.seed)
    n_train = cfg.n_pairs - cfg.holdout
    net = SuperRes(seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(_step_seed(cfg.seed, step, 60))
        idx = rng.integers(0, n_train, size=cfg.batch_size)
        x = chw(low[idx])
        y = chw(high[idx])
        pred = net(x)
        loss = (pred - y).abs().mean()
        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite super-res loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item()})
    holdout = (low[n_train:], high[n_train:])
    return net, history, holdout


@dataclass(frozen=True)
class FewShotConfig:
    steps: int = 60
    lr: float = 3e-4
    seed: int = 0
    samples_per_ray: int = 24
    batch_size: int = 2
    max_images: int = 32


def finetune_fewshot(bundle: TrainBundle, source_frames: list[tuple[np.ndarray, Camera]],
                     cfg: FewShotConfig, aux_source: np.ndarray | None = None):
    """Personalize the model on a few images of one identity (paper regime:
    ~10-20 images, tens of seconds at full scale).

    Runs the stage-3 objective restricted to the provided frames: sources and
    drivers are drawn from the set, the stop-gradient cross driver uses
    `aux_source` (an image of a different identity) when given.
    """
    if not source_frames:
        raise InvalidArgumentError("few-shot fine-tuning needs at least one source image")
    if len(source_frames) > cfg.max_images:
        raise InvalidArgumentError(f"too many few-shot images ({len(source_frames)})")
    model = bundle.model
    disc = bundle.discriminator
    w = LossWeights()
    _set_requires_grad(model, True)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    res = source_frames[0][1].resolution[0]
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(_step_seed(cfg.seed, step, 70))
        idx_s = rng.integers(0, len(source_frames), size=cfg.batch_size)
        idx_d = rng.integers(0, len(source_frames), size=cfg.batch_size)
        src = chw(torch.from_numpy(np.stack([source_frames[i][0] for i in idx_s])))
        gt = torch.from_numpy(np.stack([source_frames[i][0] for i in idx_d]))
        drivers = chw(torch.from_numpy(np.stack([source_frames[i][0] for i in idx_d])))
        cams = [source_frames[i][1] for i in idx_d]

        rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, render_resolution=res,
                            seed=_step_seed(cfg.seed, step, 71))
        planes = model.reenact_planes(src, drivers)
        pred, _, _ = render_batch(planes, model.lifter.decoder, cams, rcfg)
        total, _ = loss_rec(chw(pred), chw(gt), src, bundle.embedder,
                            bundle.perceptual, w)

        if aux_source is not None:
            with torch.no_grad():
                planes_sg = model.reenact_planes(
                    np.stack([aux_source] * cfg.batch_size), drivers)
                cams32 = [c.with_resolution((model.input_res,) * 2) for c in cams]
                sg_driver, _, _ = render_batch(
                    planes_sg, model.lifter.decoder, cams32,
                    RenderConfig(samples_per_ray=cfg.samples_per_ray,
                                 render_resolution=model.input_res,
                                 stratified=False, seed=0))
            planes_cross = model.reenact_planes(src, chw(sg_driver).detach())
            rcfg_c = replace(rcfg, seed=_step_seed(cfg.seed, step, 72))
            pred_cross, _, _ = render_batch(planes_cross, model.lifter.decoder, cams, rcfg_c)
            rec_cross, _ = loss_rec(chw(pred_cross), chw(gt), src,
                                    bundle.embedder, bundle.perceptual, w)
            total = total + rec_cross
            if disc is not None:
                g_term, d_term = loss_gan(disc, chw(pred_cross), chw(gt))
                total = total + w.lambda_gan * g_term

        if not torch.isfinite(total):
            raise NumericFailureError(f"non-finite few-shot loss at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if step % 20 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": total.item()})
    return bundle, history
