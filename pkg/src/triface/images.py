"""Small image helpers: tensor layout conversion, pooling, PNG I/O."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def to_tensor(img) -> torch.Tensor:
    """(H, W, 3) array/tensor in [0,1] -> (3, H, W) float tensor."""
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {tuple(img.shape)}")
    return img.permute(2, 0, 1).contiguous()


def to_batch(imgs) -> torch.Tensor:
    """Iterable of (H, W, 3) -> (B, 3, H, W)."""
    return torch.stack([to_tensor(im) for im in imgs])


def to_hwc(t: torch.Tensor) -> torch.Tensor:
    """(3, H, W) or (B, 3, H, W) -> channel-last."""
    if t.ndim == 3:
        return t.permute(1, 2, 0).contiguous()
    return t.permute(0, 2, 3, 1).contiguous()


def downsample2x(img: torch.Tensor) -> torch.Tensor:
    """Exact 2x2 average pooling; (B, 3, H, W) or (3, H, W)."""
    single = img.ndim == 3
    if single:
        img = img.unsqueeze(0)
    out = torch.nn.functional.avg_pool2d(img, 2)
    return out.squeeze(0) if single else out


def save_png(img, path) -> None:
    """Save (H, W, 3) float [0,1] or uint8 image as PNG."""
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    """Load PNG as float32 (H, W, 3) in [0,1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr
