"""Shared test utilities: finite-difference gradient checking and scene builders."""

import numpy as np
import torch

from triface.triplane import Decoder, TriPlane


def random_scene(seed: int, res: int = 32, channels: int = 16, dtype=torch.float32,
                 scale: float = 0.6):
    """Random tri-plane + decoder; smooth fields suited to quadrature checks."""
    torch.manual_seed(seed)
    tp = TriPlane.randn(res, channels, scale=scale, seed=seed, dtype=dtype)
    dec = Decoder(channels)
    if dtype == torch.float64:
        dec = dec.double()
    return tp, dec


class ConstantField(torch.nn.Module):
    """Decoder stand-in emitting a constant color and density everywhere."""

    def __init__(self, color, density, dtype=torch.float32):
        super().__init__()
        self.color = torch.as_tensor(color, dtype=dtype)
        self.density = float(density)

    def forward(self, feat):
        shape = feat.shape[:-1]
        color = self.color.expand(*shape, 3)
        density = torch.full(shape, self.density, dtype=feat.dtype)
        return color, density


def finite_diff_check(make_loss, params, n_coords: int = 20, h: float = 1e-5,
                      rel_tol: float = 1e-3, abs_tol: float = 1e-8,
                      seed: int = 0) -> float:
    """Central-difference check of d(make_loss())/d(params) in double precision.

    params: list of float64 leaf tensors with requires_grad=True. A coordinate
    passes when |fd - analytic| <= max(rel_tol * max(|fd|, |an|), abs_tol);
    the absolute floor absorbs central-difference roundoff (~|loss| * eps / h)
    on near-zero gradients. Returns the worst relative error over coordinates
    above the floor.
    """
    loss = make_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        n = min(n_coords, flat.numel())
        coords = rng.choice(flat.numel(), size=n, replace=False)
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + h
            lp = make_loss().item()
            with torch.no_grad():
                flat[c] = orig - h
            lm = make_loss().item()
            with torch.no_grad():
                flat[c] = orig
            fd = (lp - lm) / (2 * h)
            an = g.reshape(-1)[c].item()
            diff = abs(fd - an)
            if diff <= abs_tol:
                continue
            rel = diff / max(abs(fd), abs(an), 1e-10)
            worst = max(worst, rel)
    assert worst <= rel_tol, f"finite-difference mismatch: worst rel err {worst:.3e} > {rel_tol}"
    return worst
