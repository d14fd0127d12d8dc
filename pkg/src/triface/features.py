"""Frozen, seeded feature extractors used by perceptual losses.

All activations are smooth (tanh) so finite-difference gradient checks hold
along every loss path. The extractor is randomly initialized once from a
fixed seed and never trained.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class PerceptualProxy(nn.Module):
    """Random frozen conv pyramid; feature distance stands in for a
    pretrained perceptual backbone."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.stem = nn.Conv2d(3, 16, 3, padding=1)
            self.down1 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
            self.down2 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = torch.tanh(self.stem(x))
        f2 = torch.tanh(self.down1(f1))
        f3 = torch.tanh(self.down2(f2))
        return [f1, f2, f3]

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean absolute feature difference across pyramid levels."""
        fa = self.features(a)
        fb = self.features(b)
        return sum((x - y).abs().mean() for x, y in zip(fa, fb)) / len(fa)
