"""Small convolutional feature extractors shared by the classifier, the fusion
network and the perceptual loss."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn


def conv_block(in_channels: int, out_channels: int, pool: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Conv4(nn.Module):
    """Four conv-BN-ReLU-pool blocks followed by global average pooling.

    ``forward`` returns one embedding vector per image; ``feature_maps`` returns
    the intermediate block outputs (used by the perceptual loss).
    """

    def __init__(self, in_channels: int = 3, hidden: int = 64, depth: int = 4):
        super().__init__()
        self.out_dim = hidden
        blocks = [conv_block(in_channels, hidden)]
        blocks += [conv_block(hidden, hidden) for _ in range(depth - 1)]
        self.blocks = nn.ModuleList(blocks)

    def feature_maps(self, x: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        wanted = set(layers)
        out = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in wanted:
                out.append(x)
            if i >= max(wanted):
                break
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=(-2, -1))


class FrozenFeatures(nn.Module):
    """Fixed feature extractor for perceptual distances.

    Wraps a randomly initialized (seeded) ``Conv4`` in inference mode with all
    parameters frozen. Calling it returns the list of activations at ``layers``.
    """

    def __init__(self, hidden: int = 16, layers: Sequence[int] = (0, 1), seed: int = 0):
        super().__init__()
        self.layers = tuple(layers)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = Conv4(hidden=hidden, depth=max(self.layers) + 1)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True) -> "FrozenFeatures":
        # always stays in inference mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.net.feature_maps(x, self.layers)
