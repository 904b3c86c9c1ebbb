"""Grid fusion of a real image with its generated counterpart.

A small network looks at both images and predicts one mixing weight per cell
of a coarse grid (3x3 by default). The weight map is blown up to image size
with the block structure intact, and the hybrid image is the per-pixel convex
combination ``w * original + (1 - w) * generated``.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import Conv4

GRID = 3


def block_edges(size: int, grid: int = GRID) -> list[int]:
    """Cell boundaries along one axis: ``floor(k * size / grid)`` for k = 0..grid.

    Cells differ in length by at most one pixel, and the longer cells come
    last (for 64 and a 3-cell grid: 21, 21, 22).
    """
    if size < grid:
        raise ValueError(f"axis of length {size} cannot hold {grid} cells")
    return [(k * size) // grid for k in range(grid + 1)]


def _cell_index(size: int, grid: int) -> torch.Tensor:
    edges = block_edges(size, grid)
    idx = torch.empty(size, dtype=torch.long)
    for k in range(grid):
        idx[edges[k] : edges[k + 1]] = k
    return idx


def check_weights(w: torch.Tensor) -> torch.Tensor:
    if w.shape[-2:] != (w.shape[-1], w.shape[-1]):
        raise ValueError(f"fusion weights must be a square grid, got shape {tuple(w.shape)}")
    if (w < 0).any() or (w > 1).any():
        raise ValueError("fusion weights must lie in [0, 1]")
    return w


def upsample_grid(w: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Resize a (..., g, g) grid to (..., height, width) keeping constant blocks."""
    g = w.shape[-1]
    rows = _cell_index(height, g).to(w.device)
    cols = _cell_index(width, g).to(w.device)
    return w[..., rows, :][..., cols]


def fuse(original: torch.Tensor, generated: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Blend images of shape (..., C, H, W) with a grid (..., g, g) or a full
    weight map (..., H, W); ``w`` weights the original image."""
    if original.shape != generated.shape:
        raise ValueError(
            f"image shape mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}"
        )
    h, wd = original.shape[-2:]
    if w.shape[-2:] != (h, wd):
        w = upsample_grid(w, h, wd)
    w = w.unsqueeze(-3)  # broadcast over channels
    return w * original + (1 - w) * generated


class FusionNet(nn.Module):
    """Two separate conv encoders (real, generated) -> concat -> linear -> g*g logits."""

    def __init__(self, hidden: int = 32, depth: int = 4, grid: int = GRID):
        super().__init__()
        self.grid = grid
        self.real_encoder = Conv4(hidden=hidden, depth=depth)
        self.generated_encoder = Conv4(hidden=hidden, depth=depth)
        self.head = nn.Linear(2 * hidden, grid * grid)

    def logits(self, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.real_encoder(original), self.generated_encoder(generated)], dim=-1)
        return self.head(feats)

    def forward(self, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        """Mixing weights in [0, 1], shape (B, g, g)."""
        logits = self.logits(original, generated)
        return torch.sigmoid(logits).view(-1, self.grid, self.grid)


def predict_weights(net: FusionNet, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Weights for one pair (3, H, W) -> (g, g), or a batch (B, 3, H, W) -> (B, g, g)."""
    if original.shape != generated.shape:
        raise ValueError(
            f"resolution mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}"
        )
    if original.dim() == 3:
        return net(original[None], generated[None])[0]
    return net(original, generated)
