"""Differentiable block warp driven by an integer displacement field.

A permutation of grid cells becomes a dense flow field at feature
resolution; warping is a pure gather (no interpolation), so rearranging
feature blocks this way is exactly equivalent to rearranging image pieces
before encoding, and gradients flow back as the inverse rearrangement with
no attenuation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DataError
from .grid import Permutation

__all__ = ["FlowField", "flow_from_permutation", "warp"]


@dataclass(frozen=True)
class FlowField:
    """Integer displacements [2, H_f, W_f] plus the block geometry behind them.

    Channel 0 shifts columns (horizontal), channel 1 shifts rows (vertical):
    output[y, x] reads input[y + flow[1, y, x], x + flow[0, y, x]]. Every
    displacement is a multiple of ``block`` (the per-piece feature side), so
    the warp moves whole blocks and never interpolates.
    """

    displacement: torch.Tensor
    n: int
    block: int

    def __post_init__(self):
        d = self.displacement
        if d.dim() != 3 or d.shape[0] != 2:
            raise DataError(f"displacement must be [2, H, W], got {tuple(d.shape)}")
        if d.dtype != torch.int64:
            raise DataError(f"displacement must be int64, got {d.dtype}")
        if d.shape[1] != self.n * self.block or d.shape[2] != self.n * self.block:
            raise DataError("displacement extent does not match n * block")


def flow_from_permutation(sigma: Permutation, h_f: int, w_f: int) -> FlowField:
    """Flow that moves feature blocks the same way ``apply_permutation``
    moves pieces: every cell of output block i points at the matching cell
    of input block sigma.mapping[i].
    """
    n = sigma.n
    if h_f != w_f:
        raise DataError(f"feature map must be square, got {h_f}x{w_f}")
    if h_f % n != 0:
        raise DataError(f"feature side {h_f} not divisible by n={n}")
    f = h_f // n
    flow = torch.zeros((2, h_f, w_f), dtype=torch.int64)
    for cell, src in enumerate(sigma.mapping):
        r, c = divmod(cell, n)
        sr, sc = divmod(src, n)
        rows = slice(r * f, (r + 1) * f)
        cols = slice(c * f, (c + 1) * f)
        flow[0, rows, cols] = (sc - c) * f
        flow[1, rows, cols] = (sr - r) * f
    return FlowField(displacement=flow, n=n, block=f)


def warp(x: torch.Tensor, field: FlowField) -> torch.Tensor:
    """Gather ``x`` ([B, C, H_f, W_f]) through the flow field.

    Every target coordinate must land inside the tensor; flows built by
    :func:`flow_from_permutation` always do. Implemented with advanced
    indexing, so autograd scatters gradients back to the source pixels,
    i.e. applies the inverse block permutation to the upstream gradient
    with no attenuation. Channels and batch entries never mix.
    """
    if x.dim() != 4:
        raise DataError(f"expected [B, C, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if field.displacement.shape[-2:] != (h, w):
        raise DataError(
            f"flow extent {tuple(field.displacement.shape[-2:])} does not match input {(h, w)}")
    grid_r = torch.arange(h).view(h, 1) + field.displacement[1]
    grid_c = torch.arange(w).view(1, w) + field.displacement[0]
    if grid_r.min() < 0 or grid_r.max() >= h or grid_c.min() < 0 or grid_c.max() >= w:
        raise DataError("flow points outside the input tensor")
    return x[:, :, grid_r, grid_c]
