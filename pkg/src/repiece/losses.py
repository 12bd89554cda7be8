"""Training objectives: classification (cross-entropy, KL, focal), the
adversarial pair, the seam-consistency (boundary SSIM) term and their
weighted total.

All functions are pure and operate on torch tensors; probabilities are
clamped at 1e-12 before any logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .compat import _ssim_windows
from .errors import ConfigError, DataError, NumericalError
from .grid import GridSpec

__all__ = [
    "EPS",
    "LossWeights",
    "BoundaryLossConfig",
    "validate_distribution",
    "cross_entropy",
    "kl_divergence",
    "focal_loss",
    "jigsaw_loss",
    "adversarial_losses",
    "boundary_loss",
    "total_loss",
]

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three total-loss terms; all default to 1."""

    w_jigsaw: float = 1.0
    w_gan: float = 1.0
    w_boundary: float = 1.0

    def __post_init__(self):
        for name in ("w_jigsaw", "w_gan", "w_boundary"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class BoundaryLossConfig:
    """Seam-loss strips are w_b pixels wide (independent of the reference
    pipeline's pix) and scored with a sliding 1-D SSIM window.
    """

    w_b: int = 2
    window: int = 8
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.w_b < 1:
            raise ConfigError(f"w_b must be >= 1, got {self.w_b}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")


def validate_distribution(t: torch.Tensor) -> torch.Tensor:
    """Check rows are probability vectors: [B, P], entries in [0, 1], rows
    summing to 1 within 1e-6.
    """
    if t.dim() != 2:
        raise DataError(f"distribution must be [B, P], got {tuple(t.shape)}")
    if t.min() < 0 or t.max() > 1 + 1e-6:
        raise DataError("distribution entries outside [0, 1]")
    sums = t.sum(dim=1)
    if (sums - 1).abs().max() > 1e-6:
        raise DataError("distribution rows do not sum to 1")
    return t


def cross_entropy(c_x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """-sum p*log(c_x) per row, averaged over the batch."""
    validate_distribution(c_x)
    validate_distribution(p)
    if c_x.shape != p.shape:
        raise DataError(f"shape mismatch: {tuple(c_x.shape)} vs {tuple(p.shape)}")
    return -(p * torch.log(c_x.clamp(EPS, 1.0))).sum(dim=1).mean()


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """sum p*log(p/q) per row, averaged over the batch; zero terms where p=0."""
    validate_distribution(p)
    validate_distribution(q)
    if p.shape != q.shape:
        raise DataError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    ratio = p.clamp(EPS, 1.0) / q.clamp(EPS, 1.0)
    return torch.xlogy(p, ratio).sum(dim=1).mean()


def focal_loss(c_x: torch.Tensor, p: torch.Tensor, gamma: float) -> torch.Tensor:
    """-sum_j p_j * (1 - c_j*p_j)^gamma * log(c_j), averaged over the batch.

    The modulating factor down-weights classes the prediction already
    covers; with gamma=0 this is exactly cross-entropy, and for one-hot p
    it reduces to the usual -(1-p_t)^gamma * log(p_t).
    """
    if gamma < 0:
        raise DataError(f"gamma must be >= 0, got {gamma}")
    validate_distribution(c_x)
    validate_distribution(p)
    if c_x.shape != p.shape:
        raise DataError(f"shape mismatch: {tuple(c_x.shape)} vs {tuple(p.shape)}")
    mod = (1 - c_x * p) ** gamma
    return -(p * mod * torch.log(c_x.clamp(EPS, 1.0))).sum(dim=1).mean()


def jigsaw_loss(logits: torch.Tensor, ref_labels, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss of softmax(logits) against hard reference labels."""
    if logits.dim() != 2:
        raise DataError(f"logits must be [B, P], got {tuple(logits.shape)}")
    labels = torch.as_tensor(ref_labels, dtype=torch.int64)
    if labels.shape != (logits.shape[0],):
        raise DataError(f"expected {logits.shape[0]} labels, got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(f"label out of range [0, {logits.shape[1]})")
    if gamma < 0:
        raise DataError(f"gamma must be >= 0, got {gamma}")
    logp = F.log_softmax(logits, dim=1)
    lp_t = logp[torch.arange(logits.shape[0]), labels].clamp(min=math.log(EPS))
    p_t = lp_t.exp()
    return -((1 - p_t) ** gamma * lp_t).mean()


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor,
                       saturating: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """(d_loss, g_loss) from pre-sigmoid patch logits, averaged over all cells.

    d_loss = -E[log s(D_real)] - E[log(1 - s(D_fake))]. The generator term
    defaults to the non-saturating -E[log s(D_fake)]; ``saturating`` selects
    the literal minimax +E[log(1 - s(D_fake))] instead.
    """
    if d_real.shape != d_fake.shape:
        raise DataError(f"shape mismatch: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    d_loss = -F.logsigmoid(d_real).mean() - F.logsigmoid(-d_fake).mean()
    if saturating:
        g_loss = F.logsigmoid(-d_fake).mean()
    else:
        g_loss = -F.logsigmoid(d_fake).mean()
    return d_loss, g_loss


def _seam_strips(x01: torch.Tensor, grid: GridSpec, wb: int):
    """Strip pairs along every seam of the reconstructed image, mirrored so
    both strips read outward-first from the seam. Returns (tb_a, tb_b,
    lr_a, lr_b), each [B*n(n-1), C, wb, piece_px] with the seam as long axis.
    """
    n, p = grid.n, grid.piece_px
    tb_a, tb_b, lr_a, lr_b = [], [], [], []
    for r in range(n - 1):
        for c in range(n):
            cols = slice(c * p, (c + 1) * p)
            edge = (r + 1) * p
            tb_a.append(x01[:, :, edge - wb:edge, cols].flip(-2))
            tb_b.append(x01[:, :, edge:edge + wb, cols])
    for r in range(n):
        for c in range(n - 1):
            rows = slice(r * p, (r + 1) * p)
            edge = (c + 1) * p
            lr_a.append(x01[:, :, rows, edge - wb:edge].flip(-1).transpose(-1, -2))
            lr_b.append(x01[:, :, rows, edge:edge + wb].transpose(-1, -2))
    return (torch.cat(tb_a), torch.cat(tb_b), torch.cat(lr_a), torch.cat(lr_b))


def boundary_loss(g_x: torch.Tensor, grid: GridSpec,
                  cfg: BoundaryLossConfig = BoundaryLossConfig()) -> torch.Tensor:
    """(1 - SSIM_tb) + (1 - SSIM_lr) over the piece seams of ``g_x``.

    ``g_x`` is a tanh-range [-1, 1] batch [B, 3, H, W] with H = W =
    n*piece_px; SSIM_tb / SSIM_lr average the windowed SSIM of the strips
    on either side of every horizontal / vertical seam, over seams and
    batch. Differentiable in ``g_x``; range [0, 4].
    """
    if g_x.dim() != 4:
        raise DataError(f"expected [B, 3, H, W], got {tuple(g_x.shape)}")
    side = grid.image_px
    if g_x.shape[-2] != side or g_x.shape[-1] != side:
        raise DataError(f"image must be {side}x{side} for this grid, "
                        f"got {tuple(g_x.shape[-2:])}")
    if not 1 <= cfg.w_b < grid.piece_px / 2:
        raise ConfigError(f"w_b must satisfy 1 <= w_b < {grid.piece_px / 2:g}, got {cfg.w_b}")
    x01 = (g_x + 1) / 2
    tb_a, tb_b, lr_a, lr_b = _seam_strips(x01, grid, cfg.w_b)
    ssim_tb = _ssim_windows(tb_a, tb_b, cfg.window, cfg.k1, cfg.k2).mean()
    ssim_lr = _ssim_windows(lr_a, lr_b, cfg.window, cfg.k1, cfg.k2).mean()
    return (1 - ssim_tb) + (1 - ssim_lr)


def total_loss(values: Mapping[str, torch.Tensor | float],
               weights: LossWeights = LossWeights()):
    """Weighted sum of the components ``jigsaw``, ``gan`` and ``boundary``.

    A non-finite component aborts with a diagnostic naming it, so training
    failures point at the responsible term rather than a NaN total.
    """
    unknown = set(values) - {"jigsaw", "gan", "boundary"}
    if unknown:
        raise DataError(f"unknown loss components: {sorted(unknown)}")
    for name, v in values.items():
        finite = torch.isfinite(v).all() if isinstance(v, torch.Tensor) else math.isfinite(v)
        if not finite:
            raise NumericalError(f"loss component '{name}' is not finite: {v}")
    w = {"jigsaw": weights.w_jigsaw, "gan": weights.w_gan, "boundary": weights.w_boundary}
    total = 0.0
    for name, v in values.items():
        total = total + w[name] * v
    return total
