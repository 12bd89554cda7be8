"""Network components: piece encoder, permutation classifier, generator tail
(residual blocks + decoder) and patch discriminator.

Each component keeps its parameterized layers in an indexed ``ModuleList``
so checkpoints can address weights as ``<component>.<layer_index>.<param>``;
activations and pooling are stateless and live in ``forward``.

The encoder runs on individual pieces (batch axis = B*n^2), so its receptive
field never crosses a piece boundary; per-piece features are then tiled into
an n x n feature grid. The only coupling between pieces is batch-norm batch
statistics in training mode.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

__all__ = [
    "Encoder",
    "Classifier",
    "GeneratorTail",
    "Discriminator",
    "combine_features",
    "encode",
    "build_models",
    "init_weights",
    "param_count",
]


class Encoder(nn.Module):
    """[M, 3, p, p] -> [M, 256, p/4, p/4]; downsamples x4, 256 channels out."""

    def __init__(self):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Conv2d(3, 64, 7, stride=1, padding=3),
            nn.BatchNorm2d(64),
            nn.Conv2d(64, 128, 3, stride=2, padding=1),
            nn.Conv2d(128, 128, 3, stride=1, padding=1),
            nn.BatchNorm2d(128),
            nn.Conv2d(128, 256, 3, stride=2, padding=1),
            nn.Conv2d(256, 256, 3, stride=1, padding=1),
            nn.BatchNorm2d(256),
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        l = self.layers
        x = F.relu(l[1](l[0](x)))
        x = l[2](x)
        x = F.relu(l[4](l[3](x)))
        x = l[5](x)
        return F.relu(l[7](l[6](x)))


def combine_features(feats: torch.Tensor, n: int) -> torch.Tensor:
    """Tile per-piece features [B*n^2, C, f, f] into a grid [B, C, n*f, n*f],
    pieces in row-major order.
    """
    m, c, f, f2 = feats.shape
    if f != f2:
        raise DataError(f"per-piece features must be square, got {f}x{f2}")
    if m % (n * n) != 0:
        raise DataError(f"batch of {m} pieces not divisible by n^2 = {n * n}")
    b = m // (n * n)
    grid = feats.view(b, n, n, c, f, f).permute(0, 3, 1, 4, 2, 5)
    return grid.reshape(b, c, n * f, n * f)


def encode(encoder: Encoder, pieces: torch.Tensor, n: int) -> torch.Tensor:
    """Encode pieces independently and combine into the feature grid."""
    if pieces.dim() != 4 or pieces.shape[1] != 3:
        raise DataError(f"pieces must be [M, 3, p, p], got {tuple(pieces.shape)}")
    return combine_features(encoder(pieces), n)


def _pool(x: torch.Tensor) -> torch.Tensor:
    # Floor division except on 1-pixel maps, where flooring would leave nothing.
    tiny = x.shape[-2] < 2 or x.shape[-1] < 2
    return F.max_pool2d(x, 2, stride=2, ceil_mode=tiny)


class Classifier(nn.Module):
    """Feature grid [B, 256, H_f, W_f] -> logits [B, P].

    Three conv(s2)+ReLU+maxpool(s2) stages, then two linear layers with no
    activation between them. The stages reduce any H_f in {12, 18, 24}
    (n = 2, 3, 4 at piece_px 24) to a single spatial cell.
    """

    def __init__(self, p_classes: int):
        super().__init__()
        if p_classes < 1:
            raise DataError(f"p_classes must be >= 1, got {p_classes}")
        self.p_classes = p_classes
        self.layers = nn.ModuleList([
            nn.Conv2d(256, 256, 3, stride=2, padding=1),
            nn.Conv2d(256, 384, 3, stride=2, padding=1),
            nn.Conv2d(384, 384, 3, stride=2, padding=1),
            nn.Linear(384, 4096),
            nn.Linear(4096, p_classes),
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.layers[:3]:
            x = _pool(F.relu(conv(x)))
        if x.shape[-2] != 1 or x.shape[-1] != 1:
            raise DataError(
                f"classifier stages ended at {tuple(x.shape[-2:])}, expected 1x1; "
                "feature grid too large for this head")
        x = x.flatten(1)
        return self.layers[4](self.layers[3](x))


class _ResidualBlock(nn.Module):
    """conv+BN+ReLU, conv+BN, elementwise-sum skip; stride 1 throughout."""

    def __init__(self, channels: int = 256):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, stride=1, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=1, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))


class GeneratorTail(nn.Module):
    """Warped feature grid [B, 256, H_f, W_f] -> image [B, 3, 4*H_f, 4*W_f].

    Eight identical residual blocks, then two transposed-conv upsampling
    stages and a final 7x7 conv; tanh bounds the output to [-1, 1].
    """

    def __init__(self):
        super().__init__()
        deconv = [
            nn.ConvTranspose2d(256, 128, 3, stride=2, padding=1, output_padding=1),
            nn.Conv2d(128, 128, 3, stride=1, padding=1),
            nn.BatchNorm2d(128),
            nn.ConvTranspose2d(128, 64, 3, stride=2, padding=1, output_padding=1),
            nn.Conv2d(64, 64, 3, stride=1, padding=1),
            nn.BatchNorm2d(64),
            nn.Conv2d(64, 3, 7, stride=1, padding=3),
        ]
        self.layers = nn.ModuleList([_ResidualBlock() for _ in range(8)] + deconv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        l = self.layers
        for block in l[:8]:
            x = block(x)
        x = l[8](x)
        x = F.relu(l[10](l[9](x)))
        x = l[11](x)
        x = F.relu(l[13](l[12](x)))
        return torch.tanh(l[14](x))


class Discriminator(nn.Module):
    """Image [B, 3, H, W] -> patch logits [B, 1, H/4, W/4]; works on any size
    divisible by 4. Sigmoid is applied inside the adversarial loss, not here.
    """

    def __init__(self):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Conv2d(3, 32, 3, stride=1, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.Conv2d(64, 64, 3, stride=1, padding=1),
            nn.BatchNorm2d(64),
            nn.Conv2d(64, 128, 3, stride=2, padding=1),
            nn.Conv2d(128, 128, 3, stride=1, padding=1),
            nn.BatchNorm2d(128),
            nn.Conv2d(128, 256, 3, stride=1, padding=1),
            nn.BatchNorm2d(256),
            nn.Conv2d(256, 1, 3, stride=1, padding=1),
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 4 != 0 or x.shape[-1] % 4 != 0:
            raise DataError(f"image dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        l = self.layers
        slope = 0.2
        x = F.leaky_relu(l[0](x), slope)
        x = F.leaky_relu(l[1](x), slope)
        x = F.leaky_relu(l[3](l[2](x)), slope)
        x = F.leaky_relu(l[4](x), slope)
        x = F.leaky_relu(l[6](l[5](x)), slope)
        x = F.leaky_relu(l[8](l[7](x)), slope)
        return l[9](x)


def init_weights(module: nn.Module) -> None:
    """Zero-mean Gaussian init, std 0.02; BN scale around 1. Call under a
    seeded torch RNG for reproducible starts.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def build_models(p_classes: int, seed: int) -> dict[str, nn.Module]:
    """All four components, deterministically initialized from ``seed``."""
    torch.manual_seed(seed)
    models = {
        "encoder": Encoder(),
        "classifier": Classifier(p_classes),
        "generator": GeneratorTail(),
        "discriminator": Discriminator(),
    }
    for net in models.values():
        init_weights(net)
    return models


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
