"""Synthetic smooth-gradient corpora.

Linear two-direction gradients have near-continuous seams, so the boundary
pipeline can solve them almost perfectly; an optional noise knob degrades
the reference labels in a controlled way for training experiments where an
imperfect pseudo-label matters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["gradient_image", "generate_corpus"]


# Per-channel (horizontal, vertical) slope ranges. R leans horizontal and G
# vertical, so a piece's mean color pins down its source cell the same way
# in every image; B varies freely to keep the corpus from being one image.
_SLOPE_RANGES = (
    ((0.55, 0.75), (0.15, 0.30)),
    ((0.15, 0.30), (0.55, 0.75)),
    ((0.35, 0.55), (0.35, 0.55)),
)


def gradient_image(size: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """HWC uint8 image of smooth linear ramps, one per channel.

    Slopes are always positive and each channel keeps a fixed dominant
    orientation across images, so a classifier trained on a handful of
    them transfers to unseen ones instead of memorizing per-image sign
    patterns. Seams stay continuous everywhere; the noise knob is the only
    thing that degrades boundary matching.
    """
    u, v = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size))
    channels = []
    for (ulo, uhi), (vlo, vhi) in _SLOPE_RANGES:
        g = rng.uniform(ulo, uhi) * u + rng.uniform(vlo, vhi) * v
        g = (g - g.min()) / (g.max() - g.min())
        channels.append(0.08 + 0.84 * g)
    img = np.stack(channels, axis=2)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_corpus(out_dir, count: int, image_px: int, seed: int, noise: float = 0.0,
                    categories: tuple[str, ...] = ("grad_a", "grad_b"),
                    domain: str = "synthetic") -> list[Path]:
    """Write ``count`` gradient PNGs in the <category>/<domain>/<file> layout."""
    root = Path(out_dir)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        img = gradient_image(image_px, rng, noise)
        target = root / categories[i % len(categories)] / domain / f"img_{i:03d}.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(target)
        paths.append(target)
    return paths
