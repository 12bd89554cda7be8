"""Corpus ingestion and sampling: manifests with a stratified
jigsaw/real/test split, image preprocessing, and shuffled-sample generation
with the applied class retained for evaluation only.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .grid import GridSpec, PermutationSet, PieceBatch, apply_permutation, split_image

__all__ = [
    "SPLITS",
    "ManifestEntry",
    "DatasetManifest",
    "ShuffledSample",
    "build_manifest",
    "write_manifest",
    "load_manifest",
    "load_image",
    "preprocess",
    "to_model_range",
    "from_model_range",
    "shuffle_seed",
    "make_shuffled_sample",
]

log = logging.getLogger(__name__)

SPLITS = ("jigsaw", "real", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    category: str
    domain: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    seed: int = 0

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]


@dataclass(frozen=True)
class ShuffledSample:
    """Shuffled pieces plus the class that produced them.

    ``true_class`` exists for evaluation; nothing on the training path
    accepts a ShuffledSample, only its pieces.
    """

    pieces: PieceBatch
    true_class: int
    image_id: str


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def build_manifest(corpus_dir, seed: int,
                   fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)) -> DatasetManifest:
    """Index a ``<category>/<domain>/<file>`` tree into a split manifest.

    The split is stratified per category with a seeded shuffle, so the same
    (directory, seed) always produces the same manifest. Undecodable files
    are skipped with a log entry; empty categories only warn.
    """
    root = Path(corpus_dir)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    if len(fractions) != 3 or any(f < 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"fractions must be three non-negative values summing to 1, "
                          f"got {fractions}")

    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        items = []
        for dom_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            for f in sorted(dom_dir.iterdir()):
                if not f.is_file() or f.suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                if not _decodable(f):
                    log.warning("skipping undecodable file %s", f)
                    continue
                rel = f.relative_to(root)
                items.append((str(rel.with_suffix("")), str(f.resolve()),
                              cat_dir.name, dom_dir.name))
        if not items:
            log.warning("category %s has no decodable images", cat_dir.name)
            continue
        order = rng.permutation(len(items))
        k1 = round(fractions[0] * len(items))
        k2 = round((fractions[0] + fractions[1]) * len(items))
        for pos, idx in enumerate(order):
            split = SPLITS[0] if pos < k1 else SPLITS[1] if pos < k2 else SPLITS[2]
            image_id, path, category, domain = items[idx]
            entries.append(ManifestEntry(image_id, path, category, domain, split))
    entries.sort(key=lambda e: e.image_id)
    return DatasetManifest(tuple(entries), tuple(fractions), seed)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({
                "image_id": e.image_id, "path": e.path, "category": e.category,
                "domain": e.domain, "split": e.split,
            }, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                entry = ManifestEntry(d["image_id"], d["path"], d["category"],
                                      d["domain"], d["split"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest line") from exc
            if entry.split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {entry.split!r}")
            entries.append(entry)
    return DatasetManifest(tuple(entries))


def load_image(path) -> np.ndarray:
    """Decode to HWC uint8 RGB."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Shorter-side resize then center crop to the grid's square size.

    Already-conforming images pass through untouched, which makes the
    operation idempotent.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected HWC RGB image, got shape {image.shape}")
    side = grid.image_px
    h, w = image.shape[:2]
    if (h, w) == (side, side):
        return image
    if min(h, w) != side:
        scale = side / min(h, w)
        new_w, new_h = max(side, round(w * scale)), max(side, round(h * scale))
        pil = Image.fromarray(np.ascontiguousarray(image))
        image = np.asarray(pil.resize((new_w, new_h), Image.Resampling.BILINEAR))
        h, w = image.shape[:2]
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top:top + side, left:left + side]


def to_model_range(image: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]."""
    return (image.astype(np.float32) / 127.5) - 1.0


def from_model_range(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def shuffle_seed(global_seed: int, image_id: str, epoch: int | None = None) -> int:
    """Stable per-image shuffle seed; with ``epoch`` the draw varies per epoch.

    Hash-derived (not Python's salted ``hash``) so external reference-label
    producers can reproduce the exact shuffle the trainer applies.
    """
    tag = f"{global_seed}:{'' if epoch is None else epoch}:{image_id}"
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_shuffled_sample(image: np.ndarray, grid: GridSpec, pset: PermutationSet,
                         seed: int, image_id: str = "") -> ShuffledSample:
    """Apply a uniformly drawn set entry to a preprocessed image.

    The image must already be the grid's square size (see
    :func:`preprocess`); pieces come out as float32 in [-1, 1].
    """
    if grid.n != pset.n:
        raise DataError(f"grid n={grid.n} does not match permutation set n={pset.n}")
    rng = np.random.default_rng(seed)
    true_class = int(rng.integers(len(pset)))
    if image.dtype == np.uint8:
        image = to_model_range(image)
    batch = split_image(image, grid)
    shuffled = apply_permutation(batch, pset.entries[true_class])
    return ShuffledSample(pieces=PieceBatch(shuffled.pieces, source_id=image_id),
                          true_class=true_class, image_id=image_id)
