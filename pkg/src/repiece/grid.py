"""Grid geometry, piece extraction and permutation machinery.

Conventions used everywhere in this package:

* Grid cells are indexed row-major: cell ``i`` sits at row ``i // n``,
  column ``i % n``.
* A :class:`Permutation` is stored in gather form: ``mapping[i]`` is the
  cell whose piece lands at output cell ``i``. Applying a permutation and
  then its inverse is the identity.
* Pieces are CHW float or integer arrays; images are HWC.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "GridSpec",
    "Permutation",
    "PermutationSet",
    "PieceBatch",
    "identity_permutation",
    "invert",
    "compose",
    "hamming",
    "split_image",
    "reassemble",
    "apply_permutation",
    "generate_permutation_set",
    "save_permutation_set",
    "load_permutation_set",
]


@dataclass(frozen=True)
class GridSpec:
    """An n-by-n square grid of square pieces, ``piece_px`` pixels each."""

    n: int
    piece_px: int = 24

    def __post_init__(self):
        if self.n not in (2, 3, 4):
            raise DataError(f"grid n must be 2, 3 or 4, got {self.n}")
        if self.piece_px < 8:
            raise DataError(f"piece_px must be >= 8, got {self.piece_px}")

    @property
    def cells(self) -> int:
        return self.n * self.n

    @property
    def image_px(self) -> int:
        return self.n * self.piece_px


@dataclass(frozen=True)
class Permutation:
    """Gather-form permutation: output cell i takes the piece of cell mapping[i]."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if tuple(sorted(self.mapping)) != tuple(range(len(self.mapping))):
            raise DataError(f"not a bijection on 0..{len(self.mapping) - 1}: {self.mapping}")

    def __len__(self) -> int:
        return len(self.mapping)

    @property
    def n(self) -> int:
        """Grid side for a permutation of n^2 cells."""
        root = math.isqrt(len(self.mapping))
        if root * root != len(self.mapping):
            raise DataError(f"permutation length {len(self.mapping)} is not a square")
        return root

    @property
    def is_identity(self) -> bool:
        return all(m == i for i, m in enumerate(self.mapping))


def identity_permutation(size: int) -> Permutation:
    return Permutation(tuple(range(size)))


def invert(sigma: Permutation) -> Permutation:
    """Inverse in gather form: invert(s).mapping[s.mapping[i]] == i."""
    inv = [0] * len(sigma)
    for i, m in enumerate(sigma.mapping):
        inv[m] = i
    return Permutation(tuple(inv))


def compose(first: Permutation, then: Permutation) -> Permutation:
    """Permutation equal to applying ``first`` and then ``then`` to a batch."""
    if len(first) != len(then):
        raise DataError(f"length mismatch: {len(first)} vs {len(then)}")
    return Permutation(tuple(first.mapping[m] for m in then.mapping))


def hamming(a: Permutation, b: Permutation) -> int:
    """Number of positions where the mappings differ (0..n^2; never exactly 1)."""
    if len(a) != len(b):
        raise DataError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a.mapping, b.mapping))


@dataclass(frozen=True)
class PieceBatch:
    """The n^2 pieces of one image, row-major, each piece [C, piece_px, piece_px]."""

    pieces: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.pieces.ndim != 4:
            raise DataError(f"pieces must be 4-d [n^2, C, h, w], got shape {self.pieces.shape}")

    def __len__(self) -> int:
        return self.pieces.shape[0]


def split_image(image: np.ndarray, grid: GridSpec) -> PieceBatch:
    """Cut an HxWx3 image into row-major tiles of ``piece_px`` square."""
    expected = grid.image_px
    if image.ndim != 3 or image.shape[0] != expected or image.shape[1] != expected:
        raise DataError(
            f"image must be {expected}x{expected}x3 for n={grid.n}, "
            f"piece_px={grid.piece_px}; got shape {image.shape}"
        )
    chw = np.ascontiguousarray(image.transpose(2, 0, 1))
    p = grid.piece_px
    tiles = [
        chw[:, r * p:(r + 1) * p, c * p:(c + 1) * p]
        for r in range(grid.n)
        for c in range(grid.n)
    ]
    return PieceBatch(np.stack(tiles, axis=0))


def reassemble(batch: PieceBatch, grid: GridSpec) -> np.ndarray:
    """Inverse of :func:`split_image`: tile the pieces back into an HxWx3 image."""
    if len(batch) != grid.cells:
        raise DataError(f"expected {grid.cells} pieces, got {len(batch)}")
    rows = [
        np.concatenate([batch.pieces[r * grid.n + c] for c in range(grid.n)], axis=2)
        for r in range(grid.n)
    ]
    return np.concatenate(rows, axis=1).transpose(1, 2, 0)


def apply_permutation(batch: PieceBatch, sigma: Permutation) -> PieceBatch:
    """Shuffle: output piece i is input piece sigma.mapping[i]."""
    if len(sigma) != len(batch):
        raise DataError(f"permutation length {len(sigma)} != batch size {len(batch)}")
    return PieceBatch(batch.pieces[list(sigma.mapping)], source_id=batch.source_id)


@dataclass(frozen=True)
class PermutationSet:
    """Ordered, pairwise-distinct permutations; an entry's index is its class label."""

    entries: tuple[Permutation, ...]
    n: int
    seed: int

    def __post_init__(self):
        size = self.n * self.n
        seen = set()
        for e in self.entries:
            if len(e) != size:
                raise DataError(f"entry length {len(e)} != {size}")
            if e.mapping in seen:
                raise DataError(f"duplicate entry {e.mapping}")
            seen.add(e.mapping)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identity_index(self) -> int:
        """Class label of the unshuffled arrangement."""
        for i, e in enumerate(self.entries):
            if e.is_identity:
                return i
        raise DataError("permutation set does not contain the identity")

    def index_of(self, sigma: Permutation) -> int | None:
        for i, e in enumerate(self.entries):
            if e.mapping == sigma.mapping:
                return i
        return None


def _sample_pool(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    rows = np.tile(np.arange(size), (count, 1))
    return np.unique(rng.permuted(rows, axis=1), axis=0)


def generate_permutation_set(n: int, P: int, seed: int) -> PermutationSet:
    """Greedy farthest-point selection of P permutations of the n^2 cells.

    The first entry is a seeded random permutation, the identity is then
    force-included (the evaluation needs a class that means "already
    solved"), and every later entry is the candidate with the largest
    minimum Hamming distance to the set so far. The candidate pool is
    exhaustive for n=2 and a seeded random sample of at least 10*P distinct
    permutations otherwise; ties go to the lexicographically smallest
    candidate. Deterministic given (n, P, seed).
    """
    if n not in (2, 3, 4):
        raise DataError(f"n must be 2, 3 or 4, got {n}")
    size = n * n
    total = math.factorial(size)
    if P < 1:
        raise DataError(f"P must be >= 1, got {P}")
    if P > total:
        raise DataError(f"P={P} exceeds {size}! = {total}")

    if P == 1:
        # Identity inclusion wins over the random start in the degenerate case.
        return PermutationSet((identity_permutation(size),), n=n, seed=seed)

    rng = np.random.default_rng(seed)
    start = tuple(int(v) for v in rng.permutation(size))

    if total <= max(10 * P, 5000):
        pool = np.array(list(itertools.permutations(range(size))), dtype=np.int64)
    else:
        pool = _sample_pool(size, 10 * P, rng)
        while len(pool) < P + 2:
            pool = np.unique(np.concatenate([pool, _sample_pool(size, 10 * P, rng)]), axis=0)

    chosen = [start]
    ident = tuple(range(size))
    if ident != start:
        chosen.append(ident)

    # Running min Hamming distance from every pool row to the chosen set.
    mind = np.full(len(pool), size + 1, dtype=np.int64)
    for c in chosen:
        mind = np.minimum(mind, (pool != np.array(c)).sum(axis=1))
    mind[mind == 0] = -1  # already chosen

    while len(chosen) < P:
        best = int(np.argmax(mind))  # ties: smallest index = lexicographically smallest row
        if mind[best] <= 0:
            raise DataError(f"candidate pool exhausted at {len(chosen)} of {P} entries")
        pick = tuple(int(v) for v in pool[best])
        chosen.append(pick)
        mind = np.minimum(mind, (pool != pool[best]).sum(axis=1))
        mind[best] = -1

    return PermutationSet(tuple(Permutation(c) for c in chosen), n=n, seed=seed)


def save_permutation_set(pset: PermutationSet, path) -> None:
    """Line-oriented text format; class label = 0-based line number after the header."""
    lines = [f"n={pset.n} P={len(pset)} seed={pset.seed}"]
    lines += [" ".join(str(v) for v in e.mapping) for e in pset.entries]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_permutation_set(path) -> PermutationSet:
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            fields = dict(part.split("=", 1) for part in header.split())
            n, P, seed = int(fields["n"]), int(fields["P"]), int(fields["seed"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad permutation-set header: {header!r}") from exc
        entries = []
        for line in fh:
            line = line.strip()
            if line:
                entries.append(Permutation(tuple(int(v) for v in line.split())))
    if len(entries) != P:
        raise DataError(f"header says P={P} but file has {len(entries)} entries")
    return PermutationSet(tuple(entries), n=n, seed=seed)
