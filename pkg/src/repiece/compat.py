"""Boundary-compatibility pipeline that produces reference (pseudo) labels.

Five stages: cut edge strips from each piece, score every top/bottom and
left/right strip pairing with PSNR, greedily pick the n(n-1) best pairs per
relation, assemble the pairs into a placement with a maximum-score spanning
forest, and project the result onto a :class:`~repiece.grid.PermutationSet`.

Also home to the strip SSIM used by the seam-consistency loss; it is written
with torch so the loss path stays differentiable, but accepts plain numpy
arrays and returns a float for them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .grid import Permutation, PermutationSet, PieceBatch, hamming, invert

__all__ = [
    "PSNR_CAP",
    "BoundaryStrips",
    "CompatMatrix",
    "NeighborPairs",
    "ReferenceLabel",
    "extract_strips",
    "strip_psnr",
    "strip_ssim",
    "build_compat_matrix",
    "greedy_select_pairs",
    "mst_assemble",
    "reference_label",
    "write_reference_csv",
    "read_reference_csv",
]

PSNR_CAP = 99.0  # stands in for +inf on identical strips; dominates any real score


def _to_unit(a: np.ndarray) -> np.ndarray:
    """Map pixel data to float64 in [0, 1].

    Integer arrays are assumed 8-bit ([0, 255]); float arrays containing
    negatives are assumed [-1, 1] and shifted, otherwise taken as [0, 1].
    Callers that score several arrays against each other should normalize
    them jointly (see :func:`build_compat_matrix`) so one convention applies.
    """
    a = np.asarray(a)
    if np.issubdtype(a.dtype, np.integer):
        return a.astype(np.float64) / 255.0
    a = a.astype(np.float64)
    if a.min() < 0.0:
        return (a + 1.0) / 2.0
    return a


@dataclass(frozen=True)
class BoundaryStrips:
    """Edge strips of one piece, outermost rows/columns first.

    top/bottom: [C, pix, piece_px]; left/right: [C, piece_px, pix]. With the
    outermost-first ordering, elementwise comparison of piece i's top strip
    against piece j's bottom strip matches rows mirrored across the seam.
    """

    top: np.ndarray
    bottom: np.ndarray
    left: np.ndarray
    right: np.ndarray
    pix: int


def extract_strips(piece: np.ndarray, pix: int = 1) -> BoundaryStrips:
    """Cut the four boundary strips of width ``pix`` from a CHW piece."""
    if piece.ndim != 3:
        raise DataError(f"piece must be CHW, got shape {piece.shape}")
    side = piece.shape[1]
    if not 1 <= pix < side / 2:
        raise DataError(f"pix must satisfy 1 <= pix < {side / 2:g}, got {pix}")
    return BoundaryStrips(
        top=piece[:, :pix, :].copy(),
        bottom=piece[:, -1:-pix - 1:-1, :].copy(),
        left=piece[:, :, :pix].copy(),
        right=piece[:, :, -1:-pix - 1:-1].copy(),
        pix=pix,
    )


def strip_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two equally shaped strips, capped at 99.0.

    Inputs are normalized to [0, 1] (see :func:`_to_unit`), so MAX = 1 and
    the value is 10*log10(1/MSE). Identical strips hit the cap.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"strip shapes differ: {a.shape} vs {b.shape}")
    both_float = not (np.issubdtype(a.dtype, np.integer) or np.issubdtype(b.dtype, np.integer))
    if both_float and min(a.min(), b.min()) < 0.0:
        # Joint decision: one signed strip means both came from [-1, 1] data.
        a, b = (a.astype(np.float64) + 1) / 2, (b.astype(np.float64) + 1) / 2
    else:
        a, b = _to_unit(a), _to_unit(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass(frozen=True)
class CompatMatrix:
    """n^2 x n^2 PSNR scores; diagonal is -inf (a piece never neighbors itself).

    kind="top_bottom": values[i, j] scores piece j sitting directly above
    piece i (top strip of i vs bottom strip of j). kind="left_right":
    values[i, j] scores piece j sitting directly left of piece i.
    """

    values: np.ndarray
    kind: str


def build_compat_matrix(batch: PieceBatch, kind: str, pix: int = 1) -> CompatMatrix:
    if kind not in ("top_bottom", "left_right"):
        raise DataError(f"kind must be 'top_bottom' or 'left_right', got {kind!r}")
    unit = _to_unit(batch.pieces)  # one normalization for the whole batch
    strips = [extract_strips(p, pix) for p in unit]
    m = len(batch)
    values = np.full((m, m), -np.inf)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            if kind == "top_bottom":
                values[i, j] = strip_psnr(strips[i].top, strips[j].bottom)
            else:
                values[i, j] = strip_psnr(strips[i].left, strips[j].right)
    return CompatMatrix(values=values, kind=kind)


@dataclass(frozen=True)
class NeighborPairs:
    """Selected (a, b, score) tuples: a sits above b, or a sits left of b."""

    relation: str  # "above" | "left_of"
    pairs: tuple[tuple[int, int, float], ...]


def greedy_select_pairs(matrix: CompatMatrix) -> NeighborPairs:
    """Pick the n(n-1) best pairs: repeatedly take the global maximum entry,
    then invalidate its row and column so each piece keeps at most one
    neighbor per side. Ties go to the smallest (row, column) index.
    """
    values = matrix.values.copy()
    m = values.shape[0]
    n = int(round(math.sqrt(m)))
    relation = "above" if matrix.kind == "top_bottom" else "left_of"
    pairs = []
    for _ in range(n * (n - 1)):
        flat = int(np.argmax(values))  # first occurrence = lexicographic tie-break
        i, j = divmod(flat, m)
        if not np.isfinite(values[i, j]):
            break
        pairs.append((j, i, float(values[i, j])))  # j above / left of i
        values[i, :] = -np.inf
        values[:, j] = -np.inf
    return NeighborPairs(relation=relation, pairs=tuple(pairs))


def _merge_components(edges, cells):
    """Kruskal-style growth of piece components on an unbounded virtual grid.

    edges: (score, tag, a, b, (dr, dc)) meaning pos(a) = pos(b) + (dr, dc).
    Returns (components, skipped) where components maps a component id to
    {piece: (row, col)} in that component's frame.
    """
    comp_of = {p: p for p in range(cells)}
    members = {p: {p: (0, 0)} for p in range(cells)}
    skipped = []
    for edge in edges:
        _, _, a, b, (dr, dc) = edge
        ca, cb = comp_of[a], comp_of[b]
        if ca == cb:
            continue  # already connected; relation either holds or conflicts
        br, bc = members[cb][b]
        ar, ac = members[ca][a]
        off = (br + dr - ar, bc + dc - ac)
        occupied = {pos for pos in members[cb].values()}
        moved = {p: (r + off[0], c + off[1]) for p, (r, c) in members[ca].items()}
        if any(pos in occupied for pos in moved.values()):
            skipped.append(edge)
            continue
        members[cb].update(moved)
        for p in moved:
            comp_of[p] = cb
        del members[ca]
    return members, skipped


def mst_assemble(tb: NeighborPairs, lr: NeighborPairs, n: int) -> Permutation:
    """Assemble selected pairs into a total placement of the n^2 pieces.

    Edges are processed in score-descending order, growing a spanning forest
    where each edge pins the relative grid offset of its two pieces; edges
    whose merge would overlap occupied cells are skipped. The largest
    component is cropped to an n x n window (slid to retain the most pieces
    when the component overflows), remaining pieces are attached through
    their best surviving edges, and any leftovers fill free cells in index
    order. Returns the placement: mapping[grid cell] = input piece index.
    """
    cells = n * n
    edges = [(s, 0, a, b, (-1, 0)) for a, b, s in tb.pairs]
    edges += [(s, 1, a, b, (0, -1)) for a, b, s in lr.pairs]
    edges.sort(key=lambda e: (-e[0], e[1], e[2], e[3]))

    members, _ = _merge_components(edges, cells)

    main_id = sorted(members, key=lambda cid: (-len(members[cid]), min(members[cid])))[0]
    main = members[main_id]

    rows = [r for r, _ in main.values()]
    cols = [c for _, c in main.values()]
    rmin, rmax = min(rows), max(rows)
    cmin, cmax = min(cols), max(cols)

    def retained(r0, c0):
        return sum(1 for r, c in main.values() if r0 <= r < r0 + n and c0 <= c < c0 + n)

    anchors = [
        (r0, c0)
        for r0 in range(rmin, max(rmin, rmax - n + 1) + 1)
        for c0 in range(cmin, max(cmin, cmax - n + 1) + 1)
    ]
    r0, c0 = max(anchors, key=lambda a: (retained(*a), -a[0], -a[1]))

    placed: dict[int, tuple[int, int]] = {}
    used: set[tuple[int, int]] = set()
    for p, (r, c) in sorted(main.items()):
        rr, cc = r - r0, c - c0
        if 0 <= rr < n and 0 <= cc < n:
            placed[p] = (rr, cc)
            used.add((rr, cc))

    # Attach unplaced pieces through their strongest edges first.
    progress = True
    while progress:
        progress = False
        for _, _, a, b, (dr, dc) in edges:
            if a in placed and b not in placed:
                tgt = (placed[a][0] - dr, placed[a][1] - dc)
            elif b in placed and a not in placed:
                tgt = (placed[b][0] + dr, placed[b][1] + dc)
            else:
                continue
            if 0 <= tgt[0] < n and 0 <= tgt[1] < n and tgt not in used:
                piece = b if a in placed else a
                placed[piece] = tgt
                used.add(tgt)
                progress = True

    free = [(r, c) for r in range(n) for c in range(n) if (r, c) not in used]
    leftover = [p for p in range(cells) if p not in placed]
    for p, pos in zip(leftover, free):
        placed[p] = pos

    mapping = [0] * cells
    for p, (r, c) in placed.items():
        mapping[r * n + c] = p
    return Permutation(tuple(mapping))


@dataclass(frozen=True)
class ReferenceLabel:
    """Projection of the assembled shuffle estimate onto the permutation set.

    ``assembled`` is the estimated applied shuffle (the inverse of the
    placement returned by :func:`mst_assemble`), so it lives in the same
    space as the set entries and the classifier's classes.
    """

    class_index: int
    assembled: Permutation
    projection_distance: int


def reference_label(batch: PieceBatch, pset: PermutationSet, pix: int = 1) -> ReferenceLabel:
    """Run the five-stage pipeline and project onto the nearest set entry.

    Ties in Hamming distance go to the lowest class index. When the
    assembled permutation is itself a set entry the distance is 0.
    """
    n = pset.n
    if len(batch) != n * n:
        raise DataError(f"batch has {len(batch)} pieces, set expects {n * n}")
    tb = greedy_select_pairs(build_compat_matrix(batch, "top_bottom", pix))
    lr = greedy_select_pairs(build_compat_matrix(batch, "left_right", pix))
    placement = mst_assemble(tb, lr, n)
    assembled = invert(placement)
    distances = [hamming(assembled, e) for e in pset.entries]
    best = int(np.argmin(distances))
    return ReferenceLabel(class_index=best, assembled=assembled,
                          projection_distance=int(distances[best]))


def _ssim_windows(a: torch.Tensor, b: torch.Tensor, window: int,
                  k1: float = 0.01, k2: float = 0.03) -> torch.Tensor:
    """Mean windowed SSIM for a batch of strip pairs [N, C, rows, L].

    Windows of ``window`` elements slide along the last axis (shrinking to
    fit short strips); each window pools channels and rows into one SSIM
    sample. Returns [N]. Dynamic range is taken as 1, so inputs must
    already live in [0, 1].
    """
    n_, c_, r_, length = a.shape
    w = min(window, length)
    c1, c2 = k1 ** 2, k2 ** 2
    pa = a.unfold(-1, w, 1).permute(0, 3, 1, 2, 4).reshape(n_, length - w + 1, -1)
    pb = b.unfold(-1, w, 1).permute(0, 3, 1, 2, 4).reshape(n_, length - w + 1, -1)
    mu_a, mu_b = pa.mean(-1), pb.mean(-1)
    da, db = pa - mu_a.unsqueeze(-1), pb - mu_b.unsqueeze(-1)
    var_a, var_b = (da ** 2).mean(-1), (db ** 2).mean(-1)
    cov = (da * db).mean(-1)
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) \
        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return ssim.mean(-1)


def strip_ssim(a, b, window: int = 8):
    """Mean SSIM over 1-D windows slid along the strip's long axis.

    Standard constants K1=0.01, K2=0.03 with dynamic range 1 after the
    usual normalization to [0, 1]. Window statistics pool all channels and
    strip rows; windows longer than the strip shrink to fit. Accepts numpy
    arrays (returns float) or torch tensors (returns a scalar tensor on the
    autograd tape).
    """
    tensor_in = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta = a if isinstance(a, torch.Tensor) else torch.as_tensor(_to_unit(np.asarray(a)))
    tb = b if isinstance(b, torch.Tensor) else torch.as_tensor(_to_unit(np.asarray(b)))
    if ta.shape != tb.shape:
        raise DataError(f"strip shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.dim() != 3:
        raise DataError(f"strips must be 3-d [C, h, w], got {tuple(ta.shape)}")
    if ta.shape[-2] > ta.shape[-1]:  # put the long axis last
        ta, tb = ta.transpose(-1, -2), tb.transpose(-1, -2)
    out = _ssim_windows(ta.unsqueeze(0), tb.unsqueeze(0), window)[0]
    return out if tensor_in else float(out)


def write_reference_csv(path, rows) -> None:
    """rows: iterable of (image_id, ReferenceLabel)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class_index", "projection_distance", "assembled_mapping"])
        for image_id, label in rows:
            writer.writerow([
                image_id,
                label.class_index,
                label.projection_distance,
                "-".join(str(v) for v in label.assembled.mapping),
            ])


def read_reference_csv(path) -> dict[str, int]:
    """Read image_id -> class_index; accepts our exports and any third-party
    labels written in the same schema (extra columns are ignored).
    """
    labels: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image_id" not in reader.fieldnames \
                or "class_index" not in reader.fieldnames:
            raise DataError(f"{path}: expected columns image_id,class_index")
        for row in reader:
            labels[row["image_id"]] = int(row["class_index"])
    return labels
