"""Accuracy metrics, checkpoint inference, ablation and timing drivers.

Inference loads the encoder and classifier only; the boundary pipeline
and the adversarial networks never run on this path.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_models
from .compat import reference_label
from .data import (DatasetManifest, IMAGE_EXTENSIONS, from_model_range, load_image,
                   make_shuffled_sample, preprocess, shuffle_seed, to_model_range)
from .errors import DataError
from .grid import (GridSpec, Permutation, PermutationSet, apply_permutation,
                   generate_permutation_set, invert, reassemble, split_image)
from .networks import encode
from .train import fit, make_config

__all__ = [
    "EvalReport",
    "reorganization_accuracy",
    "neighbor_accuracy",
    "predict_classes",
    "solve",
    "evaluate_manifest",
    "write_predictions_csv",
    "report_from_csv",
    "AblationVariant",
    "run_ablation",
    "time_solver",
]

PREDICTION_FIELDS = ("image_id", "predicted_class", "true_class", "neighbor_accuracy")
INFERENCE_COMPONENTS = ("encoder", "classifier")


@dataclass(frozen=True)
class EvalReport:
    overall: float
    per_category: dict[str, float]
    neighbor: float
    ref_agreement: float
    mean_seconds: float
    median_seconds: float
    count: int

    def as_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_category": dict(self.per_category),
            "neighbor": self.neighbor,
            "ref_agreement": self.ref_agreement,
            "mean_seconds": self.mean_seconds,
            "median_seconds": self.median_seconds,
            "count": self.count,
        }


def reorganization_accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    """Exact-match fraction over class indices. Empty input is an error,
    not zero."""
    preds = list(predictions)
    trues = list(truths)
    if len(preds) != len(trues):
        raise DataError(f"{len(preds)} predictions vs {len(trues)} truths")
    if not preds:
        raise DataError("reorganization accuracy of an empty set is undefined")
    return sum(int(a == b) for a, b in zip(preds, trues)) / len(preds)


def _adjacency(sigma: Permutation, n: int) -> set:
    triples = set()
    for r in range(n):
        for c in range(n):
            i = r * n + c
            if c + 1 < n:
                triples.add((sigma.mapping[i], sigma.mapping[i + 1], "h"))
            if r + 1 < n:
                triples.add((sigma.mapping[i], sigma.mapping[i + n], "v"))
    return triples


def neighbor_accuracy(predicted: Permutation, true: Permutation, n: int) -> float:
    """Fraction of the 2n(n-1) adjacent cell pairs holding the same
    (source piece, source piece, relation) triple under both permutations."""
    if predicted.n != n or true.n != n:
        raise DataError(f"permutations are not {n}x{n}")
    common = _adjacency(predicted, n) & _adjacency(true, n)
    return len(common) / (2 * n * (n - 1))


def predict_classes(models: Mapping[str, torch.nn.Module], pieces: torch.Tensor,
                    n: int) -> torch.Tensor:
    """Argmax classes for [B*n^2, 3, p, p] piece tensors, eval mode, no grad."""
    enc, cls = models["encoder"], models["classifier"]
    enc.eval()
    cls.eval()
    with torch.no_grad():
        return cls(encode(enc, pieces, n)).argmax(dim=1)


def _collect_images(input_path) -> list[Path]:
    p = Path(input_path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir()
                       if q.is_file() and q.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"no images under {p}")
        return files
    if p.is_file():
        return [p]
    raise DataError(f"input path {p} does not exist")


def _check_set_match(manifest: dict, pset: PermutationSet) -> None:
    n, p = int(manifest["n"]), int(manifest["p"])
    if n != pset.n or p != len(pset):
        raise DataError(f"checkpoint (n={n}, P={p}) does not match "
                        f"permutation set (n={pset.n}, P={len(pset)})")


def solve(input_path, checkpoint_path, pset: PermutationSet, out_dir,
          true_classes: Mapping[str, int] | None = None) -> list[dict]:
    """Classify shuffled image(s) and write the unshuffled reconstructions.

    Writes ``<stem>_restored.png`` per input and ``predictions.csv``; the
    restored image is apply_permutation(pieces, invert(predicted sigma)).
    true_class / neighbor_accuracy columns stay blank unless the caller
    supplies the applied classes.
    """
    models, manifest = load_models(checkpoint_path, components=INFERENCE_COMPONENTS)
    _check_set_match(manifest, pset)
    grid = GridSpec(int(manifest["n"]), int(manifest["piece_px"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in _collect_images(input_path):
        image_id = path.stem
        image = preprocess(load_image(path), grid)
        batch = split_image(to_model_range(image), grid)
        pred = int(predict_classes(models, torch.from_numpy(batch.pieces), grid.n)[0])
        restored = apply_permutation(batch, invert(pset.entries[pred]))
        Image.fromarray(from_model_range(reassemble(restored, grid))).save(
            out / f"{image_id}_restored.png")
        row = {"image_id": image_id, "predicted_class": pred,
               "true_class": "", "neighbor_accuracy": ""}
        if true_classes is not None and image_id in true_classes:
            t = int(true_classes[image_id])
            row["true_class"] = t
            row["neighbor_accuracy"] = repr(
                neighbor_accuracy(pset.entries[pred], pset.entries[t], grid.n))
        rows.append(row)
    write_predictions_csv(out / "predictions.csv", rows)
    return rows


def write_predictions_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PREDICTION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def report_from_csv(path) -> dict:
    """Recompute headline numbers from a predictions CSV alone."""
    preds: list[int] = []
    truths: list[int] = []
    neigh: list[float] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            preds.append(int(row["predicted_class"]))
            if row.get("true_class"):
                truths.append(int(row["true_class"]))
            if row.get("neighbor_accuracy"):
                neigh.append(float(row["neighbor_accuracy"]))
    out: dict = {"count": len(preds)}
    if truths and len(truths) == len(preds):
        out["overall"] = reorganization_accuracy(preds, truths)
    if neigh:
        out["neighbor"] = float(np.mean(neigh))
    return out


def evaluate_manifest(manifest: DatasetManifest, models: Mapping[str, torch.nn.Module],
                      pset: PermutationSet, grid: GridSpec, seed: int = 0,
                      pix: int = 1, split: str = "test") -> tuple[EvalReport, list[dict]]:
    """Fixed-shuffle evaluation of one split.

    Each image gets the deterministic epoch-independent shuffle for
    ``seed``, so repeated evaluations see identical puzzles. Returns the
    report and the prediction CSV rows.
    """
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split}-split images")
    preds, truths, cats, neighbors, refs, times = [], [], [], [], [], []
    rows = []
    for e in entries:
        image = preprocess(load_image(e.path), grid)
        sample = make_shuffled_sample(image, grid, pset,
                                      shuffle_seed(seed, e.image_id), e.image_id)
        pieces = torch.from_numpy(sample.pieces.pieces)
        start = time.perf_counter()
        pred = int(predict_classes(models, pieces, grid.n)[0])
        apply_permutation(sample.pieces, invert(pset.entries[pred]))
        times.append(time.perf_counter() - start)
        na = neighbor_accuracy(pset.entries[pred], pset.entries[sample.true_class],
                               grid.n)
        refs.append(reference_label(sample.pieces, pset, pix).class_index)
        preds.append(pred)
        truths.append(sample.true_class)
        cats.append(e.category)
        neighbors.append(na)
        rows.append({"image_id": e.image_id, "predicted_class": pred,
                     "true_class": sample.true_class, "neighbor_accuracy": repr(na)})
    per_category = {
        cat: reorganization_accuracy([p for p, c in zip(preds, cats) if c == cat],
                                     [t for t, c in zip(truths, cats) if c == cat])
        for cat in sorted(set(cats))
    }
    report = EvalReport(
        overall=reorganization_accuracy(preds, truths),
        per_category=per_category,
        neighbor=float(np.mean(neighbors)),
        ref_agreement=reorganization_accuracy(refs, truths),
        mean_seconds=float(np.mean(times)),
        median_seconds=float(np.median(times)),
        count=len(entries),
    )
    return report, rows


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: Mapping[str, object] = field(default_factory=dict)


ABLATION_FIELDS = ("name", "n", "p", "overall", "neighbor", "ref_agreement",
                   "count", "error")


def run_ablation(base_values: Mapping[str, object], manifest: DatasetManifest,
                 variants: Sequence[AblationVariant], out_dir) -> list[dict]:
    """Train and evaluate one run per variant; failures become rows, not
    aborts.

    Keys use the dotted config names plus set.n / set.p / set.seed for the
    permutation set. Writes ``ablation.csv``; an empty variant list yields
    a header-only table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for var in variants:
        merged = dict(base_values)
        merged.update(var.overrides)
        set_n = int(merged.pop("set.n", 2))
        set_p = int(merged.pop("set.p", 10))
        set_seed = int(merged.pop("set.seed", 0))
        row = dict.fromkeys(ABLATION_FIELDS, "")
        row.update(name=var.name, n=set_n, p=set_p)
        try:
            cfg = make_config(merged)
            pset = generate_permutation_set(set_n, set_p, set_seed)
            _, report = fit(cfg, manifest, pset, out / var.name)
            test = report.get("test")
            if test is None:
                raise DataError("manifest has no test split to evaluate")
            row.update(overall=repr(test["overall"]), neighbor=repr(test["neighbor"]),
                       ref_agreement=repr(test["ref_agreement"]), count=test["count"])
        except Exception as exc:  # record and continue with the other variants
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def time_solver(manifest: DatasetManifest, checkpoint_path, pset: PermutationSet,
                seed: int = 0, split: str = "test") -> dict:
    """Wall-clock per-image inference timing, warm-started."""
    models, ckpt_manifest = load_models(checkpoint_path, components=INFERENCE_COMPONENTS)
    _check_set_match(ckpt_manifest, pset)
    grid = GridSpec(int(ckpt_manifest["n"]), int(ckpt_manifest["piece_px"]))
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split}-split images")
    samples = [
        make_shuffled_sample(preprocess(load_image(e.path), grid), grid, pset,
                             shuffle_seed(seed, e.image_id), e.image_id)
        for e in entries
    ]
    predict_classes(models, torch.from_numpy(samples[0].pieces.pieces), grid.n)
    times = []
    for s in samples:
        start = time.perf_counter()
        pred = int(predict_classes(models, torch.from_numpy(s.pieces.pieces),
                                   grid.n)[0])
        apply_permutation(s.pieces, invert(pset.entries[pred]))
        times.append(time.perf_counter() - start)
    return {"mean_seconds": float(np.mean(times)),
            "median_seconds": float(np.median(times)),
            "count": len(times)}
