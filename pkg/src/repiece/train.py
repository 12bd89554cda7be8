"""Joint optimization of the classifier, generator and discriminator.

One step = one forward pass, a discriminator update on (real, detached
fake), then a joint classifier+generator update; each network's optimizer
steps at most once per call. Reference labels come from the boundary
pipeline or an external CSV; the applied shuffle's true class never enters
this module.

Config files are plain text with dotted keys (``train.lr = 2e-4``); every
key maps onto a TrainConfig field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .checkpoint import (read_checkpoint, restore_optimizers, save_checkpoint,
                         load_into_models)
from .compat import read_reference_csv, reference_label
from .data import (DatasetManifest, load_image, make_shuffled_sample, preprocess,
                   shuffle_seed, to_model_range)
from .errors import ConfigError, DataError, NumericalError
from .grid import GridSpec, PermutationSet, invert
from .losses import (BoundaryLossConfig, LossWeights, adversarial_losses,
                     boundary_loss, jigsaw_loss, total_loss)
from .networks import build_models, encode
from .warp import flow_from_permutation, warp

__all__ = [
    "TrainConfig",
    "TrainState",
    "parse_config_file",
    "make_config",
    "load_train_config",
    "init_state",
    "train_step",
    "fit",
]

LOG_HEADER = "step,epoch,L_jigsaw,L_GAN_D,L_GAN_G,L_boundary,ref_agreement"
CHECKPOINT_FORMAT = "repiece-checkpoint-1"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 1
    deterministic: bool = True
    warp_source: str = "argmax"  # "argmax" | "reference"
    ref_label_source: str = "internal"  # "internal" | path to a label CSV
    piece_px: int = 24
    reshuffle_each_epoch: bool = True
    gamma: float = 2.0
    pix: int = 1
    weights: LossWeights = LossWeights()
    boundary: BoundaryLossConfig = BoundaryLossConfig()
    saturating: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"train.lr must be finite and > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"train.{name} must be in [0, 1), got {v}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be >= 0, got {self.seed}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.warp_source not in ("argmax", "reference"):
            raise ConfigError(f"train.warp_source must be 'argmax' or 'reference', "
                              f"got {self.warp_source!r}")
        if self.gamma < 0:
            raise ConfigError(f"jigsaw.gamma must be >= 0, got {self.gamma}")
        if self.pix < 1:
            raise ConfigError(f"jigsaw.pix must be >= 1, got {self.pix}")
        if self.piece_px < 8:
            raise ConfigError(f"data.piece_px must be >= 8, got {self.piece_px}")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    raise ConfigError(f"expected true/false, got {raw!r}")


# dotted config key -> (TrainConfig attribute path, parser)
_KEYS = {
    "train.lr": ("lr", float),
    "train.beta1": ("beta1", float),
    "train.beta2": ("beta2", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.seed": ("seed", int),
    "train.checkpoint_every": ("checkpoint_every", int),
    "train.deterministic": ("deterministic", _parse_bool),
    "train.warp_source": ("warp_source", str),
    "train.ref_label_source": ("ref_label_source", str),
    "data.piece_px": ("piece_px", int),
    "data.reshuffle_each_epoch": ("reshuffle_each_epoch", _parse_bool),
    "jigsaw.gamma": ("gamma", float),
    "jigsaw.pix": ("pix", int),
    "loss.w_jigsaw": ("weights.w_jigsaw", float),
    "loss.w_gan": ("weights.w_gan", float),
    "loss.w_boundary": ("weights.w_boundary", float),
    "boundary.w_b": ("boundary.w_b", int),
    "boundary.window": ("boundary.window", int),
    "gan.saturating": ("saturating", _parse_bool),
}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    values: dict[str, str] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


def make_config(values: Mapping[str, object]) -> TrainConfig:
    """Build a TrainConfig from dotted-key values (strings or typed)."""
    flat: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {"weights": {}, "boundary": {}}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = _KEYS[key]
        try:
            value = parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        if "." in attr:
            group, leaf = attr.split(".")
            nested[group][leaf] = value
        else:
            flat[attr] = value
    if nested["weights"]:
        flat["weights"] = LossWeights(**nested["weights"])
    if nested["boundary"]:
        flat["boundary"] = BoundaryLossConfig(**nested["boundary"])
    return TrainConfig(**flat)


def load_train_config(path=None, overrides: Mapping[str, object] | None = None) -> TrainConfig:
    values: dict[str, object] = {}
    if path is not None:
        values.update(parse_config_file(path))
    if overrides:
        values.update(overrides)
    return make_config(values)


@dataclass
class TrainState:
    """Everything a step mutates: the networks (weights and BN statistics),
    their Adam moments, and the step/epoch counters.
    """

    models: dict[str, torch.nn.Module]
    optimizers: dict[str, torch.optim.Optimizer]
    config: TrainConfig
    pset: PermutationSet
    grid: GridSpec
    epoch: int = 0
    step: int = 0


def _apply_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _make_optimizers(models: dict[str, torch.nn.Module], cfg: TrainConfig):
    def adam(params):
        return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    return {
        "classifier": adam(list(models["encoder"].parameters())
                           + list(models["classifier"].parameters())),
        "generator": adam(models["generator"].parameters()),
        "discriminator": adam(models["discriminator"].parameters()),
    }


def init_state(cfg: TrainConfig, pset: PermutationSet) -> TrainState:
    _apply_determinism(cfg)
    models = build_models(len(pset), cfg.seed)
    return TrainState(models=models, optimizers=_make_optimizers(models, cfg),
                      config=cfg, pset=pset, grid=GridSpec(pset.n, cfg.piece_px))


def train_step(pieces: torch.Tensor, real: torch.Tensor | None, ref_labels,
               state: TrainState) -> dict:
    """One optimization step; takes piece tensors and reference labels only.

    ``pieces``: [B*n^2, 3, p, p] in [-1, 1]; ``real``: [B, 3, H, W] from the
    target domain (may be None when w_gan is 0). Returns the loss record
    for the step's log row.
    """
    cfg = state.config
    n = state.pset.n
    cells = n * n
    if pieces.dim() != 4 or pieces.shape[0] % cells != 0:
        raise DataError(f"pieces must be [B*{cells}, 3, p, p], got {tuple(pieces.shape)}")
    b = pieces.shape[0] // cells
    labels = torch.as_tensor(list(ref_labels), dtype=torch.int64)
    if labels.shape != (b,):
        raise DataError(f"expected {b} reference labels, got {tuple(labels.shape)}")
    use_gan = cfg.weights.w_gan > 0
    use_boundary = cfg.weights.w_boundary > 0
    if use_gan:
        if real is None:
            raise DataError("w_gan > 0 requires a real batch")
        if real.shape[0] != b:
            raise DataError(f"mismatched batch sizes: {b} jigsaw vs {real.shape[0]} real")

    models, opts = state.models, state.optimizers
    enc, cls = models["encoder"], models["classifier"]
    enc.train()
    cls.train()
    f_shuffle = encode(enc, pieces, n)
    logits = cls(f_shuffle)
    l_jigsaw = jigsaw_loss(logits, labels, cfg.gamma)

    zero = torch.zeros(())
    d_loss = g_loss = l_boundary = zero
    if use_gan or use_boundary:
        gen = models["generator"]
        gen.train()
        if cfg.warp_source == "argmax":
            classes = logits.detach().argmax(dim=1)
        else:
            classes = labels
        h_f = f_shuffle.shape[-2]
        flows = [flow_from_permutation(invert(state.pset.entries[int(c)]), h_f, h_f)
                 for c in classes]
        warped = torch.cat([warp(f_shuffle[k:k + 1], fl) for k, fl in enumerate(flows)])
        fake = gen(warped)
        if use_boundary:
            l_boundary = boundary_loss(fake, state.grid, cfg.boundary)
        if use_gan:
            disc = models["discriminator"]
            disc.train()
            opts["discriminator"].zero_grad()
            d_real_logits = disc(real)
            d_loss, _ = adversarial_losses(d_real_logits, disc(fake.detach()),
                                           cfg.saturating)
            if not torch.isfinite(d_loss):
                raise NumericalError(f"loss component 'gan_d' is not finite "
                                     f"at step {state.step}")
            d_loss.backward()
            opts["discriminator"].step()
            # Generator term against the just-updated discriminator.
            _, g_loss = adversarial_losses(d_real_logits.detach(), disc(fake),
                                           cfg.saturating)

    total = total_loss({"jigsaw": l_jigsaw, "gan": g_loss, "boundary": l_boundary},
                       cfg.weights)
    opts["classifier"].zero_grad()
    opts["generator"].zero_grad()
    total.backward()
    opts["classifier"].step()
    if use_gan or use_boundary:
        opts["generator"].step()

    state.step += 1
    agreement = float((logits.detach().argmax(dim=1) == labels).float().mean())
    return {
        "step": state.step,
        "epoch": state.epoch,
        "L_jigsaw": float(l_jigsaw.detach()),
        "L_GAN_D": float(d_loss.detach()),
        "L_GAN_G": float(g_loss.detach()),
        "L_boundary": float(l_boundary.detach()),
        "ref_agreement": agreement,
    }


def _reference_labels(samples, pset, cfg, external, cache):
    labels = []
    for s in samples:
        if external is not None:
            if s.image_id not in external:
                raise DataError(f"external reference labels missing {s.image_id!r}")
            label = external[s.image_id]
            if not 0 <= label < len(pset):
                raise DataError(f"external label {label} out of range for P={len(pset)}")
        elif cache is not None and s.image_id in cache:
            label = cache[s.image_id]
        else:
            label = reference_label(s.pieces, pset, cfg.pix).class_index
            if cache is not None:
                cache[s.image_id] = label
        labels.append(label)
    return labels


def fit(cfg: TrainConfig, manifest: DatasetManifest, pset: PermutationSet,
        out_dir, resume=None) -> tuple[TrainState, dict]:
    """Run the full loop: epochs, per-step CSV log, periodic checkpoints,
    and a final evaluation on the test split (when one exists).

    ``resume`` restarts from an epoch-boundary checkpoint and reproduces
    the uninterrupted run exactly in deterministic mode.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_state(cfg, pset)

    start_epoch = 0
    if resume is not None:
        man, arrays = read_checkpoint(resume)
        if int(man.get("n", -1)) != pset.n or int(man.get("p", -1)) != len(pset):
            raise DataError(f"checkpoint (n={man.get('n')}, P={man.get('p')}) does not "
                            f"match permutation set (n={pset.n}, P={len(pset)})")
        load_into_models(state.models, arrays)
        restore_optimizers(state.models, state.optimizers, arrays)
        start_epoch = int(man["epoch"])
        state.step = int(man.get("step", 0))
    if start_epoch >= cfg.epochs:
        raise ConfigError(f"resume epoch {start_epoch} >= train.epochs {cfg.epochs}")

    jig = manifest.split("jigsaw")
    real_entries = manifest.split("real")
    test_entries = manifest.split("test")
    if not jig:
        raise DataError("manifest has no jigsaw-split images")
    use_gan = cfg.weights.w_gan > 0
    if use_gan and not real_entries:
        raise DataError("w_gan > 0 but the manifest has no real-split images")

    external = None
    if cfg.ref_label_source != "internal":
        external = read_reference_csv(cfg.ref_label_source)
    fixed_shuffles = (not cfg.reshuffle_each_epoch) or external is not None
    ref_cache: dict[str, int] | None = {} if fixed_shuffles else None

    images = {e.image_id: preprocess(load_image(e.path), state.grid) for e in jig}
    real_images = [torch.from_numpy(
        to_model_range(preprocess(load_image(e.path), state.grid)).transpose(2, 0, 1).copy())
        for e in real_entries]

    log_path = out / "loss_log.csv"
    with open(log_path, "a" if resume is not None else "w") as logfh:
        if resume is None:
            logfh.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, cfg.epochs):
            state.epoch = epoch
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
            samples = [
                make_shuffled_sample(
                    images[e.image_id], state.grid, pset,
                    shuffle_seed(cfg.seed, e.image_id,
                                 None if fixed_shuffles else epoch),
                    e.image_id)
                for e in jig
            ]
            labels = _reference_labels(samples, pset, cfg, external, ref_cache)
            order = rng.permutation(len(samples))
            real_order = rng.permutation(len(real_images)) if real_images else None
            rpos = 0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                pieces = torch.from_numpy(
                    np.concatenate([samples[j].pieces.pieces for j in idx]))
                if use_gan:
                    sel = [real_images[real_order[(rpos + k) % len(real_order)]]
                           for k in range(len(idx))]
                    rpos += len(idx)
                    real_batch = torch.stack(sel)
                else:
                    real_batch = None
                rec = train_step(pieces, real_batch, [labels[j] for j in idx], state)
                logfh.write("{step},{epoch},{L_jigsaw!r},{L_GAN_D!r},{L_GAN_G!r},"
                            "{L_boundary!r},{ref_agreement!r}\n".format(**rec))
            done = epoch + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                _save(out / f"checkpoint_epoch{done:04d}.zip", state, done)
        _save(out / "checkpoint_final.zip", state, cfg.epochs)

    report: dict = {"test_images": len(test_entries)}
    if test_entries:
        from .evaluate import evaluate_manifest  # local import: evaluate drives fit for ablations
        eval_report, _ = evaluate_manifest(manifest, state.models, pset, state.grid,
                                           seed=cfg.seed, pix=cfg.pix)
        report["test"] = eval_report.as_dict()
        with open(out / "eval_report.json", "w") as fh:
            json.dump(report["test"], fh, indent=2, sort_keys=True)
            fh.write("\n")
    return state, report


def _save(path, state: TrainState, epoch: int) -> None:
    save_checkpoint(path, state.models, {
        "format": CHECKPOINT_FORMAT,
        "n": state.pset.n,
        "p": len(state.pset),
        "piece_px": state.config.piece_px,
        "seed": state.config.seed,
        "epoch": epoch,
        "step": state.step,
    }, state.optimizers)
