"""Command-line surface: one subcommand per pipeline stage.

Exit codes: 0 success, 2 bad config/usage, 3 bad data, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import torch

from .compat import read_reference_csv, reference_label, write_reference_csv
from .data import (build_manifest, load_image, load_manifest, make_shuffled_sample,
                   preprocess, shuffle_seed, write_manifest)
from .errors import ConfigError, DataError, NumericalError
from .evaluate import (AblationVariant, evaluate_manifest, run_ablation, solve,
                       time_solver, write_predictions_csv)
from .grid import (GridSpec, generate_permutation_set, load_permutation_set,
                   save_permutation_set)
from .train import fit, load_train_config

DEFAULT_VARIANTS = (
    AblationVariant("full", {}),
    AblationVariant("no_gan", {"loss.w_gan": 0.0}),
    AblationVariant("no_boundary", {"loss.w_boundary": 0.0}),
    AblationVariant("jigsaw_only", {"loss.w_gan": 0.0, "loss.w_boundary": 0.0}),
)


def _maybe_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _config_overrides(args) -> dict:
    over: dict[str, object] = {}
    if args.seed is not None:
        over["train.seed"] = args.seed
    if args.deterministic:
        over["train.deterministic"] = True
    return over


def _cmd_prepare(args) -> int:
    manifest = build_manifest(args.corpus, args.seed if args.seed is not None else 0)
    write_manifest(manifest, args.out)
    counts = {s: len(manifest.split(s)) for s in ("jigsaw", "real", "test")}
    print(f"wrote {args.out}: {len(manifest.entries)} images "
          f"(jigsaw={counts['jigsaw']}, real={counts['real']}, test={counts['test']})")
    return 0


def _cmd_permset(args) -> int:
    pset = generate_permutation_set(args.n, args.p,
                                    args.seed if args.seed is not None else 0)
    save_permutation_set(pset, args.out)
    print(f"wrote {args.out}: n={pset.n} P={len(pset)} seed={pset.seed}")
    return 0


def _cmd_refsolve(args) -> int:
    _maybe_deterministic(args.deterministic)
    cfg = load_train_config(args.config, _config_overrides(args))
    manifest = load_manifest(args.manifest)
    pset = load_permutation_set(args.permset)
    grid = GridSpec(pset.n, cfg.piece_px)
    entries = manifest.split(args.split)
    if not entries:
        raise DataError(f"manifest has no {args.split}-split images")
    rows = []
    for e in entries:
        image = preprocess(load_image(e.path), grid)
        sample = make_shuffled_sample(image, grid, pset,
                                      shuffle_seed(cfg.seed, e.image_id), e.image_id)
        rows.append((e.image_id, reference_label(sample.pieces, pset, cfg.pix)))
    write_reference_csv(args.out, rows)
    print(f"wrote {args.out}: {len(rows)} reference labels")
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config, _config_overrides(args))
    manifest = load_manifest(args.manifest)
    pset = load_permutation_set(args.permset)
    state, report = fit(cfg, manifest, pset, args.out, resume=args.resume)
    line = f"trained {cfg.epochs} epochs ({state.step} steps)"
    if "test" in report:
        line += f", test accuracy {report['test']['overall']:.3f}"
    print(line)
    return 0


def _cmd_solve(args) -> int:
    _maybe_deterministic(args.deterministic)
    pset = load_permutation_set(args.permset)
    labels = read_reference_csv(args.labels) if args.labels else None
    rows = solve(args.input, args.checkpoint, pset, args.out, true_classes=labels)
    print(f"wrote {len(rows)} restored image(s) and predictions.csv to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    _maybe_deterministic(args.deterministic)
    from .checkpoint import load_models

    models, ckpt = load_models(args.checkpoint, components=("encoder", "classifier"))
    pset = load_permutation_set(args.permset)
    if int(ckpt["n"]) != pset.n or int(ckpt["p"]) != len(pset):
        raise DataError(f"checkpoint (n={ckpt['n']}, P={ckpt['p']}) does not match "
                        f"permutation set (n={pset.n}, P={len(pset)})")
    grid = GridSpec(pset.n, int(ckpt["piece_px"]))
    manifest = load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else int(ckpt.get("seed", 0))
    report, rows = evaluate_manifest(manifest, models, pset, grid, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out / "predictions.csv", rows)
    with open(out / "eval_report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"accuracy {report.overall:.3f} on {report.count} images "
          f"(neighbor {report.neighbor:.3f}, ref agreement {report.ref_agreement:.3f})")
    return 0


def _load_variants(path) -> list[AblationVariant]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a JSON list of variants")
    variants = []
    for item in raw:
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigError(f"{path}: each variant needs at least a 'name'")
        variants.append(AblationVariant(str(item["name"]),
                                        dict(item.get("overrides", {}))))
    return variants


def _cmd_ablate(args) -> int:
    from .train import parse_config_file

    base: dict[str, object] = {}
    if args.config:
        base.update(parse_config_file(args.config))
    if args.seed is not None:
        base["train.seed"] = args.seed
        base["set.seed"] = args.seed
    if args.deterministic:
        base["train.deterministic"] = True
    variants = _load_variants(args.variants) if args.variants else list(DEFAULT_VARIANTS)
    manifest = load_manifest(args.manifest)
    rows = run_ablation(base, manifest, variants, args.out)
    failed = [r["name"] for r in rows if r["error"]]
    print(f"ran {len(rows)} variant(s), {len(failed)} failed"
          + (f" ({', '.join(failed)})" if failed else ""))
    return 0


def _cmd_bench(args) -> int:
    _maybe_deterministic(args.deterministic)
    manifest = load_manifest(args.manifest)
    pset = load_permutation_set(args.permset)
    timing = time_solver(manifest, args.checkpoint, pset,
                         seed=args.seed if args.seed is not None else 0)
    stamp = {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
    }
    result = {**timing, "hardware": stamp}
    print(f"{timing['count']} images: mean {timing['mean_seconds']:.4f}s, "
          f"median {timing['median_seconds']:.4f}s per image on {stamp['processor']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repiece",
                                     description="Square jigsaw solving toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=False, manifest=False, permset=False, checkpoint=False,
               out_required=False, out=True):
        if config:
            p.add_argument("--config", help="config file with dotted keys")
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest JSONL")
        if permset:
            p.add_argument("--permset", required=True, help="permutation set file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint zip")
        if out:
            p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("prepare", help="build a dataset manifest from an image tree")
    p.add_argument("corpus", help="directory of category subdirectories")
    common(p, out_required=True)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("permset", help="generate a maximal-Hamming permutation set")
    p.add_argument("n", type=int)
    p.add_argument("p", type=int)
    common(p, out_required=True)
    p.set_defaults(func=_cmd_permset)

    p = sub.add_parser("refsolve", help="write boundary-pipeline reference labels")
    common(p, config=True, manifest=True, permset=True, out_required=True)
    p.add_argument("--split", default="jigsaw", choices=("jigsaw", "real", "test"))
    p.set_defaults(func=_cmd_refsolve)

    p = sub.add_parser("train", help="train classifier, generator and discriminator")
    common(p, config=True, manifest=True, permset=True, out_required=True)
    p.add_argument("--resume", help="epoch-boundary checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("solve", help="restore shuffled images with a checkpoint")
    p.add_argument("input", help="image file or directory")
    common(p, permset=True, checkpoint=True, out_required=True)
    p.add_argument("--labels", help="CSV of applied classes for scoring")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    common(p, manifest=True, permset=True, checkpoint=True, out_required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score config variants")
    p.add_argument("variants", nargs="?",
                   help="JSON list of {name, overrides}; default: loss-term table")
    common(p, config=True, manifest=True, out_required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("bench", help="time the solver per image")
    common(p, manifest=True, permset=True, checkpoint=True)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
