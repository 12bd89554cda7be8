"""Checkpoint archives: a zip of .npy arrays plus a JSON manifest.

Weight keys follow ``<component>.<layer_index>.<param>`` (the per-component
``layers`` index), optimizer moments get an ``opt.`` prefix, and every zip
member carries a fixed timestamp, so identical training states serialize to
identical bytes. That property is load-bearing: determinism tests compare
checkpoint files directly.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

from .errors import DataError
from .networks import Classifier, Discriminator, Encoder, GeneratorTail

__all__ = [
    "component_arrays",
    "load_into_models",
    "save_checkpoint",
    "read_checkpoint",
    "load_models",
    "restore_optimizers",
]

_STAMP = (1980, 1, 1, 0, 0, 0)
COMPONENTS = ("encoder", "classifier", "generator", "discriminator")


def component_arrays(models: dict[str, torch.nn.Module]) -> dict[str, np.ndarray]:
    """Flatten model state into ``<component>.<layer_index>.<param>`` arrays."""
    out: dict[str, np.ndarray] = {}
    for comp, net in models.items():
        for idx, mod in enumerate(net.layers):
            for name, value in mod.state_dict().items():
                out[f"{comp}.{idx}.{name}"] = value.detach().cpu().numpy()
    return out


def load_into_models(models: dict[str, torch.nn.Module],
                     arrays: dict[str, np.ndarray]) -> None:
    for comp, net in models.items():
        for idx, mod in enumerate(net.layers):
            state = {}
            for name in mod.state_dict():
                key = f"{comp}.{idx}.{name}"
                if key not in arrays:
                    raise DataError(f"checkpoint missing array {key}")
                state[name] = torch.from_numpy(arrays[key].copy())
            mod.load_state_dict(state)


def _param_keys(models: dict[str, torch.nn.Module]) -> dict[int, str]:
    """id(parameter) -> checkpoint key, for naming optimizer state."""
    keys: dict[int, str] = {}
    for comp, net in models.items():
        for idx, mod in enumerate(net.layers):
            for name, param in mod.named_parameters():
                keys[id(param)] = f"{comp}.{idx}.{name}"
    return keys


def optimizer_arrays(models: dict[str, torch.nn.Module],
                     optimizers: dict[str, torch.optim.Optimizer]) -> dict[str, np.ndarray]:
    keys = _param_keys(models)
    out: dict[str, np.ndarray] = {}
    for _, opt in sorted(optimizers.items()):
        for group in opt.param_groups:
            for param in group["params"]:
                state = opt.state.get(param)
                if not state:
                    continue
                base = f"opt.{keys[id(param)]}"
                out[f"{base}.step"] = np.array([float(state["step"])], dtype=np.float64)
                out[f"{base}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
                out[f"{base}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return out


def restore_optimizers(models: dict[str, torch.nn.Module],
                       optimizers: dict[str, torch.optim.Optimizer],
                       arrays: dict[str, np.ndarray]) -> None:
    """Put saved Adam moments back; params without saved state stay fresh."""
    keys = _param_keys(models)
    for opt in optimizers.values():
        for group in opt.param_groups:
            for param in group["params"]:
                base = f"opt.{keys[id(param)]}"
                if f"{base}.step" not in arrays:
                    continue
                opt.state[param] = {
                    "step": torch.tensor(float(arrays[f"{base}.step"][0])),
                    "exp_avg": torch.from_numpy(arrays[f"{base}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"{base}.exp_avg_sq"].copy()),
                }


def save_checkpoint(path, models: dict[str, torch.nn.Module], manifest: dict,
                    optimizers: dict[str, torch.optim.Optimizer] | None = None) -> None:
    """``manifest`` must carry n, p, piece_px, seed and epoch."""
    arrays = component_arrays(models)
    if optimizers:
        arrays.update(optimizer_arrays(models, optimizers))
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        _write(zf, "manifest.json",
               json.dumps(manifest, sort_keys=True, indent=1).encode() + b"\n")
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]),
                                      allow_pickle=False)
            _write(zf, key + ".npy", buf.getvalue())


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_STAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {
                name[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                    allow_pickle=False)
                for name in zf.namelist() if name.endswith(".npy")
            }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    return manifest, arrays


def _fresh(component: str, p_classes: int) -> torch.nn.Module:
    return {
        "encoder": Encoder,
        "classifier": lambda: Classifier(p_classes),
        "generator": GeneratorTail,
        "discriminator": Discriminator,
    }[component]()


def load_models(path, components: tuple[str, ...] = COMPONENTS):
    """Rebuild the requested components from a checkpoint.

    Returns (models, manifest). Inference callers pass only
    ("encoder", "classifier") so the generator and discriminator are never
    even constructed on that path.
    """
    manifest, arrays = read_checkpoint(path)
    try:
        p_classes = int(manifest["p"])
    except KeyError as exc:
        raise DataError(f"checkpoint {path} manifest lacks 'p'") from exc
    models = {c: _fresh(c, p_classes) for c in components}
    load_into_models(models, arrays)
    for net in models.values():
        net.eval()
    return models, manifest
