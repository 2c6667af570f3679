"""Flat dotted-key configuration: defaults, file overrides, flag overrides.

Config files are JSON objects whose keys are dotted paths
(e.g. {"train.epochs": 60, "weights.lambda2": 0.2}); any key can also be
set on the command line as --train.epochs 60. Values are coerced to the
type of the default for that key.
"""

from __future__ import annotations

import json
from pathlib import Path

from .evaluator import Protocol
from .losses import LossWeights
from .synthdata import GeneratorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "gen.n_identities_train": 32,
    "gen.n_identities_test": 16,
    "gen.samples_per_identity_per_modality": 8,
    "gen.d_id": 16,
    "gen.d_view": 4,
    "gen.d_conflict": 4,
    "gen.sigma_view": 0.5,
    "gen.sigma_noise": 0.1,
    "gen.sigma_text": None,
    "gen.mask_keep_prob": 0.7,
    "gen.seed": 0,
    "model.d_hidden": 64,
    "model.d_embed": 32,
    "model.init_scale": 0.1,
    "train.epochs": 60,
    "train.batches_per_epoch": 20,
    "train.n_ids_per_batch": 8,
    "train.k_per_modality": 4,
    "train.lr_visual": 3e-4,
    "train.lr_text": 3e-4,
    "train.decay_factor": 0.1,
    "train.decay_epochs": [20, 35],
    "train.momentum": 0.9,
    "train.eval_every": 1,
    "train.seed": 0,
    "weights.lambda1": 0.25,
    "weights.lambda2": 0.2,
    "weights.lambda3": 0.08,
    "weights.lambda4": 0.01,
    "weights.tau": 0.07,
    "weights.n_fuse": 1,
    "weights.label_aware_contrast": False,
    "weights.cross_modal_fusion": False,
    "weights.distill_text": True,
    "eval.query_modality": "R",
    "eval.gallery_modality": "V",
    "eval.shots": "multi",
    "eval.seed": 0,
    "eval.k_max": 20,
}


def _coerce(key: str, raw, template) -> object:
    """Coerce a raw (possibly string) value to the type of the default."""
    if raw is None:
        return None
    if isinstance(raw, str) and raw.lower() in ("none", "null"):
        return None
    try:
        if isinstance(template, bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(template, int) and not isinstance(template, bool):
            v = float(raw)
            if v != int(v):
                raise ValueError(f"not an integer: {raw!r}")
            return int(v)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, list):
            if isinstance(raw, (list, tuple)):
                return [int(x) for x in raw]
            return [int(x) for x in str(raw).split(",") if x.strip()]
        return str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


_NULLABLE_FLOATS = {"gen.sigma_text"}


def _template_for(key: str):
    if key in _NULLABLE_FLOATS:
        return 0.0
    return DEFAULTS[key]


def load_config_file(path: Path | str) -> dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return data


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> dict[str, object]:
    """DEFAULTS <- config file <- command-line overrides, with validation."""
    cfg = dict(DEFAULTS)
    for source, name in ((file_cfg, "config file"), (overrides, "flag")):
        if not source:
            continue
        unknown = sorted(k for k in source if k not in DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown {name} key(s): {', '.join(unknown)}")
        for k, v in source.items():
            cfg[k] = _coerce(k, v, _template_for(k))
    return cfg


def parse_override_args(rest: list[str]) -> dict[str, object]:
    """Turn leftover CLI args of the form --dotted.key value into a dict."""
    overrides: dict[str, object] = {}
    i = 0
    while i < len(rest):
        arg = rest[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"flag --{key} is missing a value")
            value = rest[i + 1]
            i += 1
        if key not in DEFAULTS:
            raise ConfigError(f"unknown flag --{key}")
        overrides[key] = value
        i += 1
    return overrides


def section(cfg: dict[str, object], prefix: str) -> dict[str, object]:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def generator_config(cfg: dict[str, object]) -> GeneratorConfig:
    g = GeneratorConfig(**section(cfg, "gen"))
    g.validate()
    return g


def loss_weights(cfg: dict[str, object]) -> LossWeights:
    w = LossWeights(**section(cfg, "weights"))
    w.validate()
    return w


def train_config(cfg: dict[str, object]) -> TrainConfig:
    t = section(cfg, "train")
    t["decay_epochs"] = tuple(t["decay_epochs"])
    m = section(cfg, "model")
    tc = TrainConfig(weights=loss_weights(cfg), d_hidden=m["d_hidden"],
                     d_embed=m["d_embed"], init_scale=m["init_scale"], **t)
    tc.validate()
    return tc


def protocol(cfg: dict[str, object]) -> Protocol:
    e = section(cfg, "eval")
    p = Protocol(query_modality=e["query_modality"],
                 gallery_modality=e["gallery_modality"],
                 shots=e["shots"], seed=e["seed"])
    p.validate()
    return p
