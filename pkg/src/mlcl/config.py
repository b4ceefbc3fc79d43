"""Run configuration: defaults, YAML files, ``--key=value`` overrides, validation."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from mlcl.evaluation import ProbeConfig
from mlcl.loss import Global, HeadConfig, Level
from mlcl.network import TrainConfig

MODES = (
    "gen-data",
    "train",
    "probe",
    "gradcheck",
    "sweep-temp",
    "noise-ablation",
    "limited-samples",
    "transfer",
    "export-embeddings",
)

# Hierarchical experiment data is harder than the generator defaults
# (dim 8, superclass scale 5, noise 2) so probe accuracies stay below 1.
DEFAULTS = {
    "output_dir": "runs",
    "jobs": 1,
    "data": {
        "kind": "hierarchical",
        "seed": 0,
        "path": None,
        "hierarchical": {
            "superclasses": 4,
            "subclasses_per_super": 5,
            "per_class": 50,
            "test_per_class": 20,
            "dim": 8,
            "super_scale": 5.0,
            "sub_scale": 3.0,
            "noise": 2.0,
        },
        "multilabel": {
            "levels": 7,
            "classes_per_level": 3,
            "n_train": 360,
            "n_test": 1000,
            "dim": 16,
            "noise": 1.0,
            "correlation": 0.5,
        },
    },
    "model": {"hidden_dim": 128, "embed_dim": 64, "head_hidden": 64, "proj_dim": 32},
    "train": {
        "epochs": 100,
        "batch_size": 32,
        "lr": 0.05,
        "momentum": 0.9,
        "seed": 0,
        "ce": None,
        "ce_levels": None,
        "ce_weight": None,
        "aug_noise": 0.3,
        "aug_dropout": 0.1,
        "two_views": True,
        "reduction": "mean",
    },
    # None selects the per-kind default heads below
    "heads": None,
    "global_head": {"threshold": 0.7, "temperature": 0.5},
    "probe": {"epochs": 200, "lr": 0.1, "momentum": 0.9, "batch_size": 64, "test_fraction": 0.2, "level": 0},
    "experiment": {
        "seeds": list(range(10)),
        "grid": [0.07, 0.1, 0.3, 0.5, 0.7, 1.0],
        "tau_sub": 0.1,
        "train_size": 100,
        "sizes": [100, 300, 1000],
        "rates": [0.3, 0.5, 0.7, 0.8],
        "global_weight": 0.6,
        "level_total": 0.2,
        "knn_k": 10,
        "transfer_level": 1,
        "target_per_class": None,
    },
    "paths": {"checkpoint": None, "dataset": None, "target": None},
    "gradcheck": {"loss_cases": 100, "seed": 0, "loss_tol": 1e-6, "model_tol": 1e-5},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"{path}: unknown configuration key")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = deep_merge(out[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(arg: str):
    """``--a.b=value`` -> ``({"a": {"b": value}}, "a.b")``; values parsed as YAML scalars."""
    if not arg.startswith("--") or "=" not in arg:
        raise ConfigError(f"override {arg!r} is not of the form --key=value")
    key, raw = arg[2:].split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from None
    if raw == "":
        value = None
    tree = value
    for part in reversed(key.split(".")):
        tree = {part: tree}
    return tree, key


def load_config(path=None, overrides=()) -> dict:
    """Defaults < file < overrides, then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = deep_merge(cfg, loaded)
    for arg in overrides:
        tree, _ = parse_override(arg)
        cfg = deep_merge(cfg, tree)
    resolve(cfg)
    return cfg


def _default_heads(cfg: dict) -> list:
    g = cfg["global_head"]
    if cfg["data"]["kind"] == "multilabel":
        L = int(cfg["data"]["multilabel"]["levels"])
        heads = [{"level": l, "temperature": 0.1, "weight": 0.03} for l in range(L)]
        heads.append({"global": True, "threshold": g["threshold"], "temperature": g["temperature"], "weight": 0.1})
        return heads
    return [
        {"level": 0, "temperature": 0.1, "weight": 0.5},
        {"level": 1, "temperature": 0.5, "weight": 0.5},
    ]


def resolve(cfg: dict) -> dict:
    """Fill kind-dependent defaults in place and validate everything."""
    kind = cfg["data"]["kind"]
    if kind not in ("hierarchical", "multilabel", "csv"):
        raise ConfigError(f"data.kind: expected hierarchical, multilabel or csv, got {kind!r}")
    if kind == "csv" and not cfg["data"]["path"]:
        raise ConfigError("data.path: required when data.kind is csv")
    t = cfg["train"]
    if t["ce"] is None:
        t["ce"] = kind == "multilabel"
    if t["ce_levels"] is None:
        if kind == "multilabel":
            t["ce_levels"] = list(range(int(cfg["data"]["multilabel"]["levels"])))
        else:
            t["ce_levels"] = [0]
    if t["ce"] and t["ce_weight"] is None and cfg["heads"] is None and kind == "multilabel":
        t["ce_weight"] = 0.7
    if cfg["heads"] is None:
        cfg["heads"] = _default_heads(cfg)
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError(f"jobs: must be a positive integer, got {cfg['jobs']!r}")
    seeds = cfg["experiment"]["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("experiment.seeds: must be a non-empty list of integers")
    # construct once so every constraint is checked before any run starts
    train_config(cfg)
    probe_config(cfg)
    return cfg


def head_configs(cfg: dict) -> tuple:
    out = []
    for i, h in enumerate(cfg["heads"]):
        where = f"heads[{i}]"
        if not isinstance(h, dict):
            raise ConfigError(f"{where}: expected a mapping")
        unknown = set(h) - {"level", "global", "threshold", "temperature", "weight"}
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        try:
            if h.get("global"):
                crit = Global(float(h.get("threshold", cfg["global_head"]["threshold"])))
                tau = float(h.get("temperature", cfg["global_head"]["temperature"]))
            else:
                if "level" not in h:
                    raise ConfigError(f"{where}: needs 'level' or 'global: true'")
                crit = Level(int(h["level"]))
                tau = float(h.get("temperature", 0.1))
            out.append(HeadConfig(crit, tau, float(h["weight"])))
        except KeyError as exc:
            raise ConfigError(f"{where}: missing {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}: {exc}") from None
    return tuple(out)


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    try:
        return TrainConfig(
            heads=head_configs(cfg),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            momentum=float(t["momentum"]),
            seed=int(t["seed"]),
            ce=bool(t["ce"]),
            ce_levels=tuple(t["ce_levels"]),
            ce_weight=None if t["ce_weight"] is None else float(t["ce_weight"]),
            aug_noise=float(t["aug_noise"]),
            aug_dropout=float(t["aug_dropout"]),
            two_views=bool(t["two_views"]),
            reduction=str(t["reduction"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train/heads: {exc}") from None


def probe_config(cfg: dict) -> ProbeConfig:
    p = {k: v for k, v in cfg["probe"].items() if k != "level"}
    try:
        pc = ProbeConfig(**p)
    except TypeError as exc:
        raise ConfigError(f"probe: {exc}") from None
    if pc.epochs < 1 or pc.lr <= 0 or pc.batch_size < 1 or not 0 < pc.test_fraction < 1:
        raise ConfigError(f"probe: invalid settings {p}")
    return pc


def to_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
