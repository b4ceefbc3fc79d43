"""``mlcl`` command-line entry point.

    mlcl <mode> [--config run.yaml] [--key.sub=value ...]

Every mode writes its artifacts under ``output_dir``; experiment modes write
``<mode>.json`` (config echo plus per-cell mean/std/per-seed values) and
``<mode>.csv``. Wall-clock timings go to ``run.log`` only, so the JSON is a
pure function of the resolved config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from mlcl import evaluation, gradcheck
from mlcl.config import MODES, ConfigError, load_config, probe_config, to_yaml, train_config
from mlcl.data import (
    Dataset,
    Standardizer,
    gen_hierarchical,
    gen_multilabel,
    load_csv,
    write_atomic,
    write_csv,
    write_embeddings_csv,
)
from mlcl.network import build_model, embed, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mlcl")


def dataset_from_config(cfg: dict, path_key: str = "dataset") -> Dataset:
    """Explicit CSV path wins; otherwise the configured generator, full size."""
    path = cfg["paths"].get(path_key) or (cfg["data"]["path"] if cfg["data"]["kind"] == "csv" else None)
    if path:
        return load_csv(path)
    seed = int(cfg["data"]["seed"])
    if cfg["data"]["kind"] == "multilabel":
        p = dict(cfg["data"]["multilabel"])
        n = int(p.pop("n_train")) + int(p.pop("n_test"))
        return gen_multilabel(n_samples=n, seed=seed, **p)
    p = dict(cfg["data"]["hierarchical"])
    p.pop("test_per_class", None)
    return gen_hierarchical(seed=seed, **p)


def standardized(ds: Dataset) -> Dataset:
    out = ds.subset(np.arange(len(ds)))
    out.features = Standardizer.fit(ds.features)(ds.features)
    return out


def results_document(name: str, cfg: dict, rows: list) -> str:
    doc = {"experiment": name, "config": cfg, "rows": rows}
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"


def rows_csv(rows: list) -> str:
    """Flat plot table: one line per (cell, metric)."""
    lines = ["key,metric,mean,std," + ",".join(f"seed_{s}" for s in rows[0].get("seeds", []))]
    for r in rows:
        for metric, val in sorted(r.items()):
            if isinstance(val, dict) and "mean" in val:
                vals = ",".join(repr(v) for v in val["values"])
                lines.append(f"{r['key']},{metric},{val['mean']!r},{val['std']!r},{vals}")
    return "\n".join(lines) + "\n"


def _summary(row: dict) -> str:
    parts = [row["key"]]
    for metric, val in sorted(row.items()):
        if isinstance(val, dict) and "mean" in val:
            parts.append(f"{metric}={val['mean']:.4f}+-{val['std']:.4f}")
    return "  ".join(parts)


def _write_experiment(out: Path, name: str, cfg: dict, rows: list) -> None:
    write_atomic(out / f"{name}.json", results_document(name, cfg, rows))
    write_atomic(out / f"{name}.csv", rows_csv(rows))
    for r in rows:
        print(_summary(r))


def _hier_data(cfg):
    return dict(cfg["data"]["hierarchical"])


def _ml_data(cfg):
    return dict(cfg["data"]["multilabel"])


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, out: Path) -> int:
    ds = dataset_from_config(cfg)
    write_csv(ds, out / "dataset.csv")
    print(f"wrote {len(ds)} rows, {ds.dim} features, {ds.levels.shape[1]} label levels to {out / 'dataset.csv'}")
    return 0


def cmd_train(cfg, out: Path) -> int:
    ds = standardized(dataset_from_config(cfg))
    tcfg = train_config(cfg)
    params = build_model(ds, tcfg, **cfg["model"])
    params, history = train(params, ds, tcfg)
    save_checkpoint(params, out / "checkpoint.bin")
    names = [n for n, _ in history[0].per_head] if history else []
    lines = ["epoch," + ",".join(names + ["ce", "total"])]
    for e, rep in enumerate(history):
        vals = [repr(v) for _, v in rep.per_head] + ["" if rep.ce is None else repr(rep.ce), repr(rep.total)]
        lines.append(f"{e}," + ",".join(vals))
    write_atomic(out / "loss_history.csv", "\n".join(lines) + "\n")
    rows = [{"key": "train", "epochs": len(history),
             "final": history[-1].to_dict() if history else {}, "initial": history[0].to_dict() if history else {}}]
    write_atomic(out / "train.json", results_document("train", cfg, rows))
    if history:
        print(f"train  epochs={len(history)}  initial={history[0].total:.4f}  final={history[-1].total:.4f}")
    return 0


def _require(cfg, key):
    val = cfg["paths"].get(key)
    if not val:
        raise ConfigError(f"paths.{key}: required for this mode")
    return val


def cmd_probe(cfg, out: Path) -> int:
    params = load_checkpoint(_require(cfg, "checkpoint"))
    ds = standardized(dataset_from_config(cfg))
    level = int(cfg["probe"]["level"])
    acc = evaluation.linear_probe(embed(params, ds.features), ds.levels[:, level], probe_config(cfg),
                                  seed=int(cfg["data"]["seed"]))
    rows = [{"key": f"level={level}", "accuracy": acc}]
    write_atomic(out / "probe.json", results_document("probe", cfg, rows))
    print(f"probe  level={level}  accuracy={acc:.4f}")
    return 0


def cmd_export(cfg, out: Path) -> int:
    params = load_checkpoint(_require(cfg, "checkpoint"))
    ds = standardized(dataset_from_config(cfg))
    write_embeddings_csv(embed(params, ds.features), ds.levels, out / "embeddings.csv")
    print(f"wrote {len(ds)} embeddings of dim {params.spec.embed_dim} to {out / 'embeddings.csv'}")
    return 0


def cmd_gradcheck(cfg, out: Path) -> int:
    g = cfg["gradcheck"]
    results = gradcheck.run_suite(int(g["loss_cases"]), int(g["seed"]), float(g["loss_tol"]), float(g["model_tol"]))
    failed = [(n, e, t) for n, e, t in results if not e <= t]
    rows = [{"key": n, "error": e, "tolerance": t, "passed": e <= t} for n, e, t in results]
    write_atomic(out / "gradcheck.json", results_document("gradcheck", cfg, rows))
    worst = max(e for _, e, _ in results)
    print(f"gradcheck  cases={len(results)}  worst={worst:.3e}  failed={len(failed)}")
    for n, e, t in failed:
        print(f"FAIL {n}: error {e:.3e} > {t:.1e}")
    return 1 if failed else 0


def cmd_sweep(cfg, out: Path) -> int:
    e = cfg["experiment"]
    rows = evaluation.temperature_sweep(
        _hier_data(cfg), cfg["model"], train_config(cfg), probe_config(cfg), e["grid"], e["seeds"],
        train_size=e["train_size"], tau_sub=float(e["tau_sub"]), knn_k=int(e["knn_k"]), jobs=cfg["jobs"],
    )
    _write_experiment(out, "sweep-temp", cfg, rows)
    return 0


def cmd_limited(cfg, out: Path) -> int:
    e = cfg["experiment"]
    rows = evaluation.limited_samples_study(
        _hier_data(cfg), cfg["model"], train_config(cfg), probe_config(cfg), e["sizes"], e["seeds"],
        knn_k=int(e["knn_k"]), jobs=cfg["jobs"],
    )
    _write_experiment(out, "limited-samples", cfg, rows)
    return 0


def cmd_noise(cfg, out: Path) -> int:
    e = cfg["experiment"]
    g = cfg["global_head"]
    rows = evaluation.noise_ablation(
        _ml_data(cfg), cfg["model"], train_config(cfg), e["rates"], e["seeds"],
        global_weight=float(e["global_weight"]), level_total=float(e["level_total"]),
        threshold=float(g["threshold"]), global_tau=float(g["temperature"]), jobs=cfg["jobs"],
    )
    _write_experiment(out, "noise-ablation", cfg, rows)
    return 0


def cmd_transfer(cfg, out: Path) -> int:
    if cfg["paths"].get("checkpoint") and cfg["paths"].get("target"):
        params = load_checkpoint(cfg["paths"]["checkpoint"])
        target = standardized(load_csv(cfg["paths"]["target"]))
        level = int(cfg["probe"]["level"])
        acc = evaluation.transfer_probe(params, target, probe_config(cfg), level, seed=int(cfg["data"]["seed"]))
        rows = [{"key": "checkpoint", "accuracy": acc}]
        write_atomic(out / "transfer.json", results_document("transfer", cfg, rows))
        print(f"transfer  accuracy={acc:.4f}")
        return 0
    e = cfg["experiment"]
    rows = evaluation.transfer_study(_hier_data(cfg), cfg["model"], train_config(cfg), probe_config(cfg),
                                     e["seeds"], level=int(e["transfer_level"]),
                                     target_per_class=e["target_per_class"], jobs=cfg["jobs"])
    _write_experiment(out, "transfer", cfg, rows)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "sweep-temp": cmd_sweep,
    "noise-ablation": cmd_noise,
    "limited-samples": cmd_limited,
    "transfer": cmd_transfer,
    "export-embeddings": cmd_export,
}

# these modes default to the multi-label data family
_MULTILABEL_MODES = ("noise-ablation",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlcl",
        description="Multi-level supervised contrastive learning experiments.",
        epilog="Any configuration field can be overridden with --section.key=value.",
    )
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--jobs", type=int, help="parallel worker processes for experiment cells")
    parser.add_argument("--output-dir", help="directory for results (default: runs/<mode>)")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(rest)
    if args.mode in _MULTILABEL_MODES and not any(o.startswith("--data.kind=") for o in overrides):
        overrides.insert(0, "--data.kind=multilabel")
    if args.jobs is not None:
        overrides.append(f"--jobs={args.jobs}")
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"mlcl: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(to_yaml(cfg), end="")
        return 0
    out = Path(args.output_dir or Path(cfg["output_dir"]) / args.mode)
    out.mkdir(parents=True, exist_ok=True)
    start = time.time()
    try:
        status = COMMANDS[args.mode](cfg, out)
    except ConfigError as exc:
        print(f"mlcl: configuration error: {exc}", file=sys.stderr)
        return 2
    with open(out / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} mode={args.mode} status={status} "
                 f"seconds={time.time() - start:.2f}\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
