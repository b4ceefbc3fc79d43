"""Linear probes, neighbourhood structure, and the ablation experiments.

Every experiment is a grid of cells x seeds. One (cell, seed) run is a pure
function of its arguments, so runs can be farmed out to worker processes and
the table is assembled sorted by key afterwards.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from mlcl import kernels
from mlcl.data import (
    Dataset,
    Standardizer,
    gen_hierarchical,
    gen_multilabel,
    stratified_split,
    stratified_subsample,
)
from mlcl.labels import inject_label_noise
from mlcl.loss import Global, HeadConfig, Level, cross_entropy
from mlcl.network import (
    ModelParams,
    ModelSpec,
    TrainConfig,
    build_model,
    embed,
    predict_levels,
    train,
)

log = logging.getLogger(__name__)

SUBCLASS, SUPERCLASS = 0, 1


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    test_fraction: float = 0.2


def linear_probe(
    embeddings,
    labels,
    cfg: ProbeConfig = ProbeConfig(),
    seed: int = 0,
    test_embeddings=None,
    test_labels=None,
) -> float:
    """Top-1 accuracy of a softmax classifier fit on frozen embeddings.

    Without an explicit test set the data is split per class
    (``cfg.test_fraction`` held out). Inputs are never modified.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(emb)):
        raise ValueError("embeddings contain non-finite values")
    if emb.shape[0] != y.shape[0]:
        raise ValueError(f"{emb.shape[0]} embeddings but {y.shape[0]} labels")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(31,)))
    if test_embeddings is None:
        tr, te = stratified_split(y, cfg.test_fraction, rng)
        x_tr, y_tr, x_te, y_te = emb[tr], y[tr], emb[te], y[te]
    else:
        x_tr, y_tr = emb, y
        x_te = np.asarray(test_embeddings, dtype=np.float64)
        y_te = np.asarray(test_labels, dtype=np.int64)
    if y_te.size == 0:
        raise ValueError("probe split left no held-out samples")
    missing = np.setdiff1d(np.unique(y_te), np.unique(y_tr))
    if missing.size:
        raise ValueError(f"degenerate split: classes {missing.tolist()} absent from probe training data")

    n_classes = int(max(y_tr.max(), y_te.max())) + 1
    W = np.zeros((x_tr.shape[1], n_classes))
    b = np.zeros(n_classes)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    n = x_tr.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_tr[idx]
            _, g = cross_entropy(xb @ W + b, y_tr[idx])
            vW = cfg.momentum * vW + xb.T @ g
            vb = cfg.momentum * vb + g.sum(axis=0)
            W -= cfg.lr * vW
            b -= cfg.lr * vb
    pred = np.argmax(x_te @ W + b, axis=1)
    return float(np.mean(pred == y_te))


def knn_superclass_consistency(embeddings, labels, k: int = 10) -> float:
    """Mean fraction of each point's k nearest (Euclidean) neighbours sharing its label."""
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    n = emb.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must lie in [1, {n}), got {k}")
    return float(kernels.knn_agreement(emb, y, int(k)))


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


def hierarchical_heads(tau_sub: float = 0.1, tau_super: float = 0.5, alpha_sub: float = 0.5) -> tuple:
    return (
        HeadConfig(Level(SUBCLASS), tau_sub, alpha_sub),
        HeadConfig(Level(SUPERCLASS), tau_super, 1.0 - alpha_sub),
    )


def supcon_heads(tau: float = 0.1) -> tuple:
    return (HeadConfig(Level(SUBCLASS), tau, 1.0),)


def multilabel_heads(n_levels: int, level_total: float, global_weight: float,
                     tau: float = 0.1, global_tau: float = 0.5, threshold: float = 0.7) -> tuple:
    each = level_total / n_levels
    heads = [HeadConfig(Level(l), tau, each) for l in range(n_levels)]
    heads.append(HeadConfig(Global(threshold), global_tau, global_weight))
    return tuple(heads)


def hierarchical_split(data: dict, seed: int, train_size: Optional[int] = None):
    """Generate, split and standardize one hierarchical dataset.

    ``data`` holds :func:`gen_hierarchical` keywords plus ``test_per_class``.
    Returns ``(train, test)``; ``train`` optionally subsampled per class.
    """
    data = dict(data)
    test_per_class = int(data.pop("test_per_class", 20))
    per_class = int(data.pop("per_class", 50))
    ds = gen_hierarchical(per_class=per_class + test_per_class, seed=seed, **data)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(41,)))
    frac = test_per_class / (per_class + test_per_class)
    tr, te = stratified_split(ds.levels[:, SUBCLASS], frac, rng)
    train_ds, test_ds = ds.subset(tr), ds.subset(te)
    if train_size is not None and train_size < len(train_ds):
        keep = stratified_subsample(train_ds.levels[:, SUBCLASS], int(train_size), rng)
        train_ds = train_ds.subset(keep)
    scaler = Standardizer.fit(train_ds.features)
    train_ds.features = scaler(train_ds.features)
    test_ds.features = scaler(test_ds.features)
    return train_ds, test_ds


def hierarchical_run(data: dict, model: dict, cfg: TrainConfig, probe: ProbeConfig,
                     seed: int, train_size: Optional[int] = None, knn_k: int = 10) -> dict:
    """Train on one seeded split; probe subclass accuracy and superclass structure on the test part."""
    train_ds, test_ds = hierarchical_split(data, seed, train_size)
    cfg = replace(cfg, seed=int(seed))
    params = build_model(train_ds, cfg, **model)
    params, history = train(params, train_ds, cfg)
    emb_tr = embed(params, train_ds.features)
    emb_te = embed(params, test_ds.features)
    acc = linear_probe(emb_tr, train_ds.levels[:, SUBCLASS], probe, seed,
                       emb_te, test_ds.levels[:, SUBCLASS])
    knn = knn_superclass_consistency(emb_te, test_ds.levels[:, SUPERCLASS], knn_k)
    return {
        "accuracy": acc,
        "knn_superclass": knn,
        "final_loss": history[-1].total if history else float("nan"),
    }


def multilabel_split(data: dict, seed: int, noise_rate: float = 0.0):
    """Train/test multi-label data; training labels get uniform noise at every level."""
    data = dict(data)
    n_train = int(data.pop("n_train", 360))
    n_test = int(data.pop("n_test", 1000))
    ds = gen_multilabel(n_samples=n_train + n_test, seed=seed, **data)
    train_ds, test_ds = ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, n_train + n_test))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(43,)))
    levels = train_ds.levels
    for l in range(levels.shape[1]):
        levels = inject_label_noise(levels, l, noise_rate, rng, n_classes=ds.cardinalities[l])
    train_ds.levels = levels
    scaler = Standardizer.fit(train_ds.features)
    train_ds.features = scaler(train_ds.features)
    test_ds.features = scaler(test_ds.features)
    return train_ds, test_ds


def multilabel_run(data: dict, model: dict, cfg: TrainConfig, seed: int, noise_rate: float = 0.0) -> dict:
    """Jointly trained classifier accuracy, averaged over levels, on clean test labels."""
    train_ds, test_ds = multilabel_split(data, seed, noise_rate)
    cfg = replace(cfg, seed=int(seed), ce=True, ce_levels=tuple(range(train_ds.levels.shape[1])))
    params = build_model(train_ds, cfg, **model)
    params, history = train(params, train_ds, cfg)
    pred = predict_levels(params, test_ds.features, test_ds.cardinalities, cfg.ce_levels)
    per_level = (pred == test_ds.levels[:, list(cfg.ce_levels)]).mean(axis=0)
    return {
        "accuracy": float(per_level.mean()),
        "per_level": [float(v) for v in per_level],
        "final_loss": history[-1].total if history else float("nan"),
    }


# ---------------------------------------------------------------------------
# experiment tables
# ---------------------------------------------------------------------------


def _call(task):
    fn, kwargs = task
    return fn(**kwargs)


def run_tasks(tasks: list, jobs: int = 1) -> list:
    """Evaluate ``(fn, kwargs)`` tasks, optionally in worker processes; order preserved."""
    if jobs <= 1 or len(tasks) <= 1:
        return [_call(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_call, tasks))


def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": [float(v) for v in arr]}


def _table(cells: list, seeds: Sequence[int], results: list, metrics: Sequence[str]) -> list:
    """Group flat per-(cell, seed) results into one row per cell, sorted by cell key."""
    rows = []
    n = len(seeds)
    for c, (key, info) in enumerate(cells):
        chunk = results[c * n : (c + 1) * n]
        row = {"key": key, **info, "seeds": [int(s) for s in seeds]}
        for m in metrics:
            row[m] = _stats([r[m] for r in chunk])
        rows.append(row)
    return sorted(rows, key=lambda r: r["key"])


def temperature_sweep(data: dict, model: dict, cfg: TrainConfig, probe: ProbeConfig,
                      grid: Sequence[float], seeds: Sequence[int], train_size: Optional[int] = None,
                      tau_sub: float = 0.1, knn_k: int = 10, jobs: int = 1) -> list:
    """Two-head runs with the subclass temperature pinned and the superclass one swept."""
    if not grid:
        raise ValueError("temperature grid is empty")
    cells, tasks = [], []
    for tau2 in grid:
        run_cfg = replace(cfg, heads=hierarchical_heads(tau_sub, float(tau2)))
        cells.append((f"tau2={float(tau2):.4f}", {"tau_super": float(tau2), "tau_sub": tau_sub}))
        for s in seeds:
            tasks.append((hierarchical_run, dict(data=data, model=model, cfg=run_cfg, probe=probe,
                                                 seed=s, train_size=train_size, knn_k=knn_k)))
    return _table(cells, seeds, run_tasks(tasks, jobs), ("accuracy", "knn_superclass"))


def limited_samples_study(data: dict, model: dict, cfg: TrainConfig, probe: ProbeConfig,
                          sizes: Sequence[int], seeds: Sequence[int], tau_super: float = 0.5,
                          knn_k: int = 10, jobs: int = 1) -> list:
    """Single-head SupCon against two-head MLCL for each training-set size."""
    methods = (("supcon", supcon_heads(cfg.heads[0].temperature if cfg.heads else 0.1)),
               ("mlcl", hierarchical_heads(0.1, tau_super)))
    cells, tasks = [], []
    for size in sizes:
        for name, heads in methods:
            run_cfg = replace(cfg, heads=heads)
            cells.append((f"size={int(size):06d}/{name}", {"size": int(size), "method": name}))
            for s in seeds:
                tasks.append((hierarchical_run, dict(data=data, model=model, cfg=run_cfg, probe=probe,
                                                     seed=s, train_size=int(size), knn_k=knn_k)))
    return _table(cells, seeds, run_tasks(tasks, jobs), ("accuracy", "knn_superclass"))


def noise_ablation(data: dict, model: dict, cfg: TrainConfig, rates: Sequence[float],
                   seeds: Sequence[int], global_weight: float = 0.6, level_total: float = 0.2,
                   threshold: float = 0.7, global_tau: float = 0.5, level_tau: float = 0.1,
                   jobs: int = 1) -> list:
    """Cross-entropy only against MLCL with a heavy global head, per noise rate."""
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"noise rate {r} outside [0, 1]")
    n_levels = int(data.get("levels", 7))
    methods = (
        ("ce", ()),
        ("mlcl", multilabel_heads(n_levels, level_total, global_weight, level_tau, global_tau, threshold)),
    )
    cells, tasks = [], []
    for r in rates:
        for name, heads in methods:
            run_cfg = replace(cfg, heads=heads, ce=True, ce_weight=None)
            cells.append((f"rate={float(r):.4f}/{name}", {"rate": float(r), "method": name}))
            for s in seeds:
                tasks.append((multilabel_run, dict(data=data, model=model, cfg=run_cfg, seed=s,
                                                   noise_rate=float(r))))
    return _table(cells, seeds, run_tasks(tasks, jobs), ("accuracy",))


def transfer_probe(params: ModelParams, target: Dataset, probe: ProbeConfig = ProbeConfig(),
                   level: int = SUBCLASS, seed: int = 0) -> float:
    """Probe accuracy on ``target`` through a frozen encoder trained elsewhere."""
    if params.spec.input_dim != target.dim:
        raise ValueError(
            f"encoder expects {params.spec.input_dim} features, target dataset has {target.dim}"
        )
    return linear_probe(embed(params, target.features), target.levels[:, level], probe, seed)


def transfer_target(data: dict, super_centers, seed: int, per_class: Optional[int] = None) -> Dataset:
    """Same superclusters as the source, freshly drawn subclass centers and samples."""
    gen_keys = {k: v for k, v in data.items() if k != "test_per_class"}
    if per_class is not None:
        gen_keys["per_class"] = int(per_class)
    target = gen_hierarchical(seed=seed + 7919, super_centers=super_centers, **gen_keys)
    target.features = Standardizer.fit(target.features)(target.features)
    return target


def _transfer_run(data: dict, model: dict, cfg: TrainConfig, probe: ProbeConfig, seed: int,
                  level: int = SUPERCLASS, target_per_class: Optional[int] = None) -> dict:
    train_ds, _ = hierarchical_split(data, seed)
    target = transfer_target(data, train_ds.meta["super_centers"], seed, target_per_class)
    out = {}
    for name, heads in (("supcon", supcon_heads()), ("mlcl", hierarchical_heads())):
        run_cfg = replace(cfg, heads=heads, seed=int(seed))
        params = build_model(train_ds, run_cfg, **model)
        if name == "supcon":
            # untrained control shares the supcon run's encoder initialization
            out["random"] = transfer_probe(params, target, probe, level, seed)
        params, _ = train(params, train_ds, run_cfg)
        out[name] = transfer_probe(params, target, probe, level, seed)
    return out


def transfer_study(data: dict, model: dict, cfg: TrainConfig, probe: ProbeConfig,
                   seeds: Sequence[int], level: int = SUPERCLASS, target_per_class: Optional[int] = None,
                   jobs: int = 1) -> list:
    """Frozen source encoders (random, SupCon, MLCL) probed on a related target.

    Only the superclusters are shared between source and target, so the
    superclass level is the default probe target.
    """
    results = run_tasks([(_transfer_run, dict(data=data, model=model, cfg=cfg, probe=probe, seed=s,
                                              level=level, target_per_class=target_per_class))
                         for s in seeds], jobs)
    rows = []
    for name in ("mlcl", "random", "supcon"):
        rows.append({"key": name, "method": name, "level": int(level), "seeds": [int(s) for s in seeds],
                     "accuracy": _stats([r[name] for r in results])})
    return rows
