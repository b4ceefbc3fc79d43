"""Synthetic datasets, feature-space augmentation and CSV I/O."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlcl.labels import array_to_labels


class SchemaError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (n, D)
    levels: np.ndarray  # (n, L) int
    cardinalities: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.features.ndim != 2 or self.levels.ndim != 2:
            raise ValueError("features and levels must be 2-D")
        if self.features.shape[0] != self.levels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.levels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        self.cardinalities = tuple(int(c) for c in self.cardinalities)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labels(self) -> list:
        return array_to_labels(self.levels, self.cardinalities)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.levels[idx], self.cardinalities, dict(self.meta))


def gen_hierarchical(
    superclasses: int,
    subclasses_per_super: int,
    per_class: int,
    dim: int,
    super_scale: float = 10.0,
    sub_scale: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
    super_centers=None,
) -> Dataset:
    """Gaussian clusters nested two deep.

    Level 0 is the subclass (``s * M + m``), level 1 the superclass ``s``.
    Pass ``super_centers`` from another dataset's ``meta`` to redraw only the
    subclass centers around the same superclusters.
    """
    S, M = int(superclasses), int(subclasses_per_super)
    if S < 1 or M < 1 or per_class < 1:
        raise ValueError(f"need positive counts, got S={S}, M={M}, per_class={per_class}")
    if dim < 2:
        raise ValueError(f"feature dimension must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    if super_centers is None:
        super_centers = super_scale * rng.standard_normal((S, dim))
    else:
        super_centers = np.asarray(super_centers, dtype=np.float64)
        if super_centers.shape != (S, dim):
            raise ValueError(f"super_centers shape {super_centers.shape} != {(S, dim)}")
    sub_centers = np.repeat(super_centers, M, axis=0) + sub_scale * rng.standard_normal((S * M, dim))

    sub = np.repeat(np.arange(S * M), per_class)
    x = sub_centers[sub] + noise * rng.standard_normal((sub.size, dim))
    order = rng.permutation(sub.size)
    sub = sub[order]
    levels = np.stack([sub, sub // M], axis=1)
    meta = {
        "kind": "hierarchical",
        "superclasses": S,
        "subclasses_per_super": M,
        "per_class": int(per_class),
        "dim": int(dim),
        "super_scale": float(super_scale),
        "sub_scale": float(sub_scale),
        "noise": float(noise),
        "seed": int(seed),
        "super_centers": super_centers,
        "sub_centers": sub_centers,
    }
    # single-class levels still get two slots so every label stays well-formed
    return Dataset(x[order], levels, (max(S * M, 2), max(S, 2)), meta)


def gen_multilabel(
    levels: int,
    classes_per_level: int,
    n_samples: int,
    dim: int,
    noise: float = 1.0,
    correlation: float = 0.5,
    seed: int = 0,
) -> Dataset:
    """Ordinal multi-aspect labels.

    Each sample draws a latent overall class; each level copies it with
    probability ``correlation`` and is uniform otherwise, so per-level
    marginals stay uniform while aspects co-vary. Features are
    ``sum_l c_l u_l + noise * eps`` with fixed random unit directions ``u_l``.
    """
    L, N = int(levels), int(classes_per_level)
    if L < 2 or N < 2 or n_samples < 1:
        raise ValueError(f"need L >= 2, N >= 2, n >= 1; got {L}, {N}, {n_samples}")
    if dim < 2:
        raise ValueError(f"feature dimension must be >= 2, got {dim}")
    if not 0.0 <= correlation <= 1.0:
        raise ValueError(f"correlation must lie in [0, 1], got {correlation}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((L, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    latent = rng.integers(0, N, size=n_samples)
    copy = rng.random((n_samples, L)) < correlation
    free = rng.integers(0, N, size=(n_samples, L))
    y = np.where(copy, latent[:, None], free)
    x = y.astype(np.float64) @ dirs + noise * rng.standard_normal((n_samples, dim))
    meta = {
        "kind": "multilabel",
        "levels": L,
        "classes_per_level": N,
        "n_samples": int(n_samples),
        "dim": int(dim),
        "noise": float(noise),
        "correlation": float(correlation),
        "seed": int(seed),
        "directions": dirs,
    }
    return Dataset(x, y, (N,) * L, meta)


def augment(x, noise_scale: float, dropout_prob: float, rng) -> np.ndarray:
    """Gaussian jitter then independent coordinate dropout; works on any shape."""
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    if not 0.0 <= dropout_prob < 1.0:
        raise ValueError(f"dropout_prob must lie in [0, 1), got {dropout_prob}")
    x = np.asarray(x, dtype=np.float64)
    out = x + noise_scale * rng.standard_normal(x.shape) if noise_scale > 0 else x.copy()
    if dropout_prob > 0:
        out[rng.random(x.shape) < dropout_prob] = 0.0
    return out


def two_views(x, noise_scale: float, dropout_prob: float, rng) -> np.ndarray:
    """``(B, D) -> (2B, D)`` with rows ``2k`` and ``2k+1`` both derived from sample ``k``."""
    x = np.asarray(x, dtype=np.float64)
    first = augment(x, noise_scale, dropout_prob, rng)
    second = augment(x, noise_scale, dropout_prob, rng)
    out = np.empty((2 * x.shape[0], x.shape[1]))
    out[0::2] = first
    out[1::2] = second
    return out


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


def stratified_split(column, test_fraction: float, rng):
    """Per-class shuffled split; classes with one sample stay in the training part."""
    column = np.asarray(column)
    train, test = [], []
    for c in np.unique(column):
        idx = rng.permutation(np.flatnonzero(column == c))
        n_test = int(round(test_fraction * idx.size))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        else:
            n_test = 0
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def stratified_subsample(column, size: int, rng):
    """``size`` indices spread as evenly as possible across the classes of ``column``."""
    column = np.asarray(column)
    classes = np.unique(column)
    if size > column.size:
        raise ValueError(f"requested {size} samples from {column.size}")
    if size < classes.size:
        raise ValueError(f"need at least one sample per class ({classes.size}), got {size}")
    base, extra = divmod(size, classes.size)
    bonus = set(rng.permutation(classes)[:extra].tolist())
    picked = []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(column == c))
        want = base + (1 if c in bonus else 0)
        if want > idx.size:
            raise ValueError(f"class {c} has {idx.size} samples, {want} requested")
        picked.extend(idx[:want].tolist())
    return np.sort(np.array(picked, dtype=np.int64))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _table_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(ds: Dataset, path) -> None:
    D, L = ds.features.shape[1], ds.levels.shape[1]
    header = [f"f_{j}" for j in range(D)] + [f"level_{l}" for l in range(L)]
    rows = (
        [repr(float(v)) for v in feat] + [str(int(v)) for v in lab]
        for feat, lab in zip(ds.features, ds.levels)
    )
    write_atomic(path, _table_text(header, rows))


def write_embeddings_csv(emb, levels, path) -> None:
    emb = np.asarray(emb)
    levels = np.asarray(levels)
    header = [f"dim_{j}" for j in range(emb.shape[1])] + [f"level_{l}" for l in range(levels.shape[1])]
    rows = (
        [repr(float(v)) for v in e] + [str(int(v)) for v in lab] for e, lab in zip(emb, levels)
    )
    write_atomic(path, _table_text(header, rows))


def _parse_header(header):
    feats, levs = [], []
    for col, name in enumerate(header):
        if name.startswith("f_"):
            feats.append((col, name))
        elif name.startswith("level_"):
            levs.append((col, name))
        else:
            raise SchemaError(f"column {col}: unexpected header {name!r}")
    for prefix, cols in (("f_", feats), ("level_", levs)):
        for want, (col, name) in enumerate(cols):
            if name != f"{prefix}{want}":
                raise SchemaError(f"column {col}: expected {prefix}{want}, found {name!r}")
    if not feats:
        raise SchemaError("missing feature column f_0")
    if not levs:
        raise SchemaError("missing label column level_0")
    if [c for c, _ in feats] + [c for c, _ in levs] != list(range(len(header))):
        raise SchemaError("feature columns must precede label columns")
    return len(feats), len(levs)


def load_csv(path, cardinalities=None) -> Dataset:
    """Read ``f_0..f_{D-1},level_0..level_{L-1}``.

    Cardinalities default to ``max class + 1`` per level (at least 2).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        D, L = _parse_header(header)
        feats, levs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != D + L:
                raise SchemaError(f"line {lineno}: {len(row)} cells, expected {D + L}")
            try:
                f = [float(v) for v in row[:D]]
            except ValueError:
                col = next(j for j, v in enumerate(row[:D]) if not _is_float(v))
                raise SchemaError(
                    f"line {lineno}, column {header[col]}: non-numeric value {row[col]!r}"
                ) from None
            lab = []
            for j, v in enumerate(row[D:]):
                try:
                    iv = int(v)
                except ValueError:
                    raise SchemaError(
                        f"line {lineno}, column {header[D + j]}: non-integer label {v!r}"
                    ) from None
                if iv < 0:
                    raise SchemaError(f"line {lineno}, column {header[D + j]}: negative label {iv}")
                lab.append(iv)
            feats.append(f)
            levs.append(lab)
    if not feats:
        raise SchemaError(f"{path}: no data rows")
    levels = np.array(levs, dtype=np.int64)
    if cardinalities is None:
        cardinalities = tuple(max(int(m) + 1, 2) for m in levels.max(axis=0))
    return Dataset(np.array(feats), levels, cardinalities, {"kind": "csv", "path": str(path)})


def _is_float(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False
