"""Feed-forward encoder with multiple projection heads, trained by hand-written backprop.

Shapes: inputs ``(B, D)``; encoder ``D -> hidden -> E`` with tanh after both
layers; each head ``E -> head_hidden -> d`` (tanh hidden layer, linear output,
then row L2 normalization); classifier ``E -> C`` linear. Weight matrices are
stored ``(fan_in, fan_out)`` and applied as ``x @ W + b``.
"""

from __future__ import annotations

import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mlcl.data import Dataset, augment, two_views
from mlcl.labels import expand_array, global_positive_set, level_positive_set
from mlcl.loss import HeadConfig, LossReport, combined_loss, cross_entropy, loss_and_gradient, rescale_for_ce

log = logging.getLogger(__name__)

MIN_ROW_NORM = 1e-12


class DegenerateInputError(ValueError):
    pass


def activation(x):
    return np.tanh(x)


def activation_grad(y):
    # derivative of tanh expressed through its output
    return 1.0 - y * y


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    n_heads: int
    n_classes: int
    hidden_dim: int = 128
    embed_dim: int = 64
    head_hidden: int = 64
    proj_dim: int = 32

    def __post_init__(self):
        for name in ("input_dim", "n_classes", "hidden_dim", "embed_dim", "head_hidden", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads < 0:
            raise ValueError("n_heads must be >= 0")

    def shapes(self) -> list:
        """``(name, shape)`` in declaration order; checkpoint blocks follow it."""
        out = [
            ("enc.W1", (self.input_dim, self.hidden_dim)),
            ("enc.b1", (self.hidden_dim,)),
            ("enc.W2", (self.hidden_dim, self.embed_dim)),
            ("enc.b2", (self.embed_dim,)),
        ]
        for h in range(self.n_heads):
            out += [
                (f"head{h}.W1", (self.embed_dim, self.head_hidden)),
                (f"head{h}.b1", (self.head_hidden,)),
                (f"head{h}.W2", (self.head_hidden, self.proj_dim)),
                (f"head{h}.b2", (self.proj_dim,)),
            ]
        out += [("clf.W", (self.embed_dim, self.n_classes)), ("clf.b", (self.n_classes,))]
        return out


def _component_rng(seed: int, key: int, sub: int = 0):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key, sub)))


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ModelParams:
    spec: ModelSpec
    seed: int
    tensors: dict
    velocity: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights, biases uniform in +-1/sqrt(fan_in).

        Non-zero biases keep an all-zero input (every coordinate dropped)
        from collapsing to a zero projection. Encoder, each head and the
        classifier draw from separate seed streams, so adding a head never
        changes the other components' initial values.
        """
        tensors = {}
        streams = {"enc": _component_rng(seed, 0), "clf": _component_rng(seed, 1)}
        for h in range(spec.n_heads):
            streams[f"head{h}"] = _component_rng(seed, 2, h)
        fan_in = None
        for name, shape in spec.shapes():
            rng = streams[name.split(".")[0]]
            if len(shape) == 2:
                fan_in = shape[0]
                tensors[name] = _glorot(rng, *shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        params = cls(spec, int(seed), tensors)
        params.reset_velocity()
        return params

    def reset_velocity(self):
        self.velocity = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            self.seed,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k, _ in self.spec.shapes()])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def normalize_rows(m):
    """Unit-normalize rows; returns ``(normalized, backprop)``.

    ``backprop(g)`` maps an upstream gradient through ``v -> v / |v|`` using
    ``(I - z z^T) g / |v|`` row by row.
    """
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=1))
    bad = np.flatnonzero(~(norms >= MIN_ROW_NORM))
    if bad.size:
        raise DegenerateInputError(
            f"row {int(bad[0])} has norm {norms[bad[0]]:.3g} < {MIN_ROW_NORM}; cannot normalize"
        )
    z = m / norms[:, None]

    def backprop(g):
        g = np.asarray(g, dtype=np.float64)
        return (g - z * (g * z).sum(axis=1, keepdims=True)) / norms[:, None]

    return z, backprop


@dataclass
class ForwardCache:
    x: np.ndarray
    hidden: np.ndarray
    embeddings: np.ndarray
    head_hidden: list
    head_backprop: list
    projections: list
    logits: np.ndarray


def _check_input(params: ModelParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input dim {params.spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def embed(params: ModelParams, x) -> np.ndarray:
    t = params.tensors
    x = _check_input(params, x)
    hidden = activation(x @ t["enc.W1"] + t["enc.b1"])
    return activation(hidden @ t["enc.W2"] + t["enc.b2"])


def forward(params: ModelParams, x) -> ForwardCache:
    t = params.tensors
    x = _check_input(params, x)
    hidden = activation(x @ t["enc.W1"] + t["enc.b1"])
    emb = activation(hidden @ t["enc.W2"] + t["enc.b2"])
    head_hidden, head_backprop, projections = [], [], []
    for h in range(params.spec.n_heads):
        u = activation(emb @ t[f"head{h}.W1"] + t[f"head{h}.b1"])
        v = u @ t[f"head{h}.W2"] + t[f"head{h}.b2"]
        z, back = normalize_rows(v)
        head_hidden.append(u)
        head_backprop.append(back)
        projections.append(z)
    logits = emb @ t["clf.W"] + t["clf.b"]
    return ForwardCache(x, hidden, emb, head_hidden, head_backprop, projections, logits)


def backward(
    params: ModelParams,
    cache: Optional[ForwardCache],
    head_grads: Sequence,
    ce_grad=None,
) -> dict:
    """Gradients of every parameter given upstream gradients.

    ``head_grads[h]`` is dL/dz for head ``h`` (``None`` for no contribution);
    ``ce_grad`` is dL/dlogits or ``None``. Cross-entropy gradients reach the
    encoder as well as the classifier.
    """
    if cache is None:
        raise ValueError("backward needs the cache from a forward pass")
    t = params.tensors
    spec = params.spec
    if len(head_grads) != spec.n_heads:
        raise ValueError(f"{len(head_grads)} head gradients for {spec.n_heads} heads")
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    emb = cache.embeddings
    d_emb = np.zeros_like(emb)

    for h, g in enumerate(head_grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != cache.projections[h].shape:
            raise ValueError(f"head {h} gradient shape {g.shape} != {cache.projections[h].shape}")
        u = cache.head_hidden[h]
        dv = cache.head_backprop[h](g)
        grads[f"head{h}.W2"] = u.T @ dv
        grads[f"head{h}.b2"] = dv.sum(axis=0)
        du = (dv @ t[f"head{h}.W2"].T) * activation_grad(u)
        grads[f"head{h}.W1"] = emb.T @ du
        grads[f"head{h}.b1"] = du.sum(axis=0)
        d_emb += du @ t[f"head{h}.W1"].T

    if ce_grad is not None:
        ce_grad = np.asarray(ce_grad, dtype=np.float64)
        if ce_grad.shape != cache.logits.shape:
            raise ValueError(f"ce gradient shape {ce_grad.shape} != {cache.logits.shape}")
        grads["clf.W"] = emb.T @ ce_grad
        grads["clf.b"] = ce_grad.sum(axis=0)
        d_emb += ce_grad @ t["clf.W"].T

    da2 = d_emb * activation_grad(emb)
    grads["enc.W2"] = cache.hidden.T @ da2
    grads["enc.b2"] = da2.sum(axis=0)
    da1 = (da2 @ t["enc.W2"].T) * activation_grad(cache.hidden)
    grads["enc.W1"] = cache.x.T @ da1
    grads["enc.b1"] = da1.sum(axis=0)
    return grads


def sgd_step(params: ModelParams, grads: dict, lr: float, momentum: float) -> ModelParams:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``. Returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(f"gradient of {name} has {bad} non-finite entries; aborting")
    for name, g in grads.items():
        v = params.velocity[name]
        v *= momentum
        v += g
        params.tensors[name] -= lr * v
    return params


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    heads: tuple = ()
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    ce: bool = False
    ce_levels: tuple = (0,)
    ce_weight: Optional[float] = None
    aug_noise: float = 0.3
    aug_dropout: float = 0.1
    two_views: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "ce_levels", tuple(int(l) for l in self.ce_levels))
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.ce_weight is not None:
            object.__setattr__(self, "heads", tuple(rescale_for_ce(self.heads, self.ce_weight)))
        total = math.fsum(h.weight for h in self.heads)
        if self.ce:
            if total > 1.0 + 1e-9:
                raise ValueError(f"head weights sum to {total} > 1 with cross-entropy enabled")
        else:
            if not self.heads:
                raise ValueError("at least one projection head is required without cross-entropy")
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"head weights must sum to 1 without cross-entropy, got {total}")

    @property
    def ce_coefficient(self) -> float:
        if not self.ce:
            return 0.0
        return 1.0 - math.fsum(h.weight for h in self.heads)


def classifier_slices(cardinalities, ce_levels) -> list:
    out, start = [], 0
    for l in ce_levels:
        out.append((l, slice(start, start + cardinalities[l])))
        start += cardinalities[l]
    return out


def n_classifier_outputs(cardinalities, ce_levels) -> int:
    return sum(cardinalities[l] for l in ce_levels)


def positive_set_for(head: HeadConfig, batch_levels):
    if head.is_global:
        return global_positive_set(batch_levels, head.criterion.threshold)
    return level_positive_set(batch_levels, head.criterion.index)


def batch_objective(params: ModelParams, x_views, view_levels, cardinalities, cfg: TrainConfig):
    """Loss report and parameter gradients for one already-augmented batch.

    ``x_views`` and ``view_levels`` are row-aligned (two views per sample, or
    one row per sample in single-view mode).
    """
    cache = forward(params, x_views)
    n_rows = x_views.shape[0]
    scale = 1.0 / n_rows if cfg.reduction == "mean" else 1.0

    per_head, head_grads, weighted = [], [], []
    for h, head in enumerate(cfg.heads):
        pos = positive_set_for(head, view_levels)
        value, g = loss_and_gradient(cache.projections[h], pos, head.temperature, weighted=head.is_global)
        value *= scale
        per_head.append((f"{h}:{head.name}", value))
        weighted.append((head, value))
        head_grads.append(g * (scale * head.weight) if head.weight != 0.0 else None)

    ce_value, ce_grad = None, None
    if cfg.ce:
        ce_value = 0.0
        ce_grad = np.zeros_like(cache.logits)
        slices = classifier_slices(cardinalities, cfg.ce_levels)
        for level, sl in slices:
            v, g = cross_entropy(cache.logits[:, sl], view_levels[:, level])
            ce_value += v / len(slices)
            ce_grad[:, sl] = g / len(slices)
        ce_grad *= cfg.ce_coefficient

    total = combined_loss(weighted, ce_value)
    grads = backward(params, cache, head_grads, ce_grad)
    return LossReport(per_head, ce_value, total), grads


def _mean_report(reports: list) -> LossReport:
    if not reports:
        return LossReport([], None, float("nan"))
    names = [name for name, _ in reports[0].per_head]
    per_head = [
        (name, math.fsum(r.per_head[i][1] for r in reports) / len(reports))
        for i, name in enumerate(names)
    ]
    ce = None
    if reports[0].ce is not None:
        ce = math.fsum(r.ce for r in reports) / len(reports)
    total = math.fsum(r.total for r in reports) / len(reports)
    return LossReport(per_head, ce, total)


def check_model_for(params: ModelParams, ds: Dataset, cfg: TrainConfig):
    if params.spec.input_dim != ds.dim:
        raise ValueError(f"model expects {params.spec.input_dim} features, dataset has {ds.dim}")
    if params.spec.n_heads != len(cfg.heads):
        raise ValueError(f"model has {params.spec.n_heads} heads, config lists {len(cfg.heads)}")
    if cfg.ce:
        want = n_classifier_outputs(ds.cardinalities, cfg.ce_levels)
        if params.spec.n_classes != want:
            raise ValueError(f"classifier has {params.spec.n_classes} outputs, CE levels need {want}")


def train(params: ModelParams, ds: Dataset, cfg: TrainConfig):
    """Run the training loop; returns ``(trained copy, per-epoch LossReport list)``.

    The input parameters are not modified. Momentum buffers start at zero.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    check_model_for(params, ds, cfg)
    params = params.copy()
    params.reset_velocity()
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(7,)))
    history = []
    n = len(ds)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        reports = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            x = ds.features[idx]
            if cfg.two_views:
                xv = two_views(x, cfg.aug_noise, cfg.aug_dropout, rng)
                levels = expand_array(ds.levels[idx], ds.cardinalities).levels
            else:
                xv = augment(x, cfg.aug_noise, cfg.aug_dropout, rng)
                levels = ds.levels[idx]
            report, grads = batch_objective(params, xv, levels, ds.cardinalities, cfg)
            sgd_step(params, grads, cfg.lr, cfg.momentum)
            reports.append(report)
        history.append(_mean_report(reports))
        log.debug("epoch %d total %.6f", epoch, history[-1].total)
    return params, history


def build_model(ds: Dataset, cfg: TrainConfig, seed: Optional[int] = None, **dims) -> ModelParams:
    """Fresh parameters sized for ``ds`` and ``cfg``; ``dims`` override ModelSpec sizes."""
    n_classes = n_classifier_outputs(ds.cardinalities, cfg.ce_levels) if cfg.ce_levels else 1
    spec = ModelSpec(input_dim=ds.dim, n_heads=len(cfg.heads), n_classes=n_classes, **dims)
    return ModelParams.init(spec, cfg.seed if seed is None else seed)


def predict_levels(params: ModelParams, x, cardinalities, ce_levels) -> np.ndarray:
    """Argmax per classified level, ``(n, len(ce_levels))``."""
    logits = embed(params, x) @ params.tensors["clf.W"] + params.tensors["clf.b"]
    return np.stack(
        [np.argmax(logits[:, sl], axis=1) for _, sl in classifier_slices(cardinalities, ce_levels)],
        axis=1,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MLCLCKPT"
_VERSION = 1
_HEADER = struct.Struct("<8sI7Iq")


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Header then little-endian float64 blocks in declaration order.

    Header: magic ``MLCLCKPT``, uint32 version, uint32 input_dim, hidden_dim,
    embed_dim, head_hidden, proj_dim, n_heads, n_classes, int64 seed.
    Momentum buffers are not stored.
    """
    s = params.spec
    head = _HEADER.pack(
        _MAGIC, _VERSION, s.input_dim, s.hidden_dim, s.embed_dim, s.head_hidden,
        s.proj_dim, s.n_heads, s.n_classes, params.seed,
    )
    blocks = [np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes() for k, _ in s.shapes()]
    return head + b"".join(blocks)


def params_from_bytes(raw: bytes) -> ModelParams:
    if len(raw) < _HEADER.size:
        raise ValueError("checkpoint truncated: header incomplete")
    magic, version, D, hid, E, hh, d, H, C, seed = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec = ModelSpec(input_dim=D, n_heads=H, n_classes=C, hidden_dim=hid, embed_dim=E, head_hidden=hh, proj_dim=d)
    offset = _HEADER.size
    tensors = {}
    for name, shape in spec.shapes():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"checkpoint truncated inside block {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    params = ModelParams(spec, int(seed), tensors)
    params.reset_velocity()
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(params))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
