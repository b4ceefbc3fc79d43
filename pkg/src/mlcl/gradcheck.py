"""Finite-difference checks of the analytical gradients.

Used by ``mlcl gradcheck`` and the test-suite. Central differences perturb
each coordinate by ``+-h``; agreement is measured as
``|analytic - numeric| / max(|analytic|, |numeric|)`` over the whole array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlcl.labels import expand_array, global_positive_set, level_positive_set
from mlcl.loss import Global, HeadConfig, Level, loss_and_gradient, per_anchor_loss
from mlcl.network import ModelParams, ModelSpec, TrainConfig, batch_objective

TEMPERATURES = (0.1, 0.5, 1.0)


def relative_error(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, x, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at array ``x`` (``x`` restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        up = f()
        flat[k] = keep - h
        down = f()
        flat[k] = keep
        g[k] = (up - down) / (2.0 * h)
    return grad


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@dataclass
class LossCase:
    n_samples: int
    dim: int
    tau: float
    weighted: bool
    error: float


def random_loss_case(rng, max_samples: int = 8, max_dim: int = 8, weighted: bool = False):
    """A random ``(z, positive set, tau)`` with label-derived positives."""
    N = int(rng.integers(1, max_samples + 1))
    d = int(rng.integers(1, max_dim + 1))
    tau = float(rng.choice(TEMPERATURES))
    if weighted:
        levels = rng.integers(0, 2, size=(N, 4))
        batch = expand_array(levels, (2,) * 4)
        pos = global_positive_set(batch, float(rng.choice([0.0, 0.3, 0.5])))
    else:
        levels = rng.integers(0, 3, size=(N, 2))
        batch = expand_array(levels, (3, 3))
        pos = level_positive_set(batch, int(rng.integers(0, 2)))
    return unit_rows(rng, 2 * N, d), pos, tau


def check_loss_gradients(n_cases: int = 100, seed: int = 0, h: float = 1e-5, weighted: bool = False) -> list:
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n_cases):
        z, pos, tau = random_loss_case(rng, weighted=weighted)
        _, analytic = loss_and_gradient(z, pos, tau, weighted=weighted)
        work = z.copy()
        numeric = central_difference(
            lambda: float(per_anchor_loss(work, pos, tau, weighted=weighted).sum()), work, h
        )
        cases.append(LossCase(z.shape[0] // 2, z.shape[1], tau, weighted, relative_error(analytic, numeric)))
    return cases


def tiny_model_problem(mode: str, seed: int = 0):
    """Small net, fixed two-view batch and labels for end-to-end checks.

    ``mode`` is ``"heads"`` (two heads, weights summing to one) or ``"heads+ce"``
    (two heads plus a cross-entropy share).
    """
    rng = np.random.default_rng(seed)
    N, D = 3, 4
    cards = (3, 2)
    levels = np.array([[0, 0], [1, 0], [2, 1]])
    if mode == "heads":
        heads = (HeadConfig(Level(0), 0.1, 0.5), HeadConfig(Level(1), 0.5, 0.5))
        cfg = TrainConfig(heads=heads, ce=False)
    elif mode == "heads+ce":
        heads = (HeadConfig(Level(0), 0.1, 0.3), HeadConfig(Global(0.2), 0.5, 0.2))
        cfg = TrainConfig(heads=heads, ce=True, ce_levels=(0, 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_classes = sum(cards[l] for l in cfg.ce_levels)
    spec = ModelSpec(input_dim=D, n_heads=2, n_classes=n_classes, hidden_dim=5, embed_dim=4,
                     head_hidden=4, proj_dim=3)
    params = ModelParams.init(spec, seed)
    x = rng.standard_normal((2 * N, D))
    view_levels = expand_array(levels, cards).levels
    return params, x, view_levels, cards, cfg


def check_model_gradients(mode: str, seed: int = 0, h: float = 1e-5) -> dict:
    """Per-tensor and overall relative error of end-to-end parameter gradients."""
    params, x, view_levels, cards, cfg = tiny_model_problem(mode, seed)
    _, analytic = batch_objective(params, x, view_levels, cards, cfg)

    def objective():
        report, _ = batch_objective(params, x, view_levels, cards, cfg)
        return report.total

    per_tensor = {}
    flat_a, flat_n = [], []
    for name, _ in params.spec.shapes():
        numeric = central_difference(objective, params.tensors[name], h)
        per_tensor[name] = relative_error(analytic[name], numeric)
        flat_a.append(analytic[name].ravel())
        flat_n.append(numeric.ravel())
    overall = relative_error(np.concatenate(flat_a), np.concatenate(flat_n))
    return {"mode": mode, "overall": overall, "per_tensor": per_tensor}


def run_suite(loss_cases: int = 100, seed: int = 0, loss_tol: float = 1e-6, model_tol: float = 1e-5) -> list:
    """All checks as ``(name, error, tolerance)`` triples."""
    out = []
    for i, c in enumerate(check_loss_gradients(loss_cases, seed)):
        out.append((f"head_loss[{i}] N={c.n_samples} d={c.dim} tau={c.tau}", c.error, loss_tol))
    for i, c in enumerate(check_loss_gradients(max(loss_cases // 4, 1), seed + 1, weighted=True)):
        out.append((f"global_loss[{i}] N={c.n_samples} d={c.dim} tau={c.tau}", c.error, loss_tol))
    for mode in ("heads", "heads+ce"):
        r = check_model_gradients(mode, seed)
        out.append((f"model[{mode}]", r["overall"], model_tol))
    return out
