"""Multi-level labels, positive-pair structure and label noise.

Labels are carried around as integer matrices of shape ``(n, L)``; the
:class:`MultiLevelLabel` record is the per-sample view of one row. Views of
source sample ``k`` occupy rows ``2k`` and ``2k + 1`` of an augmented batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mlcl import kernels


@dataclass(frozen=True)
class MultiLevelLabel:
    levels: tuple
    cardinalities: tuple

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "cardinalities", cards)
        if len(levels) < 1:
            raise ValueError("a label needs at least one level")
        if len(levels) != len(cards):
            raise ValueError(
                f"{len(levels)} levels but {len(cards)} cardinalities"
            )
        for l, (v, c) in enumerate(zip(levels, cards)):
            if c < 2:
                raise ValueError(f"level {l}: cardinality {c} < 2")
            if not 0 <= v < c:
                raise ValueError(f"level {l}: class {v} outside [0, {c})")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def labels_to_array(labels: Sequence[MultiLevelLabel]):
    """Stack labels into an ``(n, L)`` int array; returns ``(array, cardinalities)``."""
    if len(labels) == 0:
        raise ValueError("empty label list")
    cards = labels[0].cardinalities
    for k, lab in enumerate(labels):
        if lab.cardinalities != cards:
            raise ValueError(
                f"label {k} has cardinalities {lab.cardinalities}, expected {cards}"
            )
    return np.array([lab.levels for lab in labels], dtype=np.int64), cards


def array_to_labels(levels: np.ndarray, cardinalities) -> list:
    cards = tuple(int(c) for c in cardinalities)
    return [MultiLevelLabel(tuple(row), cards) for row in np.asarray(levels)]


@dataclass(frozen=True)
class AugmentedBatchLabels:
    """Labels of a two-view batch: ``levels`` is ``(2N, L)``."""

    levels: np.ndarray
    cardinalities: tuple
    n_samples: int

    def __post_init__(self):
        if self.levels.shape[0] != 2 * self.n_samples:
            raise ValueError(
                f"expected {2 * self.n_samples} rows, got {self.levels.shape[0]}"
            )
        if not np.array_equal(self.levels[0::2], self.levels[1::2]):
            raise ValueError("paired views carry different labels")

    @property
    def n_levels(self) -> int:
        return self.levels.shape[1]

    @property
    def labels(self) -> list:
        return array_to_labels(self.levels, self.cardinalities)

    def __len__(self):
        return self.levels.shape[0]


@dataclass(frozen=True)
class PositiveSet:
    """``mask[i, j]`` is true iff ``j`` is a positive of anchor ``i``."""

    mask: np.ndarray
    weights: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def expand_to_views(labels) -> AugmentedBatchLabels:
    """Duplicate every sample's label for its two augmented views.

    For label arrays use :func:`expand_array`.
    """
    levels, cards = labels_to_array(list(labels))
    return expand_array(levels, cards)


def expand_array(levels: np.ndarray, cardinalities) -> AugmentedBatchLabels:
    levels = np.asarray(levels, dtype=np.int64)
    if levels.ndim != 2 or levels.shape[0] == 0:
        raise ValueError("expected a non-empty (N, L) label array")
    return AugmentedBatchLabels(
        np.repeat(levels, 2, axis=0), tuple(cardinalities), levels.shape[0]
    )


def _level_mask(column: np.ndarray) -> np.ndarray:
    mask = column[:, None] == column[None, :]
    np.fill_diagonal(mask, False)
    return mask


def _levels_of(batch) -> np.ndarray:
    # raw (n, L) matrices are accepted for single-view batches
    return batch.levels if isinstance(batch, AugmentedBatchLabels) else np.asarray(batch)


def level_positive_set(batch, level: int) -> PositiveSet:
    levels = _levels_of(batch)
    if not 0 <= level < levels.shape[1]:
        raise IndexError(f"level {level} out of range for {levels.shape[1]} levels")
    return PositiveSet(_level_mask(levels[:, level]))


def jaccard(a: MultiLevelLabel, b: MultiLevelLabel) -> float:
    """Sum-of-min over sum-of-max of the concatenated per-level one-hots.

    Each agreeing level adds 1 to both sums, each disagreeing level adds 0
    and 2, so the result is ``agree / (2L - agree)``.
    """
    if a.cardinalities != b.cardinalities:
        raise ValueError(
            f"label shapes differ: {a.cardinalities} vs {b.cardinalities}"
        )
    L = len(a.levels)
    agree = sum(x == y for x, y in zip(a.levels, b.levels))
    return agree / (2 * L - agree)


def jaccard_matrix(levels: np.ndarray) -> np.ndarray:
    return kernels.jaccard_matrix(np.ascontiguousarray(levels, dtype=np.int64))


def global_positive_set(batch, threshold: float) -> PositiveSet:
    """Pairs with Jaccard similarity strictly above ``threshold``, weighted by it."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    sim = jaccard_matrix(_levels_of(batch))
    mask = sim > threshold
    np.fill_diagonal(mask, False)
    return PositiveSet(mask, np.where(mask, sim, 0.0))


def inject_label_noise(labels, level: int, rate: float, rng, n_classes=None):
    """Uniform label noise at one level.

    With probability ``rate`` a label is redrawn uniformly over all ``N``
    classes, so it survives with probability ``1 - rate (N-1)/N`` and moves
    to each other class with probability ``rate / N``. Accepts a list of
    :class:`MultiLevelLabel` (returns a new list) or an ``(n, L)`` int array
    with ``n_classes`` given (returns a new array).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    as_list = not isinstance(labels, np.ndarray)
    if as_list:
        arr, cards = labels_to_array(list(labels))
        n_classes = cards[level]
    else:
        arr = labels
        if n_classes is None:
            raise ValueError("n_classes is required for array labels")
    if not 0 <= level < arr.shape[1]:
        raise IndexError(f"level {level} out of range for {arr.shape[1]} levels")
    n = arr.shape[0]
    switch = rng.random(n) < rate
    drawn = rng.integers(0, n_classes, size=n)
    out = arr.copy()
    out[:, level] = np.where(switch, drawn, arr[:, level])
    if as_list:
        return array_to_labels(out, cards)
    return out
