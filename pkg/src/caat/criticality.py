"""Robust parameter criticality scores and the top-tau bottleneck set.

Each parameter's score is the sum over adversarial batches of its squared
loss gradient, the first-order estimate of how much one gradient step on
that parameter alone would lower the adversarial loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import ContractError
from .reference import DEFAULT_BITS, ReferenceModel
from .vit import forward


@dataclass
class CriticalityScores:
    scores: np.ndarray
    sample_count: int = 0
    batch_count: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)

    def __len__(self):
        return len(self.scores)

    def merge(self, other: "CriticalityScores") -> "CriticalityScores":
        if len(other) != len(self):
            raise ContractError(f"cannot merge scores of length {len(self)} and {len(other)}")
        return CriticalityScores(self.scores + other.scores, self.sample_count + other.sample_count,
                                 self.batch_count + other.batch_count)


@dataclass
class BottleneckSet:
    indices: np.ndarray
    total: int
    tau: int = field(default=0)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if np.any(np.diff(self.indices) <= 0):
            raise ContractError("bottleneck indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)

    def __contains__(self, index):
        pos = np.searchsorted(self.indices, index)
        return bool(pos < len(self.indices) and self.indices[pos] == index)

    def membership(self):
        member = np.zeros(self.total, dtype=bool)
        member[self.indices] = True
        return member


def pairwise_sum(arrays):
    """Sum a list of equal-shape arrays with a balanced binary tree."""
    arrays = list(arrays)
    if not arrays:
        raise ContractError("pairwise_sum of an empty list")
    while len(arrays) > 1:
        paired = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            paired.append(arrays[-1])
        arrays = paired
    return arrays[0]


def build_adversarial_set(store, data: Dataset, attack: AttackConfig, batch_size=32,
                          seed=0) -> Dataset:
    """Attack every sample against the frozen ``store``; labels are kept."""
    if len(data) == 0:
        raise ContractError("cannot build an adversarial set from empty data")
    rng = np.random.default_rng(seed)
    adv = [pgd(store, x, y, attack, rng) for x, y in data.batches(batch_size)]
    return Dataset(np.concatenate(adv), data.labels.copy(), "adversarial", data.num_classes)


def loss_gradient(store, x, y, loss_scale=1.0):
    """Batch-mean cross-entropy and its gradient as a flat vector over ``store``."""
    with Tape() as tape:
        leaves = store.leaves(True)
        loss = ad.softmax_cross_entropy(forward(leaves, x, store.config), y)
        if loss_scale != 1.0:
            loss = loss * loss_scale
        tape.backward(loss)
    return loss.item(), np.concatenate([t.grad.reshape(-1) for t in leaves.values()])


def accumulate_gradients(gradient_fn, batches) -> CriticalityScores:
    """Sum of squared gradients over ``batches`` for any model.

    ``gradient_fn(x, y)`` returns the flat loss gradient for one batch;
    every batch must yield the same length.
    """
    terms, samples = [], 0
    for x, y in batches:
        g = np.asarray(gradient_fn(x, y), dtype=np.float64)
        if terms and g.shape != terms[0].shape:
            raise ContractError(f"gradient length {g.shape} drifted from {terms[0].shape}")
        terms.append(g * g)
        samples += len(y)
    if not terms:
        raise ContractError("cannot score criticality without any batches")
    return CriticalityScores(pairwise_sum(terms), samples, len(terms))


def accumulate_rpc(store, adv_data: Dataset, batch_size=32, loss_scale=1.0) -> CriticalityScores:
    """Sum of squared per-batch gradients over ``adv_data`` with ``store`` frozen."""
    if len(adv_data) == 0:
        raise ContractError("cannot score criticality on an empty adversarial set")

    def gradient(x, y):
        g = loss_gradient(store, x, y, loss_scale)[1]
        if g.shape != (store.size,):
            raise ContractError(f"gradient length {g.shape} drifted from store size {store.size}")
        return g

    return accumulate_gradients(gradient, adv_data.batches(batch_size))


def batch_loss(store, x, y):
    return ad.softmax_cross_entropy(store(x), y).item()


def first_order_oracle(store, x, y, index, step, gradient=None, bits=DEFAULT_BITS,
                       reference=None):
    """Measured loss drop from one gradient step on parameter ``index`` alone.

    Returns ``(decrease, g_n)`` with ``decrease = rho(theta) - rho(theta')``
    where ``theta'`` differs from ``theta`` only in ``theta_n -= step * g_n``.
    Losses are evaluated by the arbitrary-precision reference forward at
    ``bits`` of mantissa (pass a prebuilt ``reference`` to reuse it across
    indices); ``bits=None`` uses the float64 forward instead, whose rounding
    swamps decreases much below ``1e-16 * rho``.
    """
    if not 0 <= index < store.size:
        raise IndexError(f"parameter index {index} outside [0, {store.size})")
    if not step > 0:
        raise ValueError("step must be positive")
    if gradient is None:
        _, gradient = loss_gradient(store, x, y)
    g = float(gradient[index])
    path, offset = store.locate(index)
    if bits is None and reference is None:
        theta = store.flatten()
        loss = lambda flat: batch_loss(store.with_flat(flat), x, y)
        return one_step_decrease(loss, theta, index, step, g), g
    if reference is None:
        reference = ReferenceModel(store, bits)
    shifted = reference.shifted_value(path, offset, step * g)
    after = reference.loss(x, y, {(path, offset): shifted})
    return float(reference.base_loss(x, y) - after), g


def one_step_decrease(loss_fn, theta, index, step, g):
    """``loss(theta) - loss(theta')`` where only ``theta'[index] = theta[index] - step * g``."""
    theta = np.asarray(theta, dtype=np.float64)
    moved = theta.copy()
    moved[index] -= step * g
    return float(loss_fn(theta)) - float(loss_fn(moved))


def exact_criticality(loss_fn, theta, index, bracket=(-10.0, 10.0)):
    """Slow oracle: ``rho(theta) - min over theta_n of rho`` with the rest fixed.

    Only practical for tiny models; ``loss_fn`` maps a flat vector to a float.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = float(loss_fn(theta))

    def along(value):
        probe = theta.copy()
        probe[index] = value
        return float(loss_fn(probe))

    lo, hi = theta[index] + bracket[0], theta[index] + bracket[1]
    result = minimize_scalar(along, bounds=(lo, hi), method="bounded",
                             options={"xatol": 1e-12})
    return max(base - min(result.fun, base), 0.0)


def select_top_tau(scores, tau) -> BottleneckSet:
    """Exact top-``tau`` indices by score; ties go to the lower flat index."""
    values = scores.scores if isinstance(scores, CriticalityScores) else np.asarray(scores)
    n = len(values)
    tau = int(tau)
    if not 0 <= tau <= n:
        raise ContractError(f"tau must lie in [0, {n}], got {tau}")
    order = np.lexsort((np.arange(n), -values))
    return BottleneckSet(np.sort(order[:tau]), n, tau)


def resolve_tau(tau, total):
    """An absolute count, or a fraction of ``total`` when ``0 < tau < 1``."""
    if tau < 0:
        raise ContractError(f"tau must be non-negative, got {tau}")
    if 0 < tau < 1:
        return int(math.floor(tau * total))
    if tau != int(tau):
        raise ContractError(f"absolute tau must be an integer, got {tau}")
    return min(int(tau), total)


def summarize_per_matrix(store, bottleneck: BottleneckSet):
    """Bottleneck members falling inside each parameter path."""
    if bottleneck.total != store.size:
        raise ContractError(
            f"bottleneck over {bottleneck.total} parameters does not match store of {store.size}")
    counts = {}
    for path in store.paths:
        start, stop = store.offsets(path)
        lo, hi = np.searchsorted(bottleneck.indices, [start, stop])
        counts[path] = int(hi - lo)
    return counts


def _row_col(shape, offset):
    if len(shape) <= 1:
        return 0, offset
    cols = shape[-1]
    return offset // cols, offset % cols


def export_csv(path, scores: CriticalityScores, bottleneck: BottleneckSet, store):
    """Write one row per parameter sorted by flat index.

    Tensors with more than two axes are viewed as ``[prod(leading), last]``
    and vectors as a single row.
    """
    member = bottleneck.membership()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["flat_index", "path", "row", "col", "score", "in_bottleneck"])
        for name in store.paths:
            start, stop = store.offsets(name)
            shape = store[name].shape
            for offset in range(stop - start):
                flat = start + offset
                row, col = _row_col(shape, offset)
                writer.writerow([flat, name, row, col, repr(float(scores.scores[flat])),
                                 int(member[flat])])


def read_csv(path):
    """Load an exported CSV back into ``(paths, scores, membership)`` arrays."""
    paths, values, member = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            paths.append(row["path"])
            values.append(float(row["score"]))
            member.append(row["in_bottleneck"] == "1")
    return paths, np.array(values), np.array(member, dtype=bool)


def jaccard(a: BottleneckSet, b: BottleneckSet) -> float:
    union = np.union1d(a.indices, b.indices)
    if not len(union):
        return 1.0
    return len(np.intersect1d(a.indices, b.indices)) / len(union)
