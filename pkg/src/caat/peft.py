"""Trainable-parameter allocation: masks, LoRA and bottleneck adapters.

Each parameter tensor is assigned exactly one branch:

* ``lora`` / ``adapter``: the weight matrix stays frozen and a low-rank
  module learns its update (indirect tuning);
* ``mask``: only the bottleneck entries inside the tensor are updated in
  place (direct tuning);
* ``frozen``: nothing changes.

A matrix goes indirect once its critical count reaches the threshold
``sigma_tre``; in the default ``corrected`` mode that threshold equals the
module's own trainable parameter count, so indirect tuning never adds more
trainables than the critical entries it replaces.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, PathError

BRANCHES = ("lora", "adapter", "mask", "frozen")
SIGMA_MODES = ("corrected", "literal")
INDIRECT_KINDS = ("lora", "adapter", "none")
LORA_INIT_STD = 0.02


# -- modules --------------------------------------------------------------------

@dataclass
class LoRAAdapter:
    path: str  # layer name, e.g. "blocks.0.attn.qkv"
    down: np.ndarray  # [d_in, r]
    up: np.ndarray  # [r, d_out]

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2 or self.down.shape[1] != self.up.shape[0]:
            raise DimensionError(
                f"LoRA {self.path}: down {self.down.shape} and up {self.up.shape} disagree on rank")
        if self.rank < 1:
            raise DimensionError(f"LoRA {self.path}: rank must be >= 1")

    @property
    def rank(self):
        return self.down.shape[1]

    @property
    def num_params(self):
        return self.down.size + self.up.size

    def delta(self):
        return self.down @ self.up


def init_lora(path, d_in, d_out, rank, rng) -> LoRAAdapter:
    """Gaussian down-projection, zero up-projection: the update starts at zero."""
    if not 1 <= rank <= min(d_in, d_out):
        raise DimensionError(f"LoRA rank {rank} outside [1, min({d_in}, {d_out})]")
    return LoRAAdapter(path, rng.normal(0.0, LORA_INIT_STD, (d_in, rank)), np.zeros((rank, d_out)))


@dataclass
class AdapterModule:
    path: str  # layer whose output the adapter transforms
    down: np.ndarray  # [d, r]
    up: np.ndarray  # [r, d]
    residual: bool = True
    nonlinearity: str = "gelu"

    def __post_init__(self):
        if (self.down.ndim != 2 or self.up.ndim != 2 or self.down.shape[1] != self.up.shape[0]
                or self.down.shape[0] != self.up.shape[1]):
            raise DimensionError(
                f"adapter {self.path}: down {self.down.shape} / up {self.up.shape} mismatch")

    @property
    def width(self):
        return self.down.shape[0]

    @property
    def rank(self):
        return self.down.shape[1]

    @property
    def num_params(self):
        return self.down.size + self.up.size


def init_adapter(path, width, rank, rng) -> AdapterModule:
    return AdapterModule(path, rng.normal(0.0, LORA_INIT_STD, (width, rank)), np.zeros((rank, width)))


def lora_forward(theta, adapter: LoRAAdapter, x):
    """``x @ (theta + down @ up)`` without materializing the merged matrix."""
    theta = ad.as_tensor(theta)
    down, up = ad.as_tensor(adapter.down), ad.as_tensor(adapter.up)
    if theta.shape != (down.shape[0], up.shape[1]):
        raise DimensionError(
            f"LoRA {adapter.path}: weight {theta.shape} vs down {down.shape} / up {up.shape}")
    return ad.matmul(x, theta) + ad.matmul(ad.matmul(x, down), up)


def merge_lora(theta, adapter: LoRAAdapter):
    theta = np.asarray(theta, dtype=np.float64)
    delta = adapter.delta()
    if theta.shape != delta.shape:
        raise DimensionError(f"cannot merge LoRA of shape {delta.shape} into {theta.shape}")
    return theta + delta


def adapter_forward(hidden, module: AdapterModule):
    """Residual bottleneck ``h + up(gelu(down(h)))`` (no residual when disabled)."""
    hidden = ad.as_tensor(hidden)
    if hidden.shape[-1] != module.width:
        raise DimensionError(
            f"adapter {module.path}: hidden width {hidden.shape[-1]} != {module.width}")
    if module.nonlinearity != "gelu":
        raise ConfigError(f"unsupported adapter nonlinearity {module.nonlinearity!r}")
    out = ad.matmul(ad.gelu(ad.matmul(hidden, ad.as_tensor(module.down))), ad.as_tensor(module.up))
    return hidden + out if module.residual else out


# -- masks ------------------------------------------------------------------------

def build_mask(store, bottleneck, path) -> np.ndarray:
    """Boolean mask over ``store[path]``: True exactly at bottleneck members."""
    if path not in store:
        raise PathError(f"unknown parameter path {path!r}")
    start, stop = store.offsets(path)
    idx = bottleneck.indices
    lo, hi = np.searchsorted(idx, [start, stop])
    mask = np.zeros(stop - start, dtype=bool)
    mask[idx[lo:hi] - start] = True
    return mask.reshape(store[path].shape)


# -- allocation -------------------------------------------------------------------

def is_lora_target(path, shape):
    return path.endswith(".weight") and len(shape) == 2


def layer_of(path):
    return path[: -len(".weight")]


def sigma_threshold(shape, rank, mode="corrected", indirect="lora"):
    """Critical-count threshold for sending a ``[d_in, d_out]`` matrix indirect."""
    if mode not in SIGMA_MODES:
        raise ConfigError(f"sigma_tre_mode must be one of {SIGMA_MODES}, got {mode!r}")
    d_in, d_out = shape
    if mode == "literal":
        return 2 * d_in * d_out * rank
    if indirect == "adapter":
        return 2 * d_out * rank
    return rank * (d_in + d_out)


@dataclass(frozen=True)
class Allocation:
    path: str
    branch: str
    shape: tuple
    critical_count: int
    sigma_tre: int | None
    trainable: int
    rank: int | None = None
    mask_offsets: tuple = field(default=(), repr=False)

    def mask(self):
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[list(self.mask_offsets)] = True
        return m.reshape(self.shape)


class AllocationPlan:
    """Immutable per-tensor branch assignment plus bookkeeping."""

    def __init__(self, entries, total_params, rank, sigma_tre_mode, indirect, meta=None):
        self.entries = OrderedDict((e.path, e) for e in entries)
        self.total_params = int(total_params)
        self.rank = rank
        self.sigma_tre_mode = sigma_tre_mode
        self.indirect = indirect
        self.meta = dict(meta or {})

    def __getitem__(self, path):
        return self.entries[path]

    def __iter__(self):
        return iter(self.entries.values())

    def paths(self, branch):
        return [e.path for e in self if e.branch == branch]

    @property
    def trainable_params(self):
        return sum(e.trainable for e in self)

    @property
    def tuned_fraction(self):
        return self.trainable_params / self.total_params if self.total_params else 0.0

    def is_empty(self):
        return all(e.branch == "frozen" for e in self)

    def check_store(self, store):
        for e in self:
            if e.path not in store or tuple(store[e.path].shape) != tuple(e.shape):
                raise ContractError(f"plan entry {e.path} {e.shape} does not match the parameter store")

    def to_dict(self):
        return {
            "rank": self.rank,
            "sigma_tre_mode": self.sigma_tre_mode,
            "indirect": self.indirect,
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "tuned_fraction": self.tuned_fraction,
            "meta": self.meta,
            "entries": [
                {"path": e.path, "branch": e.branch, "shape": list(e.shape),
                 "critical_count": e.critical_count, "sigma_tre": e.sigma_tre,
                 "trainable": e.trainable, "rank": e.rank,
                 "mask_offsets": list(e.mask_offsets)}
                for e in self
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        entries = [Allocation(e["path"], e["branch"], tuple(e["shape"]), e["critical_count"],
                              e["sigma_tre"], e["trainable"], e["rank"], tuple(e["mask_offsets"]))
                   for e in data["entries"]]
        return cls(entries, data["total_params"], data["rank"], data["sigma_tre_mode"],
                   data["indirect"], data.get("meta"))

    def to_table(self):
        header = f"{'path':<28} {'branch':<8} {'critical':>9} {'sigma_tre':>10} {'trainable':>10}"
        lines = [header, "-" * len(header)]
        for e in self:
            sigma = "-" if e.sigma_tre is None else str(e.sigma_tre)
            lines.append(f"{e.path:<28} {e.branch:<8} {e.critical_count:>9} {sigma:>10} "
                         f"{e.trainable:>10}")
        lines.append("-" * len(header))
        lines.append(f"trainable {self.trainable_params} / total {self.total_params} "
                     f"= {100 * self.tuned_fraction:.2f}%  (rank {self.rank}, "
                     f"sigma_tre mode {self.sigma_tre_mode}, indirect {self.indirect})")
        return "\n".join(lines) + "\n"


def _module_params(indirect, shape, rank):
    d_in, d_out = shape
    return rank * (d_in + d_out) if indirect == "lora" else 2 * d_out * rank


def allocate(store, bottleneck, rank=16, sigma_tre_mode="corrected", indirect="lora",
             counts=None, head_trainable=False, base_paths=None, meta=None) -> AllocationPlan:
    """Branch every parameter tensor according to its critical count.

    ``indirect="none"`` disables the indirect branch, yielding pure direct
    (mask-only) tuning of the bottleneck.
    """
    from .criticality import summarize_per_matrix

    if indirect not in INDIRECT_KINDS:
        raise ConfigError(f"indirect must be one of {INDIRECT_KINDS}, got {indirect!r}")
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    counts = counts if counts is not None else summarize_per_matrix(store, bottleneck)
    paths = base_paths or store.paths
    entries = []
    for path in paths:
        shape = tuple(store[path].shape)
        count = int(counts.get(path, 0))
        forced = head_trainable and path.startswith("head.")
        sigma = None
        if is_lora_target(path, shape) and indirect != "none":
            sigma = sigma_threshold(shape, rank, sigma_tre_mode, indirect)
        if count == 0 and not forced:
            entries.append(Allocation(path, "frozen", shape, 0, sigma, 0))
        elif sigma is not None and count >= sigma and not forced:
            entries.append(Allocation(path, indirect, shape, count, sigma,
                                      _module_params(indirect, shape, rank), rank))
        else:
            mask = np.ones(shape, dtype=bool) if forced else build_mask(store, bottleneck, path)
            offsets = tuple(int(i) for i in np.flatnonzero(mask.reshape(-1)))
            entries.append(Allocation(path, "mask", shape, count, sigma, len(offsets),
                                      mask_offsets=offsets))
    total = sum(int(np.prod(store[p].shape)) for p in paths)
    return AllocationPlan(entries, total, rank, sigma_tre_mode, indirect, meta)


def uniform_plan(store, branch="lora", rank=16, base_paths=None, meta=None) -> AllocationPlan:
    """Baseline plan: every eligible weight matrix gets ``branch``; the rest freeze."""
    if branch not in ("lora", "adapter"):
        raise ConfigError(f"uniform plans support lora/adapter, got {branch!r}")
    paths = base_paths or store.paths
    entries = []
    for path in paths:
        shape = tuple(store[path].shape)
        if is_lora_target(path, shape) and rank < min(shape):
            entries.append(Allocation(path, branch, shape, 0, None,
                                      _module_params(branch, shape, rank), rank))
        else:
            entries.append(Allocation(path, "frozen", shape, 0, None, 0))
    total = sum(int(np.prod(store[p].shape)) for p in paths)
    return AllocationPlan(entries, total, rank, "corrected", branch, meta)
