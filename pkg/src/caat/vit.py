"""A small pre-norm Vision Transformer with a path-named parameter registry."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container
from .errors import CheckpointMismatch, ConfigError, DimensionError, FormatError, PathError

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    dim: int = 32
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"model.{f.name} must be an integer, got {value!r}")
        if min(self.image_size, self.channels, self.patch_size, self.dim,
               self.heads, self.mlp_ratio) < 1:
            raise ConfigError("model sizes must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self):
        return self.num_patches + 1

    @property
    def hidden(self):
        return self.dim * self.mlp_ratio

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: int(v) for k, v in data.items()})


# Linear layers that carry a ``.weight`` matrix of shape (d_in, d_out).
def linear_layers(config: ViTConfig):
    layers = ["patch_embed"]
    for i in range(config.depth):
        layers += [f"blocks.{i}.attn.qkv", f"blocks.{i}.attn.proj",
                   f"blocks.{i}.mlp.fc1", f"blocks.{i}.mlp.fc2"]
    layers.append("head")
    return layers


def parameter_shapes(config: ViTConfig):
    """Ordered ``(path, shape, init)`` triples for every model parameter."""
    d, h = config.dim, config.hidden
    patch_in = config.channels * config.patch_size ** 2
    spec = [
        ("patch_embed.weight", (patch_in, d), "normal"),
        ("patch_embed.bias", (d,), "zeros"),
        ("cls_token", (1, 1, d), "normal"),
        ("pos_embed", (1, config.tokens, d), "normal"),
    ]
    for i in range(config.depth):
        p = f"blocks.{i}"
        spec += [
            (f"{p}.norm1.weight", (d,), "ones"),
            (f"{p}.norm1.bias", (d,), "zeros"),
            (f"{p}.attn.qkv.weight", (d, 3 * d), "normal"),
            (f"{p}.attn.qkv.bias", (3 * d,), "zeros"),
            (f"{p}.attn.proj.weight", (d, d), "normal"),
            (f"{p}.attn.proj.bias", (d,), "zeros"),
            (f"{p}.norm2.weight", (d,), "ones"),
            (f"{p}.norm2.bias", (d,), "zeros"),
            (f"{p}.mlp.fc1.weight", (d, h), "normal"),
            (f"{p}.mlp.fc1.bias", (h,), "zeros"),
            (f"{p}.mlp.fc2.weight", (h, d), "normal"),
            (f"{p}.mlp.fc2.bias", (d,), "zeros"),
        ]
    spec += [
        ("norm.weight", (d,), "ones"),
        ("norm.bias", (d,), "zeros"),
        ("head.weight", (d, config.num_classes), "normal"),
        ("head.bias", (config.num_classes,), "zeros"),
    ]
    return spec


def count_parameters(config: ViTConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in parameter_shapes(config))


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ParameterStore:
    """Ordered mapping from parameter path to float64 array.

    The concatenation of all entries in order defines the flat index space
    ``[0, N)`` that criticality scores and bottleneck sets refer to.
    """

    def __init__(self, entries, config: ViTConfig):
        self.config = config
        self._entries = OrderedDict()
        for path, value in (entries.items() if isinstance(entries, Mapping) else entries):
            if path in self._entries:
                raise PathError(f"duplicate parameter path {path!r}")
            self._entries[path] = np.asarray(value, dtype=np.float64)
        self._reindex()

    def _reindex(self):
        self._offsets = OrderedDict()
        start = 0
        for path, value in self._entries.items():
            self._offsets[path] = (start, start + value.size)
            start += value.size
        self._size = start
        self._starts = np.array([s for s, _ in self._offsets.values()], dtype=np.int64)

    def __getitem__(self, path):
        try:
            return self._entries[path]
        except KeyError:
            raise PathError(f"unknown parameter path {path!r}") from None

    def __setitem__(self, path, value):
        value = np.asarray(value, dtype=np.float64)
        if path in self._entries and self._entries[path].shape != value.shape:
            raise DimensionError(
                f"{path}: replacement shape {value.shape} != {self._entries[path].shape}")
        new = path not in self._entries
        self._entries[path] = value
        if new:
            self._reindex()

    def __delitem__(self, path):
        del self._entries[path]
        self._reindex()

    def __contains__(self, path):
        return path in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def paths(self):
        return list(self._entries)

    @property
    def size(self) -> int:
        """Total scalar parameter count N."""
        return self._size

    def offsets(self, path):
        """Half-open flat index range ``(start, stop)`` of ``path``."""
        try:
            return self._offsets[path]
        except KeyError:
            raise PathError(f"unknown parameter path {path!r}") from None

    def flat_index(self, path, offset) -> int:
        start, stop = self.offsets(path)
        if not 0 <= offset < stop - start:
            raise IndexError(f"offset {offset} outside {path} of size {stop - start}")
        return start + offset

    def locate(self, index):
        """Inverse of :meth:`flat_index`: ``(path, offset)`` for a flat index."""
        if not 0 <= index < self._size:
            raise IndexError(f"flat index {index} outside [0, {self._size})")
        pos = int(np.searchsorted(self._starts, index, side="right")) - 1
        path = self.paths[pos]
        return path, int(index - self._starts[pos])

    def flatten(self):
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._entries.values()])

    def copy(self):
        return ParameterStore([(p, v.copy()) for p, v in self._entries.items()], self.config)

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self._size,):
            raise DimensionError(f"flat vector of length {flat.shape} for store of size {self._size}")
        return ParameterStore(
            [(p, flat[s:e].reshape(self._entries[p].shape).copy())
             for p, (s, e) in self._offsets.items()], self.config)

    def leaves(self, trainable=True):
        """Tensor views of every entry; ``trainable`` is a bool or a set of paths."""
        out = OrderedDict()
        for path, value in self._entries.items():
            flag = trainable if isinstance(trainable, bool) else path in trainable
            out[path] = Tensor(value, requires_grad=flag)
        return out

    def __call__(self, images):
        return forward(self._entries, images, self.config)

    def equals(self, other) -> bool:
        return (self.paths == other.paths
                and all(np.array_equal(self[p], other[p]) for p in self.paths))


def build_model(config: ViTConfig) -> ParameterStore:
    """Freshly initialized parameters, deterministic in ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    entries = []
    for path, shape, init in parameter_shapes(config):
        if init == "normal":
            value = _truncated_normal(rng, shape, INIT_STD)
        elif init == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        entries.append((path, value))
    return ParameterStore(entries, config)


def _p(params, key):
    value = params[key]
    return value if isinstance(value, Tensor) else Tensor(value)


def linear(params, x, layer):
    """``x @ W + b`` for ``layer``, folding in any LoRA or adapter entries."""
    y = ad.matmul(x, _p(params, f"{layer}.weight"))
    if f"{layer}.lora.down" in params:
        y = y + ad.matmul(ad.matmul(x, _p(params, f"{layer}.lora.down")),
                          _p(params, f"{layer}.lora.up"))
    y = y + _p(params, f"{layer}.bias")
    if f"{layer}.adapter.down" in params:
        hidden = ad.gelu(ad.matmul(y, _p(params, f"{layer}.adapter.down")))
        y = y + ad.matmul(hidden, _p(params, f"{layer}.adapter.up"))
    return y


def _attention(params, x, prefix, config):
    b, t, d = x.shape
    heads = config.heads
    hd = d // heads
    qkv = linear(params, x, f"{prefix}.attn.qkv")
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return linear(params, out, f"{prefix}.attn.proj")


def forward(params, images, config: ViTConfig):
    """Logits ``[b, num_classes]`` for ``[b, c, h, w]`` images.

    ``params`` maps paths to arrays or tensors; tensors flagged
    ``requires_grad`` receive gradients when run inside a tape.
    """
    images = ad.as_tensor(images)
    expect = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise DimensionError(f"images of shape {images.shape} do not match [b, *{expect}]")
    b = images.shape[0]
    x = linear(params, ad.patchify(images, config.patch_size), "patch_embed")
    cls = ad.broadcast_to(_p(params, "cls_token"), (b, 1, config.dim))
    x = ad.concat([cls, x], axis=1) + _p(params, "pos_embed")
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        h = ad.layer_norm(x, _p(params, f"{prefix}.norm1.weight"),
                          _p(params, f"{prefix}.norm1.bias"), LN_EPS)
        x = x + _attention(params, h, prefix, config)
        h = ad.layer_norm(x, _p(params, f"{prefix}.norm2.weight"),
                          _p(params, f"{prefix}.norm2.bias"), LN_EPS)
        h = ad.gelu(linear(params, h, f"{prefix}.mlp.fc1"))
        x = x + linear(params, h, f"{prefix}.mlp.fc2")
    x = ad.layer_norm(x, _p(params, "norm.weight"), _p(params, "norm.bias"), LN_EPS)
    return linear(params, x[:, 0], "head")


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(store: ParameterStore, path) -> None:
    header = {"kind": "checkpoint", "model": store.config.to_dict()}
    write_container(path, header, store.items())


def _expected_shapes(config):
    return OrderedDict((p, tuple(s)) for p, s, _ in parameter_shapes(config))


def load_checkpoint(path, expected: ViTConfig | None = None) -> ParameterStore:
    """Read a checkpoint; with ``expected``, reject any architecture mismatch."""
    header, entries = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container holds {header.get('kind')!r}, not a checkpoint")
    try:
        config = ViTConfig.from_dict(header["model"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model block in header: {exc}") from None
    store = ParameterStore(entries, config)
    base = _expected_shapes(config)
    missing = [p for p in base if p not in store or store[p].shape != base[p]]
    if missing:
        raise FormatError(f"{path}: entries inconsistent with stored config: {missing}")
    if expected is not None:
        want = _expected_shapes(expected)
        differing = sorted({p for p in want if base.get(p) != want[p]}
                           | {p for p in base if want.get(p) != base[p]})
        if differing:
            raise CheckpointMismatch(
                f"{path}: checkpoint config differs from expected; differing paths: "
                f"{', '.join(differing)}", differing)
    return store
