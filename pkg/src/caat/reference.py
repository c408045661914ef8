"""Arbitrary-precision ViT forward pass used as an independent oracle.

Values are gmpy2 ``mpfr`` objects held in numpy object arrays, so loss
differences far below float64 resolution can be measured.  This module shares
no code with the tape-based forward in :mod:`caat.vit`.
"""

from __future__ import annotations

from contextlib import contextmanager

import gmpy2
import numpy as np

DEFAULT_BITS = 192

_erf = np.frompyfunc(gmpy2.erf, 1, 1)
_exp = np.frompyfunc(gmpy2.exp, 1, 1)
_log = np.frompyfunc(gmpy2.log, 1, 1)
_sqrt = np.frompyfunc(gmpy2.sqrt, 1, 1)
_to_mp = np.frompyfunc(gmpy2.mpfr, 1, 1)


@contextmanager
def precision(bits):
    with gmpy2.context(gmpy2.get_context(), precision=bits):
        yield


def mp_array(values):
    """Exact conversion of a float64 array into mpfr objects."""
    arr = np.asarray(values, dtype=np.float64)
    return _to_mp(arr).astype(object) if arr.size else arr.astype(object)


def _layer_norm(x, gamma, beta, eps):
    d = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) / d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    return xc / _sqrt(var + gmpy2.mpfr(eps)) * gamma + beta


def _gelu(x):
    half = gmpy2.mpfr(0.5)
    return x * half * (1 + _erf(x / gmpy2.sqrt(gmpy2.mpfr(2))))


def _softmax(x):
    # no max-shift needed: mpfr exponent range is effectively unbounded
    e = _exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def logits(params, images, config, eps=1e-5):
    """Forward pass on mpfr arrays; ``params`` maps paths to mpfr arrays."""
    b = images.shape[0]
    p, d, heads = config.patch_size, config.dim, config.heads
    g = config.image_size // p
    hd = d // heads
    x = images.reshape(b, config.channels, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, g * g, config.channels * p * p)
    x = x @ params["patch_embed.weight"] + params["patch_embed.bias"]
    cls = np.broadcast_to(params["cls_token"], (b, 1, d))
    x = np.concatenate([cls, x], axis=1) + params["pos_embed"]
    t = x.shape[1]
    scale = 1 / gmpy2.sqrt(gmpy2.mpfr(hd))
    for i in range(config.depth):
        pre = f"blocks.{i}"
        h = _layer_norm(x, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"], eps)
        qkv = h @ params[f"{pre}.attn.qkv.weight"] + params[f"{pre}.attn.qkv.bias"]
        qkv = qkv.reshape(b, t, 3, heads, hd)
        heads_out = []
        for j in range(heads):
            q, k, v = qkv[:, :, 0, j], qkv[:, :, 1, j], qkv[:, :, 2, j]
            att = _softmax(q @ k.transpose(0, 2, 1) * scale)
            heads_out.append(att @ v)
        a = np.concatenate(heads_out, axis=-1)
        x = x + a @ params[f"{pre}.attn.proj.weight"] + params[f"{pre}.attn.proj.bias"]
        h = _layer_norm(x, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"], eps)
        h = _gelu(h @ params[f"{pre}.mlp.fc1.weight"] + params[f"{pre}.mlp.fc1.bias"])
        x = x + h @ params[f"{pre}.mlp.fc2.weight"] + params[f"{pre}.mlp.fc2.bias"]
    x = _layer_norm(x, params["norm.weight"], params["norm.bias"], eps)
    return x[:, 0] @ params["head.weight"] + params["head.bias"]


def cross_entropy(z, labels):
    lse = _log(_exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return (lse - picked).sum() / len(labels)


class ReferenceModel:
    """High-precision copy of a parameter store for exact loss evaluation."""

    def __init__(self, store, bits=DEFAULT_BITS):
        self.bits = bits
        self.config = store.config
        with precision(bits):
            self.params = {path: mp_array(value) for path, value in store.items()}
        self._base = {}

    def loss(self, images, labels, overrides=None):
        """Batch-mean cross-entropy; ``overrides`` maps ``(path, offset)`` to mpfr values."""
        with precision(self.bits):
            params = self.params
            if overrides:
                params = dict(params)
                for (path, offset), value in overrides.items():
                    arr = params[path].copy()
                    arr.reshape(-1)[offset] = value
                    params[path] = arr
            z = logits(params, mp_array(images), self.config)
            return cross_entropy(z, np.asarray(labels, dtype=np.int64))

    def base_loss(self, images, labels):
        """Unperturbed loss, cached per batch."""
        key = (np.asarray(images, dtype=np.float64).tobytes(),
               np.asarray(labels, dtype=np.int64).tobytes())
        if key not in self._base:
            self._base[key] = self.loss(images, labels)
        return self._base[key]

    def shifted_value(self, path, offset, delta):
        """``theta[path][offset] - delta`` evaluated exactly at this precision."""
        with precision(self.bits):
            return self.params[path].reshape(-1)[offset] - gmpy2.mpfr(delta)

