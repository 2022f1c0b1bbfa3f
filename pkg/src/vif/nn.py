"""Small layer helpers shared by the backbone and the attender."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, gelu, layer_norm, masked_softmax, matmul, reshape, transpose


def normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    return layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def init_ln(params: dict, prefix: str, d: int):
    params[prefix + ".g"] = ones(d, prefix + ".g")
    params[prefix + ".b"] = zeros(d, prefix + ".b")


def init_mha(params: dict, prefix: str, d: int, rng, std: float | None = None, out_std: float | None = None):
    """Projections drawn with ``std`` (default 1/sqrt(d)); ``out_std`` overrides the output projection."""
    std = 1.0 / math.sqrt(d) if std is None else std
    for w in ("q", "k", "v"):
        params[f"{prefix}.w{w}"] = normal(rng, (d, d), std, f"{prefix}.w{w}")
        params[f"{prefix}.b{w}"] = zeros(d, f"{prefix}.b{w}")
    params[f"{prefix}.wo"] = normal(rng, (d, d), std if out_std is None else out_std, f"{prefix}.wo")
    params[f"{prefix}.bo"] = zeros(d, f"{prefix}.bo")


def init_ffn(params: dict, prefix: str, d: int, hidden: int, rng, std: float | None = None, out_std: float | None = None):
    std = 1.0 / math.sqrt(d) if std is None else std
    params[prefix + ".w1"] = normal(rng, (d, hidden), std, prefix + ".w1")
    params[prefix + ".b1"] = zeros(hidden, prefix + ".b1")
    params[prefix + ".w2"] = normal(rng, (hidden, d), std if out_std is None else out_std, prefix + ".w2")
    params[prefix + ".b2"] = zeros(d, prefix + ".b2")


def ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = gelu(linear(x, params[prefix + ".w1"], params[prefix + ".b1"]))
    return linear(h, params[prefix + ".w2"], params[prefix + ".b2"])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return transpose(reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def attention_probs(xq: Tensor, xkv: Tensor, params: dict, prefix: str, n_heads: int, mask) -> Tensor:
    """Row-stochastic attention probabilities [B, H, Tq, Tk]."""
    q = split_heads(linear(xq, params[prefix + ".wq"], params[prefix + ".bq"]), n_heads)
    k = split_heads(linear(xkv, params[prefix + ".wk"], params[prefix + ".bk"]), n_heads)
    dh = q.shape[-1]
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(dh))
    if mask is None:
        mask = np.ones(scores.shape[-2:], dtype=bool)
    return masked_softmax(scores, mask)


def attend(probs: Tensor, xkv: Tensor, params: dict, prefix: str, n_heads: int) -> Tensor:
    """Aggregate values with ``probs`` and apply the output projection."""
    v = split_heads(linear(xkv, params[prefix + ".wv"], params[prefix + ".bv"]), n_heads)
    return linear(merge_heads(matmul(probs, v)), params[prefix + ".wo"], params[prefix + ".bo"])


def mha(xq: Tensor, xkv: Tensor, params: dict, prefix: str, n_heads: int, mask=None) -> Tensor:
    return attend(attention_probs(xq, xkv, params, prefix, n_heads, mask), xkv, params, prefix, n_heads)
