"""Attention kernels and parameter initialisers built on :mod:`pimi.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pimi.config import ConfigError
from pimi.tensor import Tensor, dropout, matmul, reshape, softmax, tsum


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def embedding_init(rng: np.random.Generator, shape, name: str | None = None, scale: float = 0.05) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


@dataclass
class AttentionParams:
    """Query/key/value/output projections, each d x d, applied as ``x @ W``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, prefix: str = "") -> "AttentionParams":
        return cls(*(uniform_init(rng, (d, d), d, name=f"{prefix}{k}") for k in ("wq", "wk", "wv", "wo")))

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def _heads(x: Tensor, heads: int) -> Tensor:
    # (..., s, d) -> (..., s, heads, dh)
    *lead, s, d = x.shape
    return reshape(x, (*lead, s, heads, d // heads))


def attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    key_mask: np.ndarray | None = None,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Scaled dot-product attention on already-projected inputs.

    ``q`` is (..., q, d), ``k``/``v`` are (..., s, d). Returns the concatenated
    head outputs (..., q, d) and the attention weights (..., q, heads, s).
    """
    d = q.shape[-1]
    dh = d // heads
    qh = reshape(_heads(q, heads), (*q.shape[:-1], 1, heads, dh))  # (..., q, 1, h, dh)
    kh = reshape(_heads(k, heads), (*k.shape[:-2], 1, k.shape[-2], heads, dh))  # (..., 1, s, h, dh)
    vh = reshape(_heads(v, heads), (*v.shape[:-2], 1, v.shape[-2], heads, dh))
    scores = tsum(qh * kh, axis=-1) * (1.0 / np.sqrt(dh))  # (..., q, s, h)
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, :, None]  # (..., 1, s, 1)
    weights = softmax(scores, axis=-2, mask=mask)
    attn = weights.data
    weights = dropout(weights, drop_rate, rng)
    mixed = tsum(reshape(weights, (*weights.shape, 1)) * vh, axis=-3)  # (..., q, h, dh)
    return reshape(mixed, (*q.shape[:-1], d)), attn


def multi_head_attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    heads: int,
    params: AttentionParams,
    key_mask: np.ndarray | None = None,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Per-head projections, scaled dot-product attention, output projection.

    ``query`` is (..., q, d) and ``keys``/``values`` are (..., s, d) with matching
    leading dims. ``key_mask`` broadcasts to (..., s); masked keys receive zero
    weight. No residual connection or normalisation is applied.
    """
    d = query.shape[-1]
    if d % heads:
        raise ConfigError(f"embedding dim {d} is not divisible by heads={heads}")
    if keys.shape[-2] < 1:
        raise ConfigError("attention needs at least one key")
    mixed, attn = attend(
        matmul(query, params.wq), matmul(keys, params.wk), matmul(values, params.wv),
        heads, key_mask, drop_rate, rng,
    )
    out = matmul(mixed, params.wo)
    if return_weights:
        return out, attn
    return out
