"""Forward pass: item embeddings, time-interval periodicity encoding, star-graph
interactivity layers and attentive multi-interest extraction.

Every function works on a batch: item ids and masks are (B, n), interval
matrices are (B, n, n) and activations are (B, n, d).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pimi import tensor as T
from pimi.config import ConfigError
from pimi.data import FixedSequence, SequenceBatch, batch_interval_matrices
from pimi.nn import AttentionParams, attend, embedding_init, multi_head_attention, uniform_init
from pimi.tensor import Tensor


class InputError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n: int = 20
    K: int = 4
    L: int = 3
    p: int = 64
    heads: int = 2
    dropout_rate: float = 0.2
    disable_periodicity: bool = False
    disable_interactivity: bool = False
    disable_central_node: bool = False

    def __post_init__(self):
        for name in ("d", "n", "K", "p", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def graph_layers(self) -> int:
        return 0 if self.disable_interactivity else self.L

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ParameterSet:
    """Named trainable arrays. Only parameters the configured variant uses are created."""

    def __init__(self, config: ModelConfig, num_items: int, tensors: dict[str, Tensor]):
        self.config = config
        self.num_items = num_items
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, num_items: int, rng: np.random.Generator) -> "ParameterSet":
        d = config.d
        t: dict[str, Tensor] = {}
        t["item_embeddings"] = embedding_init(rng, (num_items + 1, d), "item_embeddings")
        t["item_embeddings"].data[0] = 0.0
        if not config.disable_periodicity:
            t["interval_embeddings"] = embedding_init(rng, (config.p + 1, d), "interval_embeddings")
            t["W1"] = uniform_init(rng, (d, 1), d, "W1")
        for layer in range(config.graph_layers):
            # the last centre update cannot reach the item nodes, so it has no weights
            last = layer == config.graph_layers - 1
            roles = ("item",) if config.disable_central_node or last else ("item", "center")
            for role in roles:
                prefix = f"layer{layer}.{role}."
                for key, tensor in AttentionParams.init(rng, d, prefix).tensors().items():
                    t[prefix + key] = tensor
        t["W2"] = uniform_init(rng, (4 * d, d), d, "W2")
        t["W3"] = uniform_init(rng, (config.K, 4 * d), 4 * d, "W3")
        return cls(config, num_items, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def attention(self, layer: int, role: str) -> AttentionParams:
        prefix = f"layer{layer}.{role}."
        return AttentionParams(*(self.tensors[prefix + k] for k in ("wq", "wk", "wv", "wo")))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        rng = np.random.default_rng(0)
        ref = ParameterSet.init(self.config, self.num_items, rng)
        return {k: v.shape for k, v in ref.tensors.items()}

    def zero_padding_row(self) -> None:
        self.tensors["item_embeddings"].data[0] = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].data = v.copy()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class InterestMatrix:
    vectors: Tensor  # (B, K, d)
    attention: np.ndarray  # (B, K, n)


class Context:
    """Train/eval switch plus the dropout generator."""

    def __init__(self, train: bool = False, rng: np.random.Generator | None = None, rate: float = 0.0):
        self.train = train
        self.rng = rng if train else None
        self.rate = rate if train else 0.0

    def drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng)


EVAL = Context(train=False)


def _as_batch(seq) -> SequenceBatch:
    if isinstance(seq, FixedSequence):
        return SequenceBatch(seq.item_ids[None], seq.timestamps[None], seq.mask[None])
    return seq


def embed_items(item_ids: np.ndarray, mask: np.ndarray, params: ParameterSet) -> Tensor:
    table = params["item_embeddings"]
    ids = np.where(mask, item_ids, 0)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"item index out of range for {table.shape[0] - 1} items")
    return T.take_rows(table, ids)


def periodicity_encode(intervals: np.ndarray, mask: np.ndarray, params: ParameterSet, ctx: Context = EVAL) -> Tensor:
    """Time-aware attention over each item's row of interval embeddings.

    Scores are ``dot(interval_embeddings[m[a, b]], W1)``, normalised over partners b
    (padded partners get zero weight). The output row for anchor a is the
    weighted sum of its interval embeddings, computed as a histogram of
    attention mass per interval value times the embedding table.
    """
    table = params["interval_embeddings"]
    nbins = table.shape[0]
    if intervals.size and intervals.max() >= nbins:
        raise InputError(f"interval entries exceed threshold p={nbins - 1}")
    per_value = T.matmul(table, params["W1"])  # (p+1, 1)
    scores = T.reshape(T.take_rows(per_value, intervals), intervals.shape)
    a1 = T.softmax(scores, axis=-1, mask=mask[:, None, :])
    a1 = ctx.drop(a1)
    mass = T.bin_sum(a1, intervals, nbins)  # (B, n, p+1)
    return T.matmul(mass, table) * mask[..., None].astype(np.float64)


def periodicity_weights(intervals: np.ndarray, mask: np.ndarray, params: ParameterSet) -> np.ndarray:
    """Eval-mode A1 (B, n, n) for diagnostics."""
    with T.no_grad():
        per_value = T.matmul(params["interval_embeddings"], params["W1"])
        scores = T.reshape(T.take_rows(per_value, intervals), intervals.shape)
        return T.softmax(scores, axis=-1, mask=mask[:, None, :]).data


def interactivity_encode(
    e_items: Tensor,
    e_time: Tensor | None,
    mask: np.ndarray,
    params: ParameterSet,
    ctx: Context = EVAL,
    layers: int | None = None,
) -> Tensor:
    """Graph updates over the chain of item nodes plus one virtual central node.

    Each layer first updates every real item node from {predecessor, centre,
    itself, its item embedding}, all taken from the previous layer, then updates
    the centre from {centre} and the new item nodes. Padded slots stay zero and
    never appear as keys.
    """
    cfg = params.config
    L = cfg.graph_layers if layers is None else layers
    fmask = mask[..., None].astype(np.float64)
    h = e_items if e_time is None else e_items + e_time
    h = h * fmask
    if L == 0:
        return h
    B, n, d = h.shape
    use_center = not cfg.disable_central_node
    if use_center:
        counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
        c = T.tsum(h, axis=1) * (1.0 / counts)  # (B, d)
        center_keys = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    for layer in range(L):
        att = params.attention(layer, "item")
        # project each node once; shifting/broadcasting commutes with the projection
        hk, hv = T.matmul(h, att.wk), T.matmul(h, att.wv)
        ek, ev = T.matmul(e_items, att.wk), T.matmul(e_items, att.wv)
        keys = [T.shift_right(hk, axis=1), hk, ek]
        vals = [T.shift_right(hv, axis=1), hv, ev]
        if use_center:
            keys.insert(1, T.expand(T.reshape(T.matmul(c, att.wk), (B, 1, d)), (B, n, d)))
            vals.insert(1, T.expand(T.reshape(T.matmul(c, att.wv), (B, 1, d)), (B, n, d)))
        q = T.reshape(T.matmul(h, att.wq), (B, n, 1, d))
        mixed, _ = attend(q, T.stack(keys, axis=2), T.stack(vals, axis=2), cfg.heads,
                          drop_rate=ctx.rate, rng=ctx.rng)
        h_new = T.reshape(T.matmul(mixed, att.wo), (B, n, d)) * fmask
        if use_center and layer < L - 1:
            c_q = T.reshape(c, (B, 1, d))
            kv = T.concat([c_q, h_new], axis=1)  # (B, n+1, d)
            c = multi_head_attention(
                c_q, kv, kv, cfg.heads, params.attention(layer, "center"),
                key_mask=center_keys, drop_rate=ctx.rate, rng=ctx.rng,
            )
            c = T.reshape(c, (B, d))
        h = h_new
    return h


def extract_interests(h: Tensor, mask: np.ndarray, params: ParameterSet, ctx: Context = EVAL) -> InterestMatrix:
    h = ctx.drop(h)
    hidden = T.tanh(T.matmul(h, T.transpose(params["W2"])))  # (B, n, 4d)
    logits = T.swap_last(T.matmul(hidden, T.transpose(params["W3"])))  # (B, K, n)
    a2 = T.softmax(logits, axis=-1, mask=mask[:, None, :])
    return InterestMatrix(T.matmul(a2, h), a2.data)


def forward(seq, params: ParameterSet, ctx: Context = EVAL) -> InterestMatrix:
    """Full forward pass for a FixedSequence or SequenceBatch."""
    batch = _as_batch(seq)
    mask = np.asarray(batch.mask, dtype=bool)
    if mask.shape[1] != params.config.n:
        raise InputError(f"window length {mask.shape[1]} != configured n={params.config.n}")
    if not mask.any(axis=1).all():
        raise InputError("every sequence needs at least one real item")
    cfg = params.config
    e_items = embed_items(batch.item_ids, mask, params)
    e_time = None
    if not cfg.disable_periodicity:
        intervals = batch_interval_matrices(batch, cfg.p)
        e_time = periodicity_encode(intervals, mask, params, ctx)
    h = interactivity_encode(e_items, e_time, mask, params, ctx)
    return extract_interests(h, mask, params, ctx)


def infer(seq, params: ParameterSet) -> InterestMatrix:
    """Eval-mode forward without recording a graph."""
    with T.no_grad():
        return forward(seq, params, EVAL)


# checkpoints

_MAGIC = b"PIMICKPT"
_VERSION = 1


def save_checkpoint(path: str | Path, params: ParameterSet, item_ids: list[str] | None = None) -> None:
    """Header line (JSON: config, shapes, sha256) followed by raw little-endian float64 arrays."""
    names = sorted(params.tensors)
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names)
    header = {
        "version": _VERSION,
        "config": params.config.to_dict(),
        "num_items": params.num_items,
        "arrays": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "item_ids": item_ids,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, list[str] | None]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    magic, _, rest = raw.partition(b"\n")
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    head, _, payload = rest.partition(b"\n")
    try:
        header = json.loads(head)
        version = header["version"]
        config = ModelConfig(**header["config"])
        num_items = int(header["num_items"])
        arrays = header["arrays"]
        digest = header["sha256"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    tensors: dict[str, Tensor] = {}
    offset = 0
    for entry in arrays:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        chunk = payload[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        tensors[entry["name"]] = Tensor(
            np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64), requires_grad=True, name=entry["name"]
        )
        offset += 8 * count
    params = ParameterSet(config, num_items, tensors)
    check_shapes(params)
    return params, header.get("item_ids")


def check_shapes(params: ParameterSet) -> None:
    expected = params.expected_shapes()
    actual = {k: v.shape for k, v in params.tensors.items()}
    if expected != actual:
        diff = sorted(set(expected.items()) ^ set(actual.items()))
        raise CheckpointError(f"parameter shapes do not match the configuration: {diff}")
