"""Hard interest selection, sampled-softmax loss and the optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from pimi import tensor as T
from pimi.config import ConfigError
from pimi.data import InteractionLog, build_training_samples
from pimi.model import Context, InterestMatrix, ModelConfig, ParameterSet, forward
from pimi.optim import AdamState, adam_step
from pimi.tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    negatives: int = 10
    max_iterations: int = 1_000_000
    eval_every: int = 1000
    patience: int = 5
    lr: float = 1e-3
    seed: int = 0
    negative_sampling: str = "uniform"
    early_stop_metric: str = "recall@50"
    topn: tuple[int, ...] = (20, 50)
    eval_ratio: float = 0.8

    def __post_init__(self):
        for name in ("batch_size", "negatives", "max_iterations", "eval_every", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.negative_sampling not in ("uniform", "popularity"):
            raise ConfigError(f"unknown negative_sampling {self.negative_sampling!r}")


@dataclass
class EvalRecord:
    iteration: int
    train_loss: float
    metrics: dict[str, float]


@dataclass
class TrainReport:
    records: list[EvalRecord] = field(default_factory=list)
    best_iteration: int = 0
    best_score: float = -math.inf
    iterations_run: int = 0
    stopped_early: bool = False
    best_params: dict[str, np.ndarray] | None = None


def select_interest(vectors: Tensor, target_emb: Tensor) -> tuple[Tensor, np.ndarray]:
    """Pick, per sample, the interest row with the largest inner product with the target.

    ``vectors`` is (B, K, d) or (K, d); ``target_emb`` is (B, d) or (d,). The
    argmax is a constant for differentiation (ties go to the smallest k); the
    gradient reaches only the chosen rows.
    """
    single = vectors.ndim == 2
    if single:
        vectors = T.reshape(vectors, (1, *vectors.shape))
        target_emb = T.reshape(target_emb, (1, -1))
    scores = np.einsum("bkd,bd->bk", vectors.data, target_emb.data)
    chosen = scores.argmax(axis=1)
    picked = T.getitem(vectors, (np.arange(vectors.shape[0]), chosen))
    if single:
        return T.reshape(picked, (picked.shape[-1],)), chosen
    return picked, chosen


class NegativeSampler:
    """Draws ``count`` distinct items per target from 1..num_items, never the target."""

    def __init__(self, num_items: int, count: int, rng: np.random.Generator,
                 popularity: np.ndarray | None = None):
        if num_items < count + 1:
            raise ConfigError(f"vocabulary of {num_items} items is too small for {count} negatives")
        self.num_items = num_items
        self.count = count
        self.rng = rng
        self.weights = None
        if popularity is not None:
            w = np.asarray(popularity, dtype=np.float64)[1:]
            if (w > 0).sum() < count + 1:
                raise ConfigError("too few items with nonzero popularity for popularity sampling")
            self.weights = w

    def sample(self, targets: np.ndarray) -> np.ndarray:
        out = np.empty((len(targets), self.count), dtype=np.int64)
        for i, target in enumerate(targets):
            if self.weights is None:
                draw = self.rng.choice(self.num_items - 1, size=self.count, replace=False) + 1
                draw[draw >= target] += 1
            else:
                w = self.weights.copy()
                w[target - 1] = 0.0
                draw = self.rng.choice(self.num_items, size=self.count, replace=False, p=w / w.sum()) + 1
            out[i] = draw
        return out


def sampled_softmax_loss(user_vec: Tensor, targets: np.ndarray, params: ParameterSet,
                         negatives: np.ndarray) -> Tensor:
    """Mean over samples of ``-log softmax`` of the target logit among {target} + negatives.

    ``user_vec`` is (B, d) (or (d,) with scalar target), ``negatives`` (B, count).
    """
    if user_vec.ndim == 1:
        user_vec = T.reshape(user_vec, (1, -1))
        targets = np.atleast_1d(targets)
        negatives = np.atleast_2d(negatives)
    targets = np.asarray(targets, dtype=np.int64)
    candidates = np.concatenate([targets[:, None], negatives], axis=1)
    emb = T.take_rows(params["item_embeddings"], candidates)  # (B, 1+neg, d)
    logits = T.reshape(T.matmul(emb, T.reshape(user_vec, (*user_vec.shape, 1))), candidates.shape)
    logp = T.log_softmax(logits, axis=-1)
    return T.neg(T.mean(logp[:, 0]))


def batch_loss(batch, targets: np.ndarray, params: ParameterSet, negatives: np.ndarray,
               ctx: Context) -> tuple[Tensor, InterestMatrix]:
    interests = forward(batch, params, ctx)
    target_emb = T.take_rows(params["item_embeddings"], targets)
    # selection uses the target embedding only as a constant score
    chosen_vec, _ = select_interest(interests.vectors, Tensor(target_emb.data))
    return sampled_softmax_loss(chosen_vec, targets, params, negatives), interests


def item_popularity(log_: InteractionLog) -> np.ndarray:
    counts = np.zeros(log_.num_items + 1, dtype=np.float64)
    for events in log_.histories.values():
        for item, _ in events:
            counts[item] += 1
    return counts


def _score(metrics: dict[str, float], key: str) -> float:
    return metrics[key]


def train(
    train_log: InteractionLog,
    valid_log: InteractionLog | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ParameterSet | None = None,
    on_record=None,
) -> tuple[ParameterSet, TrainReport]:
    """Mini-batch Adam on the sampled-softmax objective with periodic validation.

    Returns the parameters of the best validation evaluation (or the final ones
    when there is no validation log) and the report.
    """
    from pimi.retrieval import evaluate

    metric_name, _, cutoff = train_config.early_stop_metric.partition("@")
    if metric_name not in ("recall", "ndcg", "hit_rate") or not cutoff.isdigit() or int(cutoff) not in train_config.topn:
        raise ConfigError(f"early_stop_metric {train_config.early_stop_metric!r} is not among the evaluated metrics")
    samples = build_training_samples(train_log, model_config.n)
    if len(samples) == 0:
        raise ValueError("training log yields no samples (every user needs >= 2 interactions)")
    seeds = np.random.SeedSequence(train_config.seed).spawn(4)
    init_rng, order_rng, drop_rng, neg_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        params = ParameterSet.init(model_config, train_log.num_items, init_rng)
    popularity = item_popularity(train_log) if train_config.negative_sampling == "popularity" else None
    sampler = NegativeSampler(train_log.num_items, train_config.negatives, neg_rng, popularity)
    state = AdamState(lr=train_config.lr)
    ctx = Context(train=True, rng=drop_rng, rate=model_config.dropout_rate)
    report = TrainReport()
    metric_key = train_config.early_stop_metric
    bad_evals = 0
    order = order_rng.permutation(len(samples))
    cursor = 0
    running, running_count = 0.0, 0
    bs = min(train_config.batch_size, len(samples))

    for it in range(1, train_config.max_iterations + 1):
        if cursor + bs > len(order):
            order = order_rng.permutation(len(samples))
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        targets = samples.targets[idx]
        negs = sampler.sample(targets)
        loss, _ = batch_loss(samples.batch[idx], targets, params, negs, ctx)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at iteration {it}")
        T.backward(loss)
        adam_step(params.tensors, state)
        params.zero_padding_row()
        running += value
        running_count += 1
        report.iterations_run = it

        if it % train_config.eval_every == 0 or it == train_config.max_iterations:
            metrics = {}
            if valid_log is not None and valid_log.num_users:
                metrics = evaluate(params, valid_log, train_config.topn, ratio=train_config.eval_ratio).flat()
            record = EvalRecord(it, running / running_count, metrics)
            running, running_count = 0.0, 0
            report.records.append(record)
            if on_record is not None:
                on_record(record)
            log.info("iter %d loss %.5f %s", it, record.train_loss, metrics)
            if metrics:
                score = _score(metrics, metric_key)
                if score > report.best_score:
                    report.best_score = score
                    report.best_iteration = it
                    report.best_params = params.snapshot()
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= train_config.patience:
                        report.stopped_early = True
                        break

    if report.best_params is not None:
        params.restore(report.best_params)
    else:
        report.best_iteration = report.iterations_run
    return params, report
