"""Per-interest top-N retrieval, max-over-interests aggregation and top-N metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pimi import kernels
from pimi.config import ConfigError
from pimi.data import InteractionLog, SequenceBatch, eval_cases
from pimi.model import ParameterSet, infer

log = logging.getLogger(__name__)

METRICS = ("recall", "ndcg", "hit_rate")


@dataclass
class CandidateSet:
    items: np.ndarray  # (K, N) item indices, best first
    scores: np.ndarray  # (K, N)


@dataclass
class MetricsReport:
    values: dict[int, dict[str, float]]
    users: int
    skipped: int = 0

    def flat(self) -> dict[str, float]:
        return {f"{m}@{n}": self.values[n][m] for n in sorted(self.values) for m in METRICS}

    def to_kv(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.flat().items()]
        lines += [f"users={self.users}", f"skipped={self.skipped}"]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        ns = sorted(self.values)
        head = "".join(f"{m + '@' + str(n):>14}" for n in ns for m in METRICS)
        row = "".join(f"{100 * self.values[n][m]:>14.3f}" for n in ns for m in METRICS)
        return f"{head}\n{row}\n(percent; {self.users} users, {self.skipped} skipped)\n"


def retrieve_candidates(vectors: np.ndarray, item_table: np.ndarray, topn: int) -> CandidateSet:
    """Exact inner-product top-N for each interest vector, skipping the padding row 0."""
    num_items = item_table.shape[0] - 1
    if topn > num_items:
        raise ConfigError(f"N={topn} exceeds the {num_items} items available")
    scores = np.asarray(vectors, dtype=np.float64) @ item_table[1:].T  # (K, |I|)
    idx, val = kernels.topn_rows(scores, topn, offset=1)
    return CandidateSet(idx, val)


def aggregate(candidates: CandidateSet, vectors: np.ndarray, item_table: np.ndarray, topn: int) -> tuple[np.ndarray, np.ndarray]:
    """Choose the N pool items maximising the sum over items of their best interest score.

    The objective is additive over items, so the optimum is the N pool items with
    the largest ``max_k dot(e_x, m_k)``; returned in that order (ties to the
    smaller index).
    """
    pool = np.unique(candidates.items)
    best = (item_table[pool] @ np.asarray(vectors).T).max(axis=1)
    order = np.lexsort((pool, -best))
    chosen, chosen_scores = pool[order][:topn], best[order][:topn]
    if len(chosen) < topn:
        log.warning("candidate pool has %d items for N=%d; padding from the global ranking", len(chosen), topn)
        everything = (item_table[1:] @ np.asarray(vectors).T).max(axis=1)
        ids = np.arange(1, item_table.shape[0])
        ranked = ids[np.lexsort((ids, -everything))]
        extra = [i for i in ranked if i not in set(chosen.tolist())][: topn - len(chosen)]
        chosen = np.concatenate([chosen, np.array(extra, dtype=np.int64)])
        chosen_scores = np.concatenate([chosen_scores, everything[np.array(extra, dtype=np.int64) - 1]])
    return chosen, chosen_scores


def recall_at(ranked: Sequence[int], truth: set[int]) -> float:
    return len(set(ranked) & truth) / len(truth)


def hitrate_at(ranked: Sequence[int], truth: set[int]) -> float:
    return 1.0 if set(ranked) & truth else 0.0


def ndcg_at(ranked: Sequence[int], truth: set[int]) -> float:
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(ranked) if item in truth)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(ranked), len(truth))))
    return dcg / idcg


@dataclass
class UserResult:
    user: str
    ranked: dict[int, list[int]]
    candidates: dict[int, list[list[int]]]
    ground_truth: list[int]


def evaluate(
    params: ParameterSet,
    eval_log: InteractionLog,
    topn: Iterable[int] = (20, 50),
    ratio: float = 0.8,
    batch_size: int = 256,
    dump: list[UserResult] | None = None,
) -> MetricsReport:
    """Held-out protocol: first part of each history in, rest as ground truth; macro-averaged."""
    topn = sorted(set(int(t) for t in topn))
    cases, skipped = eval_cases(eval_log, params.config.n, ratio)
    sums = {n: dict.fromkeys(METRICS, 0.0) for n in topn}
    table = params["item_embeddings"].data
    for start in range(0, len(cases), batch_size):
        chunk = cases[start : start + batch_size]
        vectors = infer(SequenceBatch.from_sequences([c.input for c in chunk]), params).vectors.data
        for case, vec in zip(chunk, vectors):
            ranked_by_n, cands_by_n = {}, {}
            for n in topn:
                cands = retrieve_candidates(vec, table, n)
                ranked, _ = aggregate(cands, vec, table, n)
                ranked = ranked.tolist()
                sums[n]["recall"] += recall_at(ranked, case.ground_truth)
                sums[n]["hit_rate"] += hitrate_at(ranked, case.ground_truth)
                sums[n]["ndcg"] += ndcg_at(ranked, case.ground_truth)
                ranked_by_n[n] = ranked
                cands_by_n[n] = cands.items.tolist()
            if dump is not None:
                dump.append(UserResult(case.user_id, ranked_by_n, cands_by_n, sorted(case.ground_truth)))
    users = len(cases)
    values = {n: {m: (sums[n][m] / users if users else 0.0) for m in METRICS} for n in topn}
    return MetricsReport(values, users, skipped)


def write_dump(results: list[UserResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "user": r.user,
                "ranked": {str(k): v for k, v in r.ranked.items()},
                "candidates": {str(k): v for k, v in r.candidates.items()},
                "ground_truth": r.ground_truth,
            }) + "\n")
