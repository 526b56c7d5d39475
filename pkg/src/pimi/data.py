"""Interaction logs: CSV ingestion, min-count filtering, user splits, windowing,
time-interval matrices, held-out evaluation cases and a synthetic generator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from pimi import kernels
from pimi.config import ConfigError

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
PAD_TIMESTAMP = -1
CSV_HEADER = ["user_id", "item_id", "timestamp"]


class InputError(ValueError):
    pass


@dataclass
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionLog:
    """Per-user, time-ascending ``(item_index, timestamp)`` lists plus the item vocabulary.

    Index 0 is reserved for padding, so real items are numbered from 1.
    """

    histories: dict[str, list[tuple[int, int]]]
    item_ids: list[str]  # item_ids[index - 1] is the external id of item ``index``
    dropped: int = 0

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.histories)

    @property
    def num_interactions(self) -> int:
        return sum(len(h) for h in self.histories.values())

    def vocab(self) -> dict[str, int]:
        return {item: i + 1 for i, item in enumerate(self.item_ids)}

    def subset(self, users: Sequence[str]) -> "InteractionLog":
        return InteractionLog({u: list(self.histories[u]) for u in users}, list(self.item_ids))


@dataclass
class FixedSequence:
    item_ids: np.ndarray  # (n,) int64, 0 = padding
    timestamps: np.ndarray  # (n,) int64, PAD_TIMESTAMP on padding
    mask: np.ndarray  # (n,) bool

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    def items(self) -> list[int]:
        return [int(i) for i in self.item_ids[self.mask]]


@dataclass
class IntervalMatrix:
    entries: np.ndarray  # (n, n) int64
    p: int


@dataclass
class TrainingSample:
    input: FixedSequence
    target_item: int


@dataclass
class EvalCase:
    input: FixedSequence
    ground_truth: set[int]
    user_id: str = ""


@dataclass
class SequenceBatch:
    item_ids: np.ndarray  # (B, n)
    timestamps: np.ndarray  # (B, n)
    mask: np.ndarray  # (B, n) bool

    @classmethod
    def from_sequences(cls, seqs: Sequence[FixedSequence]) -> "SequenceBatch":
        return cls(
            np.stack([s.item_ids for s in seqs]),
            np.stack([s.timestamps for s in seqs]),
            np.stack([s.mask for s in seqs]),
        )

    def __len__(self) -> int:
        return self.item_ids.shape[0]

    def __getitem__(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.item_ids[idx], self.timestamps[idx], self.mask[idx])


# ingestion


def _parse_timestamp(raw: str) -> int | None:
    try:
        ts = int(raw.strip())
    except ValueError:
        return None
    return ts if ts >= 0 else None


def ingest(path: str | Path) -> InteractionLog:
    """Read a ``user_id,item_id,timestamp`` CSV. Rows with bad timestamps are dropped."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    histories: dict[str, list[tuple[int, int]]] = {}
    vocab: dict[str, int] = {}
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise InputError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{reader.line_num}: expected 3 fields, got {len(row)}")
            user, item, raw_ts = row[0].strip(), row[1].strip(), row[2]
            ts = _parse_timestamp(raw_ts)
            if ts is None or not user or not item:
                dropped += 1
                continue
            index = vocab.setdefault(item, len(vocab) + 1)
            histories.setdefault(user, []).append((index, ts))
    for events in histories.values():
        events.sort(key=lambda e: e[1])  # stable: ties keep file order
    if dropped:
        log.info("%s: dropped %d rows with illegal timestamps", path, dropped)
    return InteractionLog(histories, list(vocab), dropped)


def write_csv(log_: InteractionLog, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for user, events in log_.histories.items():
            for item, ts in events:
                w.writerow([user, log_.item_ids[item - 1], ts])


def write_vocab(item_ids: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, item in enumerate(item_ids, start=1):
            fh.write(f"{item}\t{i}\n")


def read_vocab(path: str | Path) -> list[str]:
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected item_id<TAB>index")
            pairs.append((int(parts[1]), parts[0]))
    pairs.sort()
    if [i for i, _ in pairs] != list(range(1, len(pairs) + 1)):
        raise InputError(f"{path}: indices are not dense 1..{len(pairs)}")
    return [item for _, item in pairs]


def remap(log_: InteractionLog, item_ids: Sequence[str]) -> InteractionLog:
    """Re-express ``log_`` in another vocabulary; unknown items are dropped."""
    target = {item: i + 1 for i, item in enumerate(item_ids)}
    histories = {}
    dropped = 0
    for user, events in log_.histories.items():
        kept = []
        for item, ts in events:
            new = target.get(log_.item_ids[item - 1])
            if new is None:
                dropped += 1
            else:
                kept.append((new, ts))
        if kept:
            histories[user] = kept
    return InteractionLog(histories, list(item_ids), log_.dropped + dropped)


# preprocessing


def filter_min_count(log_: InteractionLog, min_count: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``min_count`` interactions, repeated to a fixpoint."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    histories = {u: list(h) for u, h in log_.histories.items()}
    while True:
        counts: dict[int, int] = {}
        for events in histories.values():
            for item, _ in events:
                counts[item] = counts.get(item, 0) + 1
        changed = False
        for user in list(histories):
            events = histories[user]
            kept = [e for e in events if counts[e[0]] >= min_count]
            if len(kept) != len(events):
                changed = True
            if len(kept) < min_count:
                del histories[user]
                changed = True
            else:
                histories[user] = kept
        if not changed:
            break
    used = sorted({item for events in histories.values() for item, _ in events})
    reindex = {old: new for new, old in enumerate(used, start=1)}
    histories = {u: [(reindex[i], t) for i, t in events] for u, events in histories.items()}
    return InteractionLog(histories, [log_.item_ids[old - 1] for old in used], log_.dropped)


def split_users(
    log_: InteractionLog, ratios: Sequence[float] = (8, 1, 1), seed: int = 0
) -> tuple[InteractionLog, InteractionLog, InteractionLog]:
    """Seeded shuffle of users into train/valid/test. All parts share ``log_``'s vocabulary."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    users = sorted(log_.histories)
    if len(users) < 3:
        raise InputError(f"need at least 3 users to split, got {len(users)}")
    total = float(sum(ratios))
    n_valid = max(1, round(len(users) * ratios[1] / total))
    n_test = max(1, round(len(users) * ratios[2] / total))
    n_train = len(users) - n_valid - n_test
    if n_train < 1:
        n_train, n_valid, n_test = 1, 1, len(users) - 2
    order = np.random.default_rng(seed).permutation(len(users))
    shuffled = [users[i] for i in order]
    parts = (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )
    return tuple(log_.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


# windowing


def fixed_sequence(events: Sequence[tuple[int, int]], n: int) -> FixedSequence:
    """Keep the most recent ``n`` events and left-pad to length ``n``."""
    if n < 1:
        raise ConfigError("window length n must be >= 1")
    tail = list(events)[-n:]
    items = np.zeros(n, dtype=np.int64)
    stamps = np.full(n, PAD_TIMESTAMP, dtype=np.int64)
    if tail:
        items[n - len(tail) :] = [e[0] for e in tail]
        stamps[n - len(tail) :] = [e[1] for e in tail]
    return FixedSequence(items, stamps, items != 0)


def iter_training_samples(log_: InteractionLog, n: int) -> Iterator[TrainingSample]:
    """One sample per history position k >= 1: the window ending at k predicts item k+1."""
    if n < 1:
        raise ConfigError("window length n must be >= 1")
    for user in log_.histories:
        events = log_.histories[user]
        for k in range(1, len(events)):
            yield TrainingSample(fixed_sequence(events[max(0, k - n) : k], n), events[k][0])


@dataclass
class SampleArrays:
    """Stacked training samples, the form the training loop consumes."""

    batch: SequenceBatch
    targets: np.ndarray

    def __len__(self) -> int:
        return self.targets.shape[0]


def build_training_samples(log_: InteractionLog, n: int) -> SampleArrays:
    samples = list(iter_training_samples(log_, n))
    if not samples:
        empty = np.zeros((0, n), dtype=np.int64)
        return SampleArrays(SequenceBatch(empty, empty.copy(), empty.astype(bool)), np.zeros(0, dtype=np.int64))
    return SampleArrays(
        SequenceBatch.from_sequences([s.input for s in samples]),
        np.array([s.target_item for s in samples], dtype=np.int64),
    )


def interval_matrix(seq: FixedSequence, p: int) -> IntervalMatrix:
    """Pairwise clamped day counts; any pair touching a padded slot is set to ``p``."""
    if p < 1:
        raise ConfigError("interval threshold p must be >= 1")
    entries = kernels.interval_matrices(seq.timestamps[None, :], seq.mask[None, :], p)[0]
    return IntervalMatrix(entries, p)


def batch_interval_matrices(batch: SequenceBatch, p: int) -> np.ndarray:
    if p < 1:
        raise ConfigError("interval threshold p must be >= 1")
    return kernels.interval_matrices(batch.timestamps, batch.mask, p)


def eval_split(events: Sequence[tuple[int, int]], n: int, ratio: float = 0.8) -> EvalCase | None:
    """First ``ceil(ratio * len)`` events (last ``n`` of them) as input, the rest as ground truth.

    Returns None when the remainder is empty.
    """
    frac = Fraction(str(ratio))
    cut = math.ceil(frac * len(events))
    rest = events[cut:]
    if not rest or cut == 0:
        return None
    return EvalCase(fixed_sequence(events[:cut], n), {item for item, _ in rest})


def eval_cases(log_: InteractionLog, n: int, ratio: float = 0.8) -> tuple[list[EvalCase], int]:
    cases, skipped = [], 0
    for user in log_.histories:
        case = eval_split(log_.histories[user], n, ratio)
        if case is None:
            skipped += 1
            continue
        case.user_id = user
        cases.append(case)
    return cases, skipped


# synthetic data


@dataclass
class SynthConfig:
    users: int = 300
    clusters: int = 4
    items_per_cluster: int = 50
    period_days: list[float] = field(default_factory=lambda: [3.0, 14.0, 60.0, 180.0])
    events_per_user: int = 40
    jitter_days: float = 1.0
    clusters_per_user: int = 2
    groups_per_cluster: int = 5
    seed: int = 0
    start_timestamp: int = 1_500_000_000

    def validate(self) -> None:
        if self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if self.users < 1 or self.items_per_cluster < 1 or self.events_per_user < 1:
            raise ConfigError("users, items_per_cluster and events_per_user must be >= 1")
        if len(self.period_days) != self.clusters:
            raise ConfigError(f"period_days has {len(self.period_days)} entries for {self.clusters} clusters")
        if any(p <= 0 for p in self.period_days):
            raise ConfigError("period_days must be positive")
        if not 1 <= self.clusters_per_user <= self.clusters:
            raise ConfigError("clusters_per_user must be in [1, clusters]")
        if not 1 <= self.groups_per_cluster <= self.items_per_cluster:
            raise ConfigError("groups_per_cluster must be in [1, items_per_cluster]")
        if self.jitter_days < 0:
            raise ConfigError("jitter_days must be >= 0")

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthConfig":
        from pimi.config import parse_kv_file

        return cls.from_mapping(parse_kv_file(path))

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "SynthConfig":
        cfg = cls()
        for key, value in raw.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown synthetic config key {key!r}")
            if key == "period_days":
                cfg.period_days = [float(v) for v in value.replace(",", " ").split()]
            else:
                setattr(cfg, key, type(getattr(cfg, key))(value))
        cfg.validate()
        return cfg


@dataclass
class SyntheticData:
    log: InteractionLog
    item_cluster: dict[str, int]  # external item id -> cluster
    item_group: dict[str, int]  # external item id -> group within its cluster
    user_clusters: dict[str, list[int]]


def generate_synthetic(config: SynthConfig, seed: int | None = None) -> SyntheticData:
    """Users with several planted interests, each recurring on its own period.

    Every user draws ``clusters_per_user`` clusters and one item group inside each.
    Each event picks one of the user's clusters uniformly and arrives
    ``period + jitter`` days after the previous event, so the gap preceding an
    event reflects the period of its interest.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    per_group = config.items_per_cluster // config.groups_per_cluster
    item_ids: list[str] = []
    item_cluster: dict[str, int] = {}
    item_group: dict[str, int] = {}
    groups: list[list[list[int]]] = []  # cluster -> group -> item indices
    for c in range(config.clusters):
        cluster_groups: list[list[int]] = [[] for _ in range(config.groups_per_cluster)]
        for j in range(config.items_per_cluster):
            item = f"c{c}_i{j:03d}"
            item_ids.append(item)
            g = min(j // per_group, config.groups_per_cluster - 1)
            item_cluster[item] = c
            item_group[item] = g
            cluster_groups[g].append(len(item_ids))
        groups.append(cluster_groups)

    histories: dict[str, list[tuple[int, int]]] = {}
    user_clusters: dict[str, list[int]] = {}
    width = len(str(config.users))
    for u in range(config.users):
        user = f"u{u:0{width}d}"
        chosen = sorted(rng.choice(config.clusters, size=config.clusters_per_user, replace=False).tolist())
        picked = {c: groups[c][int(rng.integers(config.groups_per_cluster))] for c in chosen}
        t = float(config.start_timestamp) + rng.uniform(0, 365) * SECONDS_PER_DAY
        events = []
        for _ in range(config.events_per_user):
            c = chosen[int(rng.integers(len(chosen)))]
            gap = config.period_days[c] + rng.uniform(-config.jitter_days, config.jitter_days)
            t += max(gap, 0.0) * SECONDS_PER_DAY
            pool = picked[c]
            events.append((pool[int(rng.integers(len(pool)))], int(t)))
        histories[user] = events
        user_clusters[user] = chosen
    return SyntheticData(InteractionLog(histories, item_ids), item_cluster, item_group, user_clusters)


def write_labels(data: SyntheticData, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("item_id\tcluster\tgroup\n")
        for item in data.log.item_ids:
            fh.write(f"{item}\t{data.item_cluster[item]}\t{data.item_group[item]}\n")
