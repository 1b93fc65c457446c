"""Interaction logs, temporal splits, popularity tables and candidate pools.

Raw ids are re-indexed densely in first-appearance order; every downstream
array is indexed by those dense ids.  A sample is one ``(history, target)``
pair cut from a user's chronological sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateSplitError, EmptyInputError, ParseError

G0, G1, UNKNOWN = 0, 1, -1


@dataclass(frozen=True)
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list
    item_ids: list

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    @classmethod
    def from_arrays(cls, users, items, timestamps, user_count=None, item_count=None):
        """Build a log from already-dense integer arrays (synthetic data, tests)."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if len(users) == 0:
            raise EmptyInputError("interaction log is empty")
        user_count = int(users.max()) + 1 if user_count is None else user_count
        item_count = int(items.max()) + 1 if item_count is None else item_count
        return cls(users, items, timestamps,
                   [str(u) for u in range(user_count)],
                   [str(i) for i in range(item_count)])


@dataclass(frozen=True)
class GroupAssignment:
    group_of: np.ndarray
    labels: tuple = ("G0", "G1")

    def counts(self):
        return int(np.sum(self.group_of == G0)), int(np.sum(self.group_of == G1))


@dataclass(frozen=True)
class Sample:
    sample_id: int
    user: int
    history: np.ndarray
    target: int
    timestamp: int


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented set of samples.

    ``history`` is left-aligned and padded with -1; ``lengths`` gives the
    number of valid entries per row.  ``sample_id`` survives ``subset`` so a
    remain-set can still be traced back to the training set.
    """

    user: np.ndarray
    history: np.ndarray
    lengths: np.ndarray
    target: np.ndarray
    timestamp: np.ndarray
    sample_id: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_id is None:
            object.__setattr__(self, "sample_id", np.arange(len(self.target), dtype=np.int64))

    def __len__(self):
        return len(self.target)

    def __getitem__(self, k) -> Sample:
        n = int(self.lengths[k])
        return Sample(int(self.sample_id[k]), int(self.user[k]), self.history[k, :n].copy(),
                      int(self.target[k]), int(self.timestamp[k]))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def subset(self, rows) -> "SampleSet":
        rows = np.asarray(rows, dtype=np.int64)
        return SampleSet(self.user[rows], self.history[rows], self.lengths[rows],
                         self.target[rows], self.timestamp[rows], self.sample_id[rows])

    def without(self, ids) -> "SampleSet":
        """Rows whose ``sample_id`` is not in ``ids``."""
        keep = ~np.isin(self.sample_id, np.asarray(list(ids), dtype=np.int64))
        return self.subset(np.flatnonzero(keep))

    def rows_of(self, ids) -> np.ndarray:
        """Row positions of the given sample ids (ids must be present)."""
        ids = np.asarray(list(ids), dtype=np.int64)
        order = np.argsort(self.sample_id, kind="stable")
        pos = np.searchsorted(self.sample_id[order], ids)
        if np.any(pos >= len(order)) or np.any(self.sample_id[order[np.minimum(pos, len(order) - 1)]] != ids):
            raise KeyError("sample id not in set")
        return order[pos]

    @classmethod
    def from_samples(cls, samples, max_history=None) -> "SampleSet":
        samples = list(samples)
        width = max_history or max((len(s.history) for s in samples), default=1)
        hist = np.full((len(samples), max(width, 1)), -1, dtype=np.int64)
        lengths = np.zeros(len(samples), dtype=np.int64)
        for k, s in enumerate(samples):
            h = np.asarray(s.history, dtype=np.int64)[-width:]
            hist[k, :len(h)] = h
            lengths[k] = len(h)
        return cls(np.array([s.user for s in samples], dtype=np.int64), hist, lengths,
                   np.array([s.target for s in samples], dtype=np.int64),
                   np.array([s.timestamp for s in samples], dtype=np.int64))

    @classmethod
    def empty(cls, width=1) -> "SampleSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, width), dtype=np.int64), z, z, z)


@dataclass(frozen=True)
class SplitDataset:
    train: SampleSet
    valid: SampleSet
    test: SampleSet
    period_boundaries: list


@dataclass(frozen=True)
class PopularityTable:
    count: np.ndarray
    v_pop: np.ndarray
    head_set: np.ndarray
    tail_set: np.ndarray

    @property
    def is_tail(self) -> np.ndarray:
        mask = np.zeros(len(self.count), dtype=bool)
        mask[self.tail_set] = True
        return mask


@dataclass(frozen=True)
class CandidateSet:
    sample_ids: np.ndarray
    seed: int
    ratio: float

    def __len__(self):
        return len(self.sample_ids)


# -- loading ---------------------------------------------------------------

def _split_line(line):
    if "\t" in line:
        return line.split("\t"), "tsv"
    if "::" in line:
        return line.split("::"), "ml1m"
    return line.split(","), "csv"


def _parse_timestamp(text, lineno):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"timestamp {text!r} is not a number", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"timestamp {text!r} is not finite", lineno)
    return int(value)


def load_interactions(path, attr_path=None):
    """Read ``user, item, timestamp[, rating]`` rows (tab or comma separated).

    MovieLens ``::`` files (``user::item::rating::timestamp``) are accepted
    too.  A first row whose timestamp does not parse is treated as a header.
    Returns ``(InteractionLog, GroupAssignment)``; users absent from the
    attribute file are ``UNKNOWN``.
    """
    user_index, item_index = {}, {}
    users, items, stamps = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields, fmt = _split_line(line)
            fields = [f.strip() for f in fields]
            if len(fields) < 3 or len(fields) > 4:
                raise ParseError(f"expected 3 or 4 fields, got {len(fields)}", lineno)
            ts_field = fields[3] if fmt == "ml1m" else fields[2]
            if fmt == "ml1m" and len(fields) != 4:
                raise ParseError("'::' rows need user::item::rating::timestamp", lineno)
            try:
                ts = _parse_timestamp(ts_field, lineno)
            except ParseError:
                if not users and lineno == 1:
                    continue  # header
                raise
            u, i = fields[0], fields[1]
            if not u or not i:
                raise ParseError("empty user or item id", lineno)
            users.append(user_index.setdefault(u, len(user_index)))
            items.append(item_index.setdefault(i, len(item_index)))
            stamps.append(ts)
    if not users:
        raise EmptyInputError(f"no interactions in {path}")
    log = InteractionLog(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                         np.array(stamps, dtype=np.int64), list(user_index), list(item_index))
    groups = load_groups(attr_path, user_index) if attr_path else \
        GroupAssignment(np.full(log.user_count, UNKNOWN, dtype=np.int64))
    return log, groups


def load_groups(path, user_index):
    """Map ``user<TAB>label`` rows onto G0/G1 (labels in sorted order)."""
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t") if "\t" in line else line.split(",")
            if len(fields) != 2:
                raise ParseError("expected user<TAB>group_label", lineno)
            raw[fields[0].strip()] = fields[1].strip()
    known = {u: lab for u, lab in raw.items() if u in user_index}
    labels = sorted(set(known.values()))
    if len(labels) > 2:
        raise ParseError(f"expected at most two group labels, got {labels}")
    group_of = np.full(len(user_index), UNKNOWN, dtype=np.int64)
    for u, lab in known.items():
        group_of[user_index[u]] = labels.index(lab)
    return GroupAssignment(group_of, tuple(labels) if len(labels) == 2 else ("G0", "G1"))


def load_item_embeddings(path, item_ids) -> np.ndarray:
    """Read ``item<TAB>v1<TAB>v2...`` rows and align them to the dense item index."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) < 3:
                raise ParseError("expected item<TAB>v1<TAB>v2...", lineno)
            try:
                vectors[fields[0]] = [float(x) for x in fields[1:]]
            except ValueError:
                raise ParseError("embedding values must be numbers", lineno) from None
    missing = [i for i in item_ids if i not in vectors]
    if missing:
        raise ParseError(f"{len(missing)} items have no embedding, e.g. {missing[0]!r}")
    out = np.array([vectors[i] for i in item_ids], dtype=float)
    if not np.all(np.isfinite(out)):
        raise ParseError("embedding values must be finite")
    return out


def write_index_map(log: InteractionLog, path):
    Path(path).write_text(json.dumps({"users": log.user_ids, "items": log.item_ids}),
                          encoding="utf-8")


def read_index_map(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data["users"], data["items"]


# -- splitting -------------------------------------------------------------

def period_boundaries(timestamps, periods):
    """Start timestamp of each period, taken as lower timestamp quantiles."""
    qs = np.arange(periods) / periods
    return [int(b) for b in np.quantile(np.asarray(timestamps), qs, method="lower")]


def temporal_split(log: InteractionLog, periods=10, train_periods=8, valid_periods=1,
                   test_periods=1, max_history=10) -> SplitDataset:
    """Cut per-user sequences into samples and route each by its target's period.

    A sample's history may reach back into earlier periods; only the target
    timestamp decides its split, so train targets strictly precede test ones.
    """
    if periods != train_periods + valid_periods + test_periods:
        raise ValueError("periods must equal train + valid + test periods")
    if len(log) == 0:
        raise EmptyInputError("interaction log is empty")
    bounds = period_boundaries(log.timestamps, periods)
    period_of = np.searchsorted(np.asarray(bounds), log.timestamps, side="right") - 1
    split_of = np.where(period_of < train_periods, 0,
                        np.where(period_of < train_periods + valid_periods, 1, 2))

    order = np.lexsort((np.arange(len(log)), log.timestamps, log.users))
    buckets = ([], [], [])
    start = 0
    users_sorted = log.users[order]
    while start < len(order):
        stop = start
        while stop < len(order) and users_sorted[stop] == users_sorted[start]:
            stop += 1
        rows = order[start:stop]
        seq = log.items[rows]
        for j in range(1, len(rows)):
            ev = rows[j]
            buckets[split_of[ev]].append(
                Sample(0, int(log.users[ev]), seq[max(0, j - max_history):j],
                       int(log.items[ev]), int(log.timestamps[ev])))
        start = stop

    names = ("train", "valid", "test")
    sets = []
    for name, bucket in zip(names, buckets):
        if not bucket:
            raise DegenerateSplitError(f"{name} split received zero samples")
        sets.append(SampleSet.from_samples(bucket, max_history))
    return SplitDataset(*sets, period_boundaries=bounds)


# -- popularity ------------------------------------------------------------

def head_size(item_count, fraction=0.2):
    return math.ceil(fraction * item_count - 1e-9)


def compute_popularity(train: SampleSet, item_count, count_mode="targets", value_mode="log",
                       head_fraction=0.2) -> PopularityTable:
    """Per-item counts, popularity values and the head/tail partition.

    ``count_mode`` is ``"targets"`` (default) or ``"occurrences"`` (targets
    plus history slots).  ``value_mode``: ``"log"`` gives ``ln(1 + count)``,
    ``"raw"`` the count, ``"normalized"`` ``count / max(count)``.
    """
    count = np.bincount(train.target, minlength=item_count).astype(np.int64)
    if count_mode == "occurrences":
        hist = train.history[train.history >= 0]
        count = count + np.bincount(hist, minlength=item_count)
    elif count_mode != "targets":
        raise ValueError(f"unknown count_mode {count_mode!r}")

    if value_mode == "log":
        v_pop = np.log1p(count.astype(float))
    elif value_mode == "raw":
        v_pop = count.astype(float)
    elif value_mode == "normalized":
        v_pop = count / max(int(count.max()), 1)
    else:
        raise ValueError(f"unknown value_mode {value_mode!r}")

    order = np.lexsort((np.arange(item_count), -count))
    h = head_size(item_count, head_fraction)
    return PopularityTable(count, v_pop, np.sort(order[:h]), np.sort(order[h:]))


def sample_candidates(train: SampleSet, ratio, seed) -> CandidateSet:
    if not 0 < ratio <= 1:
        raise ValueError(f"candidate ratio must be in (0, 1], got {ratio}")
    n = len(train)
    size = math.ceil(ratio * n - 1e-9)
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=size, replace=False)
    return CandidateSet(np.sort(train.sample_id[picked]), seed, ratio)
