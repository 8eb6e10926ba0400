"""Interaction log parsing, sessionization, filtering and per-user splits.

Dataset file (``dataset.json``) is a single JSON object with sorted keys::

    format       "enirec-dataset"
    version      1
    prep         preprocessing settings used to build it
    proportions  [train_hi, val_lo, val_hi, test_lo]
    items        [[raw_item_id, frequency], ...]   row k is item index k+1
    users        [raw_user_id, ...]                row k is user index k
    sessions     [[user, ordinal, start_ts, end_ts, [item, ...]], ...]
                 list position is the session id

The split is not stored; it is recomputed from ``proportions`` on load.
"""

from __future__ import annotations

import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Sequence, TextIO

import numpy as np

from .errors import ConfigError, EmptyDatasetError, FormatError, PreconditionError

log = logging.getLogger(__name__)

DATASET_FORMAT = "enirec-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Session:
    """One user's time-bounded item sequence.

    Before filtering ``user`` and ``items`` hold raw ids; afterwards they are
    dense indices (users from 0, items from 1) and ``sid`` is the position in
    the dataset's session list.
    """

    user: Hashable
    items: tuple
    start_ts: int
    ordinal: int
    end_ts: int | None = None
    sid: int = -1

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Catalog:
    item_ids: list[str]                 # item index k+1 -> raw id
    user_ids: list[str]                 # user index k -> raw id
    item_freq: np.ndarray               # length item_count + 1, slot 0 unused
    item_index: dict[str, int] = field(default_factory=dict)
    user_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.item_index:
            self.item_index = {raw: k + 1 for k, raw in enumerate(self.item_ids)}
        if not self.user_index:
            self.user_index = {raw: k for k, raw in enumerate(self.user_ids)}

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    def raw_item(self, index: int) -> str:
        return self.item_ids[index - 1]


@dataclass(frozen=True)
class SplitProportions:
    """Chronological fractions: train ``[0, train_hi)``, validation ``[val_lo, val_hi)``, test ``[test_lo, 1]``."""

    train_hi: float = 0.8
    val_lo: float = 0.7
    val_hi: float = 0.8
    test_lo: float = 0.8

    def __post_init__(self):
        vals = (self.train_hi, self.val_lo, self.val_hi, self.test_lo)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError(f"split proportions must lie in [0, 1]: {vals}")
        if not (self.val_lo <= self.val_hi <= self.test_lo and self.train_hi <= self.test_lo):
            raise ConfigError(f"inconsistent split proportions: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.train_hi, self.val_lo, self.val_hi, self.test_lo)

    @staticmethod
    def _cut(p: float, n: int) -> int:
        # Exact decimal arithmetic so that e.g. 0.7 * 10 floors to 7.
        return math.floor(Fraction(repr(p)) * n)

    def ranges(self, n: int) -> tuple[range, range, range]:
        cut = self._cut
        return (range(0, cut(self.train_hi, n)),
                range(cut(self.val_lo, n), cut(self.val_hi, n)),
                range(cut(self.test_lo, n), n))


@dataclass
class DatasetSplit:
    train: dict[int, list[Session]]
    validation: dict[int, list[Session]]
    test: dict[int, list[Session]]
    proportions: SplitProportions

    def part(self, name: str) -> dict[int, list[Session]]:
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"unknown split part {name!r}")
        return getattr(self, name)

    def sessions(self, name: str) -> list[Session]:
        part = self.part(name)
        return [s for u in sorted(part) for s in part[u]]

    def train_sessions(self) -> list[Session]:
        return self.sessions("train")


@dataclass
class PrepConfig:
    delimiter: str = "\t"
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    time_divisor: int = 1
    skip_header: bool = False
    max_malformed_frac: float = 0.01
    threshold_secs: int = 3600
    min_len: int = 2
    max_len: int = 20
    min_item_freq: int = 10


@dataclass
class Dataset:
    catalog: Catalog
    sessions: list[Session]
    split: DatasetSplit
    prep: PrepConfig = field(default_factory=PrepConfig)

    @property
    def item_count(self) -> int:
        return self.catalog.item_count

    @property
    def user_count(self) -> int:
        return self.catalog.user_count


# --------------------------------------------------------------------------- parsing

def _parse_ts(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return int(float(text))


def parse_interactions(stream: TextIO | Iterable[str], delimiter: str = "\t", *, user_col: int = 0,
                       item_col: int = 1, time_col: int = 2, time_divisor: int = 1,
                       skip_header: bool = False, max_malformed_frac: float = 0.01,
                       source: str = "<stream>") -> tuple[list[Interaction], int]:
    """Parse delimiter-separated ``user, item, timestamp`` lines.

    Returns ``(interactions, malformed_count)`` with interactions in file
    order. Raises :class:`FormatError` when more than ``max_malformed_frac``
    of the non-empty lines are malformed.
    """
    out: list[Interaction] = []
    malformed = 0
    total = 0
    first_bad = None
    need = max(user_col, item_col, time_col) + 1
    for lineno, line in enumerate(stream, start=1):
        if skip_header and lineno == 1:
            continue
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        total += 1
        fields = line.split(delimiter)
        try:
            if len(fields) < need:
                raise ValueError("missing fields")
            ts = _parse_ts(fields[time_col]) // time_divisor
            out.append(Interaction(fields[user_col].strip(), fields[item_col].strip(), ts))
        except (ValueError, OverflowError):
            malformed += 1
            if first_bad is None:
                first_bad = lineno
    if malformed:
        log.warning("%s: skipped %d malformed line(s), first at line %d", source, malformed, first_bad)
    if total and malformed / total > max_malformed_frac:
        raise FormatError(f"{source}: {malformed}/{total} malformed lines (first at line {first_bad}) "
                          f"exceeds tolerance {max_malformed_frac:.2%}")
    return out, malformed


def read_log(path: str | Path, prep: PrepConfig | None = None) -> tuple[list[Interaction], int]:
    prep = prep or PrepConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_interactions(fh, prep.delimiter, user_col=prep.user_col, item_col=prep.item_col,
                                  time_col=prep.time_col, time_divisor=prep.time_divisor,
                                  skip_header=prep.skip_header,
                                  max_malformed_frac=prep.max_malformed_frac, source=str(path))


def group_by_user(interactions: Iterable[Interaction]) -> dict[str, list[Interaction]]:
    """Per-user lists sorted by timestamp; equal timestamps keep file order."""
    users: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        users[it.user_id].append(it)
    for events in users.values():
        events.sort(key=lambda it: it.timestamp)
    return dict(users)


# --------------------------------------------------------------------------- sessions

def sessionize(interactions: Sequence[Interaction], threshold_secs: int = 3600) -> list[Session]:
    """Fixed-window sessions anchored at each session's first interaction.

    An interaction joins the open session while its timestamp is at most
    ``anchor + threshold_secs`` (inclusive).
    """
    sessions: list[Session] = []
    if not interactions:
        return sessions
    user = interactions[0].user_id
    prev_ts = None
    items: list[str] = []
    anchor = last = 0
    for it in interactions:
        if it.user_id != user:
            raise PreconditionError("sessionize expects interactions of a single user")
        if prev_ts is not None and it.timestamp < prev_ts:
            raise PreconditionError("interactions must be sorted by timestamp")
        prev_ts = it.timestamp
        if items and it.timestamp > anchor + threshold_secs:
            sessions.append(Session(user, tuple(items), anchor, len(sessions), last))
            items = []
        if not items:
            anchor = it.timestamp
        items.append(it.item_id)
        last = it.timestamp
    sessions.append(Session(user, tuple(items), anchor, len(sessions), last))
    return sessions


def filter_sessions(sessions: Iterable[Session], min_len: int = 2, max_len: int = 20,
                    min_item_freq: int = 10) -> tuple[list[Session], Catalog]:
    """Length filter, one item-frequency pass, length filter again.

    Returned sessions carry dense indices, per-user ordinals renumbered over
    the survivors, and ``sid`` equal to their list position. Sessions are
    ordered by user index then ordinal.
    """
    def length_ok(s):
        return min_len <= len(s.items) <= max_len

    stage1 = [s for s in sessions if length_ok(s)]
    freq = Counter(item for s in stage1 for item in s.items)
    stage2 = []
    for s in stage1:
        kept = tuple(i for i in s.items if freq[i] >= min_item_freq)
        if kept and min_len <= len(kept) <= max_len:
            stage2.append(replace(s, items=kept))
    if not stage2:
        raise EmptyDatasetError("no sessions survive filtering")

    # Users keep first-appearance order of the input; sessions stay chronological.
    by_user: dict[Hashable, list[Session]] = defaultdict(list)
    for s in stage2:
        by_user[s.user].append(s)
    user_ids = list(by_user)
    item_ids: list[str] = []
    item_index: dict = {}
    out: list[Session] = []
    for uidx, raw_user in enumerate(user_ids):
        ordered = sorted(by_user[raw_user], key=lambda s: (s.start_ts, s.ordinal))
        for ordinal, s in enumerate(ordered):
            idx = []
            for raw in s.items:
                if raw not in item_index:
                    item_ids.append(raw)
                    item_index[raw] = len(item_ids)
                idx.append(item_index[raw])
            out.append(Session(uidx, tuple(idx), s.start_ts, ordinal, s.end_ts, len(out)))
    item_freq = np.zeros(len(item_ids) + 1, dtype=np.int64)
    for raw, k in item_index.items():
        item_freq[k] = freq[raw]
    catalog = Catalog([str(i) for i in item_ids], [str(u) for u in user_ids], item_freq,
                      {str(raw): k for raw, k in item_index.items()})
    return out, catalog


def split_per_user(user_sessions: Sequence[Session], proportions: SplitProportions | None = None
                   ) -> tuple[list[Session], list[Session], list[Session]]:
    proportions = proportions or SplitProportions()
    tr, va, te = proportions.ranges(len(user_sessions))
    return ([user_sessions[i] for i in tr], [user_sessions[i] for i in va], [user_sessions[i] for i in te])


def build_split(sessions: Sequence[Session], proportions: SplitProportions | None = None) -> DatasetSplit:
    proportions = proportions or SplitProportions()
    by_user: dict[int, list[Session]] = defaultdict(list)
    for s in sessions:
        by_user[s.user].append(s)
    train, val, test = {}, {}, {}
    for user in sorted(by_user):
        ordered = sorted(by_user[user], key=lambda s: s.ordinal)
        tr, va, te = split_per_user(ordered, proportions)
        train[user], val[user], test[user] = tr, va, te
    return DatasetSplit(train, val, test, proportions)


def preprocess(interactions: Iterable[Interaction], prep: PrepConfig | None = None,
               proportions: SplitProportions | None = None) -> Dataset:
    prep = prep or PrepConfig()
    sessions: list[Session] = []
    for events in group_by_user(interactions).values():
        sessions.extend(sessionize(events, prep.threshold_secs))
    retained, catalog = filter_sessions(sessions, prep.min_len, prep.max_len, prep.min_item_freq)
    return Dataset(catalog, retained, build_split(retained, proportions), prep)


def dataset_stats(dataset: Dataset, short_max: int = 4) -> dict:
    """The dataset-parameter table fields plus the share of short sessions."""
    lengths = np.array([len(s.items) for s in dataset.sessions])
    users = dataset.user_count
    return {
        "user_num": users,
        "item_num": dataset.item_count,
        "session_num": int(lengths.size),
        "session_average_length": float(lengths.mean()),
        "session_num_per_user": float(lengths.size / users),
        "short_session_ratio": float(np.mean(lengths <= short_max)),
    }


def format_stats(stats: dict) -> str:
    rows = [
        ("user_num", f"{stats['user_num']:,}"),
        ("item_num", f"{stats['item_num']:,}"),
        ("session_num", f"{stats['session_num']:,}"),
        ("session_average_length", f"{stats['session_average_length']:.1f}"),
        ("session_num per user", f"{stats['session_num_per_user']:.1f}"),
        ("short_session_ratio", f"{stats['short_session_ratio']:.2%}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


# --------------------------------------------------------------------------- persistence

def dataset_to_json(dataset: Dataset) -> str:
    cat = dataset.catalog
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "prep": asdict(dataset.prep),
        "proportions": list(dataset.split.proportions.as_tuple()),
        "items": [[raw, int(cat.item_freq[k + 1])] for k, raw in enumerate(cat.item_ids)],
        "users": list(cat.user_ids),
        "sessions": [[s.user, s.ordinal, s.start_ts, s.end_ts, list(s.items)] for s in dataset.sessions],
    }
    buf = io.StringIO()
    json.dump(doc, buf, sort_keys=True, separators=(",", ":"))
    buf.write("\n")
    return buf.getvalue()


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_json(dataset), encoding="utf-8")


def load_dataset(path: str | Path, proportions: SplitProportions | None = None) -> Dataset:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not an enirec dataset file")
    if doc.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {doc.get('version')}")
    item_ids = [raw for raw, _ in doc["items"]]
    freq = np.array([0] + [f for _, f in doc["items"]], dtype=np.int64)
    catalog = Catalog(item_ids, list(doc["users"]), freq)
    sessions = [Session(u, tuple(items), start, ordinal, end, sid)
                for sid, (u, ordinal, start, end, items) in enumerate(doc["sessions"])]
    proportions = proportions or SplitProportions(*doc["proportions"])
    prep = PrepConfig(**doc["prep"])
    return Dataset(catalog, sessions, build_split(sessions, proportions), prep)
