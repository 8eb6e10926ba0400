"""Candidate sessions: assembly, embedding, similarity top-K, aggregation."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .gafe import attention_pool_batch
from .ingest import DatasetSplit, Session
from .lsis import LONG_SESSION_MIN, WINDOW, window_items
from .numerics import ParameterStore
from .recurrent import GRUBlock, gru_states_batch, lookup

SOURCES = ("history", "simuser", "sample")


@dataclass
class CandidateSet:
    history: list[int] = field(default_factory=list)
    simuser: list[int] = field(default_factory=list)
    sample: list[int] = field(default_factory=list)

    def session_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for sid in (*self.history, *self.simuser, *self.sample):
            seen.setdefault(sid, None)
        return list(seen)

    def source_of(self) -> dict[int, str]:
        tags: dict[int, str] = {}
        for name in SOURCES:
            for sid in getattr(self, name):
                tags.setdefault(sid, name)
        return tags

    def __len__(self) -> int:
        return len(self.session_ids())


@dataclass
class ScoredCandidate:
    embedding: np.ndarray   # already scaled by its similarity
    similarity: float
    source: str | None
    origin: int


# --------------------------------------------------------------------------- similar users

def user_item_matrix(split: DatasetSplit, user_count: int, item_count: int) -> sparse.csr_matrix:
    """Counts of each item in each user's training sessions."""
    rows, cols = [], []
    for user, sessions in split.train.items():
        for s in sessions:
            rows.extend([user] * len(s.items))
            cols.extend(s.items)
    data = np.ones(len(rows))
    mat = sparse.coo_matrix((data, (rows, cols)), shape=(user_count, item_count + 1))
    return mat.tocsr()


def _row_normalize(mat: sparse.csr_matrix) -> sparse.csr_matrix:
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sparse.diags(inv) @ mat


def _rank_users(sims: np.ndarray, user: int, M: int) -> list[int]:
    sims = sims.copy()
    sims[user] = -np.inf
    order = np.argsort(-sims, kind="stable")
    return [int(v) for v in order[:M] if sims[v] > 0]


def similar_users_table(split: DatasetSplit, user_count: int, item_count: int, M: int = 10,
                        chunk: int = 1024) -> list[list[int]]:
    """Top-``M`` users by cosine over training item counts, for every user.

    Users with zero similarity are never listed; ties go to the lower index.
    """
    X = _row_normalize(user_item_matrix(split, user_count, item_count))
    XT = X.T.tocsc()
    table: list[list[int]] = []
    for lo in range(0, user_count, chunk):
        block = (X[lo:lo + chunk] @ XT).toarray()
        for k in range(block.shape[0]):
            table.append(_rank_users(block[k], lo + k, M))
    return table


def find_similar_users(user: int, split: DatasetSplit, M: int = 10, *, user_count: int | None = None,
                       item_count: int | None = None) -> list[int]:
    users = set(split.train) | set(split.validation) | set(split.test)
    user_count = user_count or (max(users) + 1 if users else 0)
    item_count = item_count or max((max(s.items) for ss in split.train.values() for s in ss), default=0)
    if not 0 <= user < user_count:
        return []
    X = _row_normalize(user_item_matrix(split, user_count, item_count))
    sims = (X @ X[user].T).toarray().ravel()
    return _rank_users(sims, user, M)


# --------------------------------------------------------------------------- assembly

def _session_rng(seed: int, epoch: int, sid: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, sid + 1])


def assemble_candidates(user: int, current: Session, split: DatasetSplit, similar: Sequence[int],
                        sample_n: int, rng: np.random.Generator,
                        train_ids: np.ndarray | None = None) -> CandidateSet:
    """History, similar-user and uniformly sampled training sessions for ``current``.

    Only sessions that precede the current one are eligible from the user's
    own history (by ordinal) and from similar users (by start time); the
    sample never contains the current session or the user's later sessions.
    """
    own = split.train.get(user, [])
    history = [s.sid for s in own if s.ordinal < current.ordinal and s.sid != current.sid]
    simuser = [s.sid for v in similar if v != user for s in split.train.get(v, [])
               if s.start_ts < current.start_ts]
    cands = CandidateSet(history, simuser, [])
    if sample_n <= 0:
        return cands
    if train_ids is None:
        train_ids = np.array([s.sid for s in split.train_sessions()], dtype=np.int64)
    excluded = set(history) | set(simuser) | {current.sid}
    excluded.update(s.sid for s in own if s.ordinal >= current.ordinal)
    n_pool = len(train_ids)
    # Drawing extra then filtering keeps the sample uniform over eligible ids.
    m = min(n_pool, sample_n + len(excluded))
    if m == 0:
        return cands
    picks = train_ids[rng.choice(n_pool, size=m, replace=False)]
    cands.sample = [int(sid) for sid in picks if int(sid) not in excluded][:sample_n]
    return cands


# --------------------------------------------------------------------------- embedding

def embed_sessions(item_seqs: Sequence[Sequence[int]], block: GRUBlock, embeddings: np.ndarray,
                   use_gafe: bool = True) -> np.ndarray:
    """One interest vector per sequence (GAFE pooling or last GRU state), batched by length."""
    out = np.zeros((len(item_seqs), block.d))
    by_len: dict[int, list[int]] = defaultdict(list)
    for k, seq in enumerate(item_seqs):
        by_len[len(seq)].append(k)
    for length, idx in by_len.items():
        items = np.array([item_seqs[k] for k in idx], dtype=np.int64)
        H = gru_states_batch(lookup(items.reshape(-1), embeddings).reshape(len(idx), length, -1), block)
        out[idx] = attention_pool_batch(H) if use_gafe else H[:, -1]
    return out


def expand_session(items: Sequence[int], window: int = WINDOW, long_min: int = LONG_SESSION_MIN) -> list[tuple]:
    """Short sessions map to themselves, long ones to their sliding windows."""
    items = tuple(items)
    return window_items(items, window) if len(items) >= long_min else [items]


def embed_candidates(sessions: Sequence[Session], store: ParameterStore, use_gafe: bool = True,
                     window: int = WINDOW, long_min: int = LONG_SESSION_MIN,
                     sources: dict[int, str] | None = None) -> tuple[np.ndarray, list[tuple[int, str | None]]]:
    """Embed candidate sessions directly; returns ``(E_sim, origins)``.

    ``origins[n]`` is ``(source session id, source tag)`` for row ``n``.
    """
    seqs, origins = [], []
    for s in sessions:
        for w in expand_session(s.items, window, long_min):
            seqs.append(w)
            origins.append((s.sid, sources.get(s.sid) if sources else None))
    if not seqs:
        return np.zeros((0, store.d)), []
    E = embed_sessions(seqs, GRUBlock.from_store(store, "gru_pre"), store["item_embeddings"], use_gafe)
    return E, origins


class CandidateIndex:
    """Embeddings of every training session (windows for long ones), frozen for one epoch.

    Also holds each training session's last-GRU-state interest, which feeds
    the long-term encoder.
    """

    def __init__(self, embeddings: np.ndarray, origin: np.ndarray, starts: np.ndarray,
                 counts: np.ndarray, interests: np.ndarray, key: tuple = ()):
        self.embeddings = embeddings
        self.origin = origin
        self.starts = starts
        self.counts = counts
        self.interests = interests
        self.key = key

    @classmethod
    def build(cls, sessions: Sequence[Session], n_sessions: int, store: ParameterStore,
              use_gafe: bool = True, window: int = WINDOW, long_min: int = LONG_SESSION_MIN,
              key: tuple = ()) -> "CandidateIndex":
        block = GRUBlock.from_store(store, "gru_pre")
        emb = store["item_embeddings"]
        starts = np.zeros(n_sessions, dtype=np.int64)
        counts = np.zeros(n_sessions, dtype=np.int64)
        seqs, origin = [], []
        for s in sessions:
            parts = expand_session(s.items, window, long_min)
            starts[s.sid] = len(seqs)
            counts[s.sid] = len(parts)
            seqs.extend(parts)
            origin.extend([s.sid] * len(parts))
        E = embed_sessions(seqs, block, emb, use_gafe) if seqs else np.zeros((0, store.d))
        interests = np.zeros((n_sessions, store.d))
        if sessions:
            sids = [s.sid for s in sessions]
            interests[sids] = embed_sessions([s.items for s in sessions], block, emb, use_gafe=False)
        return cls(E, np.asarray(origin, dtype=np.int64), starts, counts, interests, key)

    def rows(self, sids: Sequence[int]) -> np.ndarray:
        sids = np.asarray(sids, dtype=np.int64)
        if sids.size == 0:
            return np.zeros(0, dtype=np.int64)
        counts = self.counts[sids]
        total = int(counts.sum())
        offsets = np.repeat(self.starts[sids] - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
        return offsets + np.arange(total)

    def matrix(self, sids: Sequence[int]) -> np.ndarray:
        return self.embeddings[self.rows(sids)]

    def save(self, path: str | Path) -> None:
        np.savez(path, embeddings=self.embeddings, origin=self.origin, starts=self.starts,
                 counts=self.counts, interests=self.interests, key=np.array(cache_key_str(self.key)))

    @classmethod
    def load(cls, path: str | Path, key: tuple | None = None) -> "CandidateIndex | None":
        """Load a cached index, or ``None`` if missing or built for a different key."""
        path = Path(path)
        if not path.exists():
            return None
        with np.load(path) as z:
            if key is not None and str(z["key"]) != cache_key_str(key):
                return None
            return cls(z["embeddings"], z["origin"], z["starts"], z["counts"], z["interests"], key or ())


def cache_key_str(key: tuple) -> str:
    return hashlib.sha256(repr(key).encode()).hexdigest()


# --------------------------------------------------------------------------- scoring

def select_top_k(sims: np.ndarray, K: int | None) -> np.ndarray:
    """Indices of the ``K`` largest similarities, ties in candidate order; ``None`` keeps all."""
    order = np.argsort(-np.asarray(sims), kind="stable")
    return order if K is None else order[:K]


def score_and_select(E_sim: np.ndarray, E_current: np.ndarray, K: int | None,
                     origins: Sequence[tuple[int, str | None]] | None = None) -> list[ScoredCandidate]:
    E_sim = np.asarray(E_sim, dtype=np.float64).reshape(-1, E_current.shape[0])
    sims = E_sim @ E_current
    out = []
    for n in select_top_k(sims, K):
        origin, source = origins[n] if origins is not None else (int(n), None)
        out.append(ScoredCandidate(sims[n] * E_sim[n], float(sims[n]), source, origin))
    return out


def aggregate(selected: Sequence[ScoredCandidate], d: int | None = None) -> np.ndarray:
    if not selected:
        if d is None:
            raise ValueError("dimension needed to aggregate an empty selection")
        return np.zeros(d)
    return np.sum([c.embedding for c in selected], axis=0)


def sim_interest(E_sim: np.ndarray, E_current: np.ndarray, K: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised select-scale-sum; returns ``(E_sim_interest, selected row indices)``."""
    if E_sim.shape[0] == 0:
        return np.zeros(E_current.shape[0]), np.zeros(0, dtype=np.int64)
    sims = E_sim @ E_current
    sel = select_top_k(sims, K)
    return sims[sel] @ E_sim[sel], sel
