"""The full recommender: three interest branches fused by per-branch MLPs.

Candidate embeddings and the per-session interests that feed the long-term
encoder come from a :class:`~enirec.retrieval.CandidateIndex` rebuilt from
the current parameters at the start of each epoch; they are constants for
backpropagation. Gradients still reach the current-session encoder through
the similarity weights of the selected candidates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, PreconditionError
from .gafe import attention_pool, attention_pool_backward
from .ingest import Dataset, Session
from .numerics import (Adam, ParameterStore, init_store, log_softmax, mlp_backward,
                       mlp_forward_cached)
from .recurrent import GRUBlock, gru_backward, gru_encode, long_term_encode, scatter_embedding_grad
from .retrieval import CandidateIndex, CandidateSet, _session_rng, assemble_candidates, \
    similar_users_table, sim_interest

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_longterm", "no_topk", "no_sample", "gru_instead_of_gafe")


@dataclass
class TrainConfig:
    epochs: int = 10
    pretrain_epochs: int = 1
    lr: float = 1e-3
    pretrain_lr: float | None = None
    d: int = 64
    hidden: int | None = None
    K: int = 10
    sample_n: int = 500
    M: int = 10
    window: int = 3
    long_min: int = 5
    history_max: int = 50
    batch_sessions: int = 16
    clip: float = 5.0
    seed: int = 0
    validate: bool = True
    no_longterm: bool = False
    no_topk: bool = False
    no_sample: bool = False
    gru_instead_of_gafe: bool = False

    def __post_init__(self):
        positive = ("epochs", "d", "K", "M", "window", "long_min", "history_max", "batch_sessions")
        for name in positive:
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "sample_n"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lr > 0 or (self.pretrain_lr is not None and not self.pretrain_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.window > self.long_min:
            raise ConfigError("window must not exceed the long-session threshold")

    @property
    def use_gafe(self) -> bool:
        return not self.gru_instead_of_gafe

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class PredictionContext:
    current: np.ndarray
    long_term: np.ndarray
    sim: np.ndarray
    next_item: np.ndarray
    scores: np.ndarray   # entry j scores item index j + 1


@dataclass
class PassResult:
    E_cur: np.ndarray
    E_sim: np.ndarray
    E_long: np.ndarray
    E_next: np.ndarray
    scores: np.ndarray
    losses: np.ndarray | None = None

    def context(self, row: int = -1) -> PredictionContext:
        return PredictionContext(self.E_cur[row], self.E_long, self.E_sim[row], self.E_next[row],
                                 self.scores[row])


def probability(scores: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(scores))


def loss(context_or_scores, target: int) -> float:
    """Cross-entropy ``-log softmax(scores)[target]`` for a 1-based item index."""
    scores = getattr(context_or_scores, "scores", context_or_scores)
    if not 1 <= target <= len(scores):
        raise PreconditionError(f"target item {target} outside 1..{len(scores)}")
    return float(-log_softmax(scores)[target - 1])


def top_k_positions(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` highest scores; ties go to the lower position."""
    k = min(k, len(scores))
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def rank_of(scores: np.ndarray, target_pos: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target under the same order as :func:`top_k_positions`."""
    scores = np.atleast_2d(scores)
    target_pos = np.atleast_1d(target_pos)
    s = scores[np.arange(len(target_pos)), target_pos][:, None]
    before = np.arange(scores.shape[1])[None, :] < target_pos[:, None]
    return 1 + (scores > s).sum(axis=1) + ((scores == s) & before).sum(axis=1)


class Enirec:
    """Inference and gradient computation over a parameter store and a dataset."""

    def __init__(self, store: ParameterStore, dataset: Dataset, config: TrainConfig):
        if store.d != config.d:
            raise ConfigError(f"store dimension {store.d} != config d {config.d}")
        self.store = store
        self.dataset = dataset
        self.config = config
        self.split = dataset.split
        self.train_sessions = dataset.split.train_sessions()
        self.train_ids = np.array([s.sid for s in self.train_sessions], dtype=np.int64)
        self.similar = similar_users_table(self.split, dataset.user_count, dataset.item_count, config.M)
        self.index: CandidateIndex | None = None
        self.epoch = 0
        # Seeds candidate sampling; the training loop sets it per epoch, inference uses 0.
        self.sampling_round = 0

    # ----------------------------------------------------------------- candidates

    def refresh(self, epoch: int | None = None) -> CandidateIndex:
        """Rebuild candidate embeddings from the current parameters."""
        if epoch is not None:
            self.epoch = epoch
        cfg = self.config
        self.index = CandidateIndex.build(self.train_sessions, len(self.dataset.sessions), self.store,
                                          cfg.use_gafe, cfg.window, cfg.long_min,
                                          key=(self.epoch, self.store.checksum()))
        return self.index

    def ensure_index(self) -> CandidateIndex:
        return self.index if self.index is not None else self.refresh()

    def candidates(self, current: Session) -> CandidateSet:
        cfg = self.config
        user = current.user
        similar = self.similar[user] if 0 <= user < len(self.similar) else []
        sample_n = 0 if cfg.no_sample else cfg.sample_n
        rng = _session_rng(cfg.seed, self.sampling_round, current.sid)
        return assemble_candidates(user, current, self.split, similar, sample_n, rng, self.train_ids)

    def history_sids(self, current: Session) -> list[int]:
        own = self.split.train.get(current.user, [])
        sids = [s.sid for s in own if s.ordinal < current.ordinal and s.sid != current.sid]
        return sids[-self.config.history_max:]

    # ----------------------------------------------------------------- forward / backward

    def session_pass(self, current: Session, prefix_lengths: Sequence[int],
                     targets: Sequence[int] | None = None, grad: bool = False,
                     cands: CandidateSet | None = None) -> PassResult:
        """Scores for several prefixes of one session, optionally with loss and gradients.

        ``prefix_lengths[j]`` items of ``current`` form the j-th query;
        ``targets[j]`` is its 1-based next item. With ``grad=True`` the summed
        loss gradient is accumulated into ``store.grads``.
        """
        cfg, st = self.config, self.store
        index = self.ensure_index()
        lengths = [int(t) for t in prefix_lengths]
        if not lengths or min(lengths) < 1:
            raise PreconditionError("prefix lengths must be >= 1")
        d = st.d
        emb = st["item_embeddings"]
        pre = GRUBlock.from_store(st, "gru_pre")
        trace, _ = gru_encode(current.items[:max(lengths)], pre, emb)
        P = len(lengths)

        E_cur = np.empty((P, d))
        weights = []
        for j, t in enumerate(lengths):
            if cfg.use_gafe:
                w, E_cur[j] = attention_pool(trace.H[:t])
                weights.append(w)
            else:
                E_cur[j] = trace.H[t - 1]

        cands = cands if cands is not None else self.candidates(current)
        C = index.matrix(cands.session_ids())
        K = None if cfg.no_topk else cfg.K
        E_sim = np.empty((P, d))
        selected = []
        for j in range(P):
            E_sim[j], sel = sim_interest(C, E_cur[j], K)
            selected.append(sel)

        mlp_cur, mlp_sim, mlp_his = st.mlp("mlp_cur"), st.mlp("mlp_sim"), st.mlp("mlp_his")
        out_cur, hid_cur = mlp_forward_cached(E_cur, mlp_cur)
        out_sim, hid_sim = mlp_forward_cached(E_sim, mlp_sim)
        E_next = out_cur + out_sim
        E_long = np.zeros(d)
        long_trace = None
        if not cfg.no_longterm:
            hist = index.interests[self.history_sids(current)]
            E_long, long_trace = long_term_encode(hist, GRUBlock.from_store(st, "gru_longterm"))
            out_his, hid_his = mlp_forward_cached(E_long, mlp_his)
            E_next = E_next + out_his

        scores = E_next @ emb[1:].T
        result = PassResult(E_cur, E_sim, E_long, E_next, scores)
        if targets is None:
            return result

        tpos = np.asarray(targets, dtype=np.int64) - 1
        if tpos.shape != (P,) or tpos.min() < 0 or tpos.max() >= scores.shape[1]:
            raise PreconditionError("targets must be one valid item index per prefix")
        logp = log_softmax(scores)
        result.losses = -logp[np.arange(P), tpos]
        if not grad:
            return result

        g = st.grads
        dS = np.exp(logp)
        dS[np.arange(P), tpos] -= 1.0
        dE_next = dS @ emb[1:]
        g["item_embeddings"][1:] += dS.T @ E_next
        dE_cur = mlp_backward(E_cur, hid_cur, dE_next, mlp_cur, st.mlp_grad("mlp_cur"))
        dE_sim = mlp_backward(E_sim, hid_sim, dE_next, mlp_sim, st.mlp_grad("mlp_sim"))
        if not cfg.no_longterm:
            dE_long = mlp_backward(E_long, hid_his, dE_next.sum(axis=0), mlp_his, st.mlp_grad("mlp_his"))
            if long_trace is not None:
                dH_long = np.zeros_like(long_trace.H)
                dH_long[-1] = dE_long
                gru_backward(long_trace, dH_long, GRUBlock.from_store(st, "gru_longterm"),
                             GRUBlock.grads_from_store(st, "gru_longterm"))
        for j in range(P):
            Cs = C[selected[j]]
            dE_cur[j] += Cs.T @ (Cs @ dE_sim[j])
        dH = np.zeros_like(trace.H)
        for j, t in enumerate(lengths):
            if cfg.use_gafe:
                dH[:t] += attention_pool_backward(trace.H[:t], weights[j], dE_cur[j])
            else:
                dH[t - 1] += dE_cur[j]
        dX = gru_backward(trace, dH, pre, GRUBlock.grads_from_store(st, "gru_pre"))
        scatter_embedding_grad(g["item_embeddings"], trace.items, dX)
        return result

    def session_loss(self, session: Session, grad: bool = False) -> tuple[float, int]:
        """Summed next-item loss over every prefix of a session; returns ``(loss, instances)``."""
        L = len(session.items)
        result = self.session_pass(session, range(1, L), session.items[1:], grad=grad)
        return float(result.losses.sum()), L - 1

    def forward(self, current: Session) -> PredictionContext:
        return self.session_pass(current, [len(current.items)]).context()

    def recommend(self, current: Session, k: int) -> list[int]:
        scores = self.forward(current).scores
        return [int(p) + 1 for p in top_k_positions(scores, k)]

    def query_session(self, user: int, items: Sequence[int]) -> Session:
        """A session placed after all of ``user``'s known sessions (for ad-hoc queries)."""
        return Session(user, tuple(items), start_ts=np.iinfo(np.int64).max, ordinal=np.iinfo(np.int64).max)


# --------------------------------------------------------------------------- pretraining

def pretrain_session_loss(store: ParameterStore, items: Sequence[int], grad: bool = False) -> float:
    """Predict the last item from the GRU state after the rest of the session."""
    if len(items) < 2:
        raise PreconditionError("pretraining needs sessions of length >= 2")
    emb = store["item_embeddings"]
    block = GRUBlock.from_store(store, "gru_pre")
    trace, h = gru_encode(items[:-1], block, emb)
    scores = emb[1:] @ h
    logp = log_softmax(scores)
    target = items[-1] - 1
    value = float(-logp[target])
    if grad:
        dS = np.exp(logp)
        dS[target] -= 1.0
        store.grads["item_embeddings"][1:] += np.outer(dS, h)
        dH = np.zeros_like(trace.H)
        dH[-1] = dS @ emb[1:]
        dX = gru_backward(trace, dH, block, GRUBlock.grads_from_store(store, "gru_pre"))
        scatter_embedding_grad(store.grads["item_embeddings"], trace.items, dX)
    return value


def pretrain_gru(store: ParameterStore, sessions: Sequence[Session], config: TrainConfig) -> list[float]:
    """Fit ``gru_pre`` and the item embeddings on last-item prediction; returns per-epoch mean loss."""
    if not sessions:
        raise PreconditionError("pretraining needs a non-empty training set")
    losses = []
    if config.pretrain_epochs == 0:
        return losses
    opt = Adam(store, lr=config.pretrain_lr or config.lr, clip=config.clip)
    store.zero_grad()
    for epoch in range(config.pretrain_epochs):
        order = np.random.default_rng([config.seed, 7919, epoch]).permutation(len(sessions))
        total = 0.0
        for lo in range(0, len(order), config.batch_sessions):
            batch = order[lo:lo + config.batch_sessions]
            batch_loss = sum(pretrain_session_loss(store, sessions[i].items, grad=True) for i in batch)
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite pretraining loss at epoch {epoch + 1}, batch {lo // config.batch_sessions}")
            store.scale_grads(1.0 / len(batch))
            opt.step()
            total += batch_loss
        losses.append(total / len(sessions))
        log.info("pretrain epoch %d loss %.5f", epoch + 1, losses[-1])
    return losses


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    store: ParameterStore
    model: Enirec
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    pretrain_losses: list[float] = field(default_factory=list)


def train(dataset: Dataset, config: TrainConfig, store: ParameterStore | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          stop: Callable[[Enirec, dict], bool] | None = None) -> TrainResult:
    """Pretrain, then optimise the summed next-item loss over all training prefixes.

    The returned store holds the parameters of the epoch with the best
    validation Recall@20, ties broken by MRR@20 (the last epoch when no validation sessions exist
    or ``config.validate`` is off). ``stop(model, record)`` can end training
    early after any epoch.
    """
    from .eval import evaluate  # circular at import time

    train_sessions = dataset.split.train_sessions()
    if not train_sessions:
        raise PreconditionError("training split is empty")
    if store is None:
        store = init_store(dataset.item_count, config.d, config.seed, config.hidden)
    pre_losses = pretrain_gru(store, train_sessions, config)
    model = Enirec(store, dataset, config)
    result = TrainResult(store, model, pretrain_losses=pre_losses)
    has_val = config.validate and any(dataset.split.validation.values())
    best_score, best_params = (-1.0, -1.0), None
    opt = Adam(store, lr=config.lr, clip=config.clip)
    store.zero_grad()
    for epoch in range(1, config.epochs + 1):
        model.refresh(epoch)
        model.sampling_round = epoch
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_sessions))
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, len(order), config.batch_sessions)):
            batch_loss, batch_n = 0.0, 0
            for i in order[lo:lo + config.batch_sessions]:
                l, n = model.session_loss(train_sessions[i], grad=True)
                batch_loss += l
                batch_n += n
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            store.scale_grads(1.0 / batch_n)
            opt.step()
            total += batch_loss
            count += batch_n
        model.sampling_round = 0
        record = {"epoch": epoch, "loss": total / count}
        if has_val:
            model.refresh(epoch)
            report = evaluate(model, "validation")
            record["validation"] = report.metrics
            score = (report.metrics["recall@20"], report.metrics["mrr@20"])
            if score > best_score:
                best_score = score
                best_params = store.copy()
                result.best_epoch = epoch
        else:
            result.best_epoch = epoch
        result.history.append(record)
        log.info("epoch %d %s", epoch, record)
        if on_epoch:
            on_epoch(record)
        if stop is not None and stop(model, record):
            break
    if best_params is not None and result.best_epoch != result.history[-1]["epoch"]:
        store.load_from(best_params)
    model.refresh(result.best_epoch)
    return result


def with_flags(config: TrainConfig, **flags) -> TrainConfig:
    bad = set(flags) - set(ABLATION_FLAGS)
    if bad:
        raise ConfigError(f"unknown ablation flags {sorted(bad)}")
    return replace(config, **flags)
