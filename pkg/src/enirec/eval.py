"""Ranking metrics, split evaluation, popularity baseline, ablation runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError
from .ingest import Dataset
from .model import Enirec, TrainConfig, rank_of, train, with_flags

DEFAULT_KS = (5, 20)

ABLATIONS = {
    "a": {"no_longterm": True},
    "b1": {"no_topk": True},
    "b2": {"no_sample": True},
    "c": {"gru_instead_of_gafe": True},
}


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    return int(target in list(ranked[:k]))


def mrr_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    top = list(ranked[:k])
    return 1.0 / (top.index(target) + 1) if target in top else 0.0


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    count: int
    config: dict = field(default_factory=dict)
    label: str = ""

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_json(self) -> str:
        doc = {"label": self.label, "count": self.count, "metrics": self.metrics, "config": self.config}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def table_row(self, ks: Sequence[int] = DEFAULT_KS) -> str:
        cols = [f"{self.metrics[f'recall@{k}']:.4f}" for k in ks]
        cols += [f"{self.metrics[f'mrr@{k}']:.4f}" for k in ks]
        return " | ".join([self.label or "ENIREC", *cols])


def format_table(reports: Sequence[MetricsReport], ks: Sequence[int] = DEFAULT_KS) -> str:
    header = " | ".join(["model", *[f"Recall@{k}" for k in ks], *[f"MRR@{k}" for k in ks]])
    return "\n".join([header, *(r.table_row(ks) for r in reports)]) + "\n"


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        hit = ranks <= k
        out[f"recall@{k}"] = float(hit.mean())
        out[f"mrr@{k}"] = float(np.where(hit, 1.0 / ranks, 0.0).mean())
    return out


def collect_ranks(model: Enirec, part: str = "test") -> np.ndarray:
    """Rank of the true next item for every prefix of every session in ``part``."""
    model.ensure_index()
    ranks = []
    for session in model.split.sessions(part):
        L = len(session.items)
        if L < 2:
            continue
        result = model.session_pass(session, range(1, L))
        ranks.append(rank_of(result.scores, np.asarray(session.items[1:]) - 1))
    if not ranks:
        raise EmptyDatasetError(f"no evaluation instances in the {part} split")
    return np.concatenate(ranks)


def evaluate(model: Enirec, part: str = "test", ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    ranks = collect_ranks(model, part)
    return MetricsReport(metrics_from_ranks(ranks, ks), int(ranks.size), model.config.to_dict())


def popularity_ranks(dataset: Dataset, part: str = "test") -> np.ndarray:
    counts = np.zeros(dataset.item_count)
    for s in dataset.split.train_sessions():
        np.add.at(counts, np.asarray(s.items) - 1, 1.0)
    ranks = []
    for s in dataset.split.sessions(part):
        targets = np.asarray(s.items[1:]) - 1
        if targets.size:
            ranks.append(rank_of(np.tile(counts, (targets.size, 1)), targets))
    if not ranks:
        raise EmptyDatasetError(f"no evaluation instances in the {part} split")
    return np.concatenate(ranks)


def evaluate_popularity(dataset: Dataset, part: str = "test", ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    """Rank every item by its training-split frequency, ignoring the session."""
    ranks = popularity_ranks(dataset, part)
    return MetricsReport(metrics_from_ranks(ranks, ks), int(ranks.size), {}, "POP")


def ablation_config(variant: str, config: TrainConfig) -> TrainConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {sorted(ABLATIONS)}")
    return with_flags(config, **ABLATIONS[variant])


def run_ablation(variant: str, dataset: Dataset, config: TrainConfig, part: str = "test",
                 ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    cfg = ablation_config(variant, config)
    result = train(dataset, cfg)
    report = evaluate(result.model, part, ks)
    report.label = f"ENIREC-{variant}"
    return report
