"""Synthetic interaction logs with known structure, for smoke tests and acceptance."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import Interaction

SESSION_GAP = 10_000   # seconds between sessions; well above the 3600 s window
CLICK_GAP = 60


def _emit(user: str, items: Sequence, start: int) -> list[Interaction]:
    return [Interaction(user, str(item), start + k * CLICK_GAP) for k, item in enumerate(items)]


def pattern_corpus(n_items: int = 50, n_sessions: int = 200, n_patterns: int = 10,
                   n_users: int = 20, seed: int = 0) -> list[Interaction]:
    """Sessions that replay one of ``n_patterns`` fixed item orders.

    Items are split into disjoint patterns, so every next item is a
    deterministic function of the previous one. Session ``k`` belongs to user
    ``k % n_users``, who alternates between two patterns; with the defaults
    every pattern is replayed equally often.
    """
    rng = np.random.default_rng(seed)
    items = rng.permutation(np.arange(1, n_items + 1))
    patterns = np.array_split(items, n_patterns)
    clock = [0] * n_users
    out: list[Interaction] = []
    for k in range(n_sessions):
        u = k % n_users
        favourite = (u, u + n_patterns // 2 + 1)[(k // n_users) % 2]
        p = patterns[favourite % n_patterns]
        out.extend(_emit(f"u{u}", p, clock[u]))
        clock[u] += SESSION_GAP
    return out


def topic_corpus(n_topics: int = 10, items_per_topic: int = 12, n_users: int = 30,
                 sessions_per_user: int = 12, long_frac: float = 0.4, reverse_frac: float = 0.0,
                 jump_prob: float = 0.0, noise_users: int = 0, seed: int = 0) -> list[Interaction]:
    """Users with stable topic tastes; sessions walk a topic's item cycle.

    Each topic is a cycle of ``items_per_topic`` items, i.e. a longer version
    of the fixed patterns in :func:`pattern_corpus`. A session starts at a
    random position of one of the user's two topics and follows the cycle
    for 2-4 steps, or 5-9 steps for a ``long_frac`` share of sessions.
    A ``reverse_frac`` share of users walk their cycles backwards, so the
    successor of a lone item depends on who is clicking; with probability
    ``jump_prob`` a step lands on a random item of the same topic.
    ``noise_users`` extra users click uniformly random items.
    """
    rng = np.random.default_rng(seed)
    n_items = n_topics * items_per_topic
    topics = np.arange(1, n_items + 1).reshape(n_topics, items_per_topic)
    out: list[Interaction] = []
    for u in range(n_users):
        taste = rng.choice(n_topics, size=2, replace=False)
        weights = np.array([0.75, 0.25])
        step = -1 if rng.random() < reverse_frac else 1
        for j in range(sessions_per_user):
            topic = topics[taste[rng.choice(2, p=weights)]]
            length = int(rng.integers(5, 10)) if rng.random() < long_frac else int(rng.integers(2, 5))
            pos = int(rng.integers(items_per_topic))
            seq = [topic[pos]]
            for _ in range(length - 1):
                pos = int(rng.integers(items_per_topic)) if rng.random() < jump_prob else pos + step
                seq.append(topic[pos % items_per_topic])
            out.extend(_emit(f"u{u}", seq, j * SESSION_GAP))
    for u in range(noise_users):
        for j in range(sessions_per_user):
            seq = rng.choice(np.arange(1, n_items + 1), size=int(rng.integers(2, 6)), replace=False)
            out.extend(_emit(f"n{u}", seq, j * SESSION_GAP))
    return out


def write_log(path: str | Path, interactions: Iterable[Interaction], delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            fh.write(f"{it.user_id}{delimiter}{it.item_id}{delimiter}{it.timestamp}\n")
