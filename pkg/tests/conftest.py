from __future__ import annotations

import numpy as np
import pytest

from enirec.ingest import Catalog, Dataset, DatasetSplit, Session, SplitProportions
from enirec.model import Enirec, TrainConfig
from enirec.numerics import init_store


def make_dataset(train: dict, test: dict | None = None, validation: dict | None = None,
                 item_count: int | None = None) -> Dataset:
    """Dataset from per-user item lists; sessions get increasing timestamps."""
    test = test or {}
    validation = validation or {}
    sessions: list[Session] = []
    parts = {"train": {}, "validation": {}, "test": {}}
    users = sorted(set(train) | set(test) | set(validation))
    for u in users:
        ordinal = 0
        for name, source in (("train", train), ("test", test)):
            parts[name][u] = []
            for items in source.get(u, []):
                s = Session(u, tuple(items), 1000 * ordinal + 10 * u, ordinal, None, len(sessions))
                sessions.append(s)
                parts[name][u].append(s)
                ordinal += 1
        parts["validation"][u] = [parts["train"][u][i] for i in validation.get(u, [])]
    n_items = item_count or max(i for s in sessions for i in s.items)
    freq = np.zeros(n_items + 1, dtype=np.int64)
    for s in sessions:
        np.add.at(freq, list(s.items), 1)
    catalog = Catalog([f"i{k}" for k in range(1, n_items + 1)], [f"u{u}" for u in users], freq)
    split = DatasetSplit(parts["train"], parts["validation"], parts["test"], SplitProportions())
    return Dataset(catalog, sessions, split)


def randomize(store, scale: float = 0.5, seed: int = 1):
    rng = np.random.default_rng(seed)
    for name, value in store.params.items():
        value += scale * rng.standard_normal(value.shape)
        if name == "item_embeddings":
            value[0] = 0.0
    return store


@pytest.fixture
def toy_dataset():
    # user 0: two history sessions and a test session; user 1 shares items.
    return make_dataset(
        train={0: [[1, 2, 3], [2, 4]], 1: [[3, 4, 5, 1]]},
        test={0: [[3, 4, 5, 2]]},
        item_count=5,
    )


@pytest.fixture
def toy_model(toy_dataset):
    cfg = TrainConfig(d=4, K=2, sample_n=0, M=10, seed=3)
    store = randomize(init_store(toy_dataset.item_count, cfg.d, seed=3))
    return Enirec(store, toy_dataset, cfg)


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def record(number: int, name: str, ok: bool | None, detail: str = ""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"criterion {number} [{name}]: {status}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
