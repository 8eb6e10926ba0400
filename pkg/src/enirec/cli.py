"""Command-line entry point: ``enirec {prep,synth,pretrain,train,eval,ablate,recommend}``.

Run options come from an optional flat ``key = value`` file (``--config``;
lines starting with ``#`` are comments) holding any preprocessing, split or
training field, plus the paths ``dataset``, ``checkpoint`` and ``out``. Unknown keys are rejected. Command
line arguments override file values, and every command writes the resulting
effective config as ``config.txt`` next to its outputs; feeding that file
back with ``--config`` repeats the run.

Exit codes: 0 success, 2 bad usage or input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import codecs
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .errors import CatalogError, ConfigError, EnirecError, NumericError
from .eval import ABLATIONS, evaluate, evaluate_popularity, format_table, run_ablation
from .ingest import (Dataset, PrepConfig, SplitProportions, dataset_stats, format_stats, load_dataset,
                     preprocess, read_log, save_dataset)
from .model import Enirec, TrainConfig, pretrain_gru, train
from .numerics import init_store, load_checkpoint, save_checkpoint
from .synthetic import pattern_corpus, topic_corpus, write_log

log = logging.getLogger("enirec")

PATH_KEYS = ("dataset", "checkpoint", "out")
CONFIG_NAME = "config.txt"


class UsageError(EnirecError):
    pass


# --------------------------------------------------------------------------- run config

def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def _convert(key: str, raw: str, type_name: str):
    raw = raw.strip()
    optional = "None" in type_name
    if optional and raw.lower() in ("none", ""):
        return None
    base = type_name.replace("| None", "").strip()
    try:
        if base == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        return codecs.decode(raw, "unicode_escape")
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {base}") from None


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value.encode("unicode_escape").decode("ascii")
    return repr(value)


@dataclass
class RunConfig:
    prep: PrepConfig = field(default_factory=PrepConfig)
    split: SplitProportions = field(default_factory=SplitProportions)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)

    SECTIONS = ("prep", "split", "train")

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        typed = {name: _field_types(type(getattr(cls(), name))) for name in cls.SECTIONS}
        values: dict[str, dict] = {name: {} for name in cls.SECTIONS}
        paths = {}
        for key, raw in pairs.items():
            if key in PATH_KEYS:
                paths[key] = raw.strip()
                continue
            for name in cls.SECTIONS:
                if key in typed[name]:
                    values[name][key] = _convert(key, raw, typed[name][key])
                    break
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(PrepConfig(**values["prep"]), SplitProportions(**values["split"]),
                       TrainConfig(**values["train"]), paths)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def read(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        pairs: dict[str, str] = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value
        return cls.from_pairs(pairs)

    def with_overrides(self, seed: int | None = None, **paths) -> "RunConfig":
        if seed is not None:
            self.train = TrainConfig(**{**self.train.to_dict(), "seed": seed})
        for key, value in paths.items():
            if value is not None:
                self.paths[key] = str(value)
        return self

    def to_text(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"# {name}")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_render(value)}")
        if self.paths:
            lines.append("# paths")
            lines.extend(f"{k} = {self.paths[k]}" for k in PATH_KEYS if k in self.paths)
        return "\n".join(lines) + "\n"

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise UsageError(f"missing {key} path (pass it on the command line or in --config)")
        return Path(self.paths[key])


# --------------------------------------------------------------------------- helpers

def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("out")
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = cfg.path("dataset")
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path, cfg.split)


def _load_model(cfg: RunConfig, dataset: Dataset) -> Enirec:
    path = cfg.path("checkpoint")
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    store, meta = load_checkpoint(path)
    if "config" in meta:
        cfg.train = TrainConfig.from_dict(meta["config"])
    train_cfg = cfg.train
    if store["item_embeddings"].shape[0] != dataset.item_count + 1:
        raise UsageError(f"checkpoint {path} was trained on a catalog of a different size")
    model = Enirec(store, dataset, train_cfg)
    model.refresh(meta.get("best_epoch", 0))
    return model


# --------------------------------------------------------------------------- commands

def cmd_prep(cfg: RunConfig, args) -> int:
    log_path = Path(args.log)
    if not log_path.exists():
        raise UsageError(f"input log not found: {log_path}")
    interactions, malformed = read_log(log_path, cfg.prep)
    dataset = preprocess(interactions, cfg.prep, cfg.split)
    out = _out_dir(cfg)
    save_dataset(dataset, out / "dataset.json")
    stats = dataset_stats(dataset)
    stats["interactions"] = len(interactions)
    stats["malformed_lines"] = malformed
    _write_json(out / "stats.json", stats)
    (out / "stats.txt").write_text(format_stats(stats), encoding="utf-8")
    print(format_stats(stats), end="")
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    seed = cfg.train.seed
    corpus = pattern_corpus(seed=seed) if args.kind == "pattern" else topic_corpus(seed=seed)
    out = Path(args.path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_log(out, corpus)
    print(f"wrote {len(corpus)} interactions to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    tc = cfg.train
    store = init_store(dataset.item_count, tc.d, tc.seed, tc.hidden)
    losses = pretrain_gru(store, dataset.split.train_sessions(), tc)
    out = _out_dir(cfg)
    save_checkpoint(out / "pretrained.ckpt", store, {"config": tc.to_dict(), "stage": "pretrain",
                                                     "pretrain_losses": losses})
    _write_json(out / "pretrain.json", {"losses": losses})
    for epoch, value in enumerate(losses, start=1):
        print(f"pretrain epoch {epoch}: loss {value:.6f}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    tc = cfg.train
    store = None
    if args.init:
        store, _ = load_checkpoint(args.init)
    out = _out_dir(cfg)

    def report(record):
        line = f"epoch {record['epoch']}: loss {record['loss']:.6f}"
        if "validation" in record:
            line += f"  val recall@20 {record['validation']['recall@20']:.4f}"
        print(line, flush=True)

    result = train(dataset, tc, store, on_epoch=report)
    meta = {"config": tc.to_dict(), "best_epoch": result.best_epoch, "stage": "train"}
    save_checkpoint(out / "model.ckpt", result.store, meta)
    _write_json(out / "epochs.json", {"pretrain_losses": result.pretrain_losses,
                                      "epochs": result.history, "best_epoch": result.best_epoch})
    if any(dataset.split.test.values()):
        final = evaluate(result.model, "test")
        final.label = "ENIREC"
        (out / "metrics.json").write_text(final.to_json(), encoding="utf-8")
        print(format_table([final]), end="")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg, dataset)
    out = _out_dir(cfg)
    report = evaluate(model, args.part)
    report.label = "ENIREC"
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    reports = [report]
    if args.popularity:
        pop = evaluate_popularity(dataset, args.part)
        (out / "popularity.json").write_text(pop.to_json(), encoding="utf-8")
        reports.insert(0, pop)
    print(format_table(reports), end="")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}; expected one of {sorted(ABLATIONS)}")
    dataset = _load_dataset(cfg)
    out = _out_dir(cfg)
    reports = []
    if args.include_full:
        full = evaluate(train(dataset, cfg.train).model, args.part)
        full.label = "ENIREC"
        (out / "ablation_full.json").write_text(full.to_json(), encoding="utf-8")
        reports.append(full)
    for v in variants:
        report = run_ablation(v, dataset, cfg.train, args.part)
        (out / f"ablation_{v}.json").write_text(report.to_json(), encoding="utf-8")
        reports.append(report)
        print(report.table_row(), flush=True)
    (out / "ablation_table.txt").write_text(format_table(reports), encoding="utf-8")
    return 0


def cmd_recommend(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg, dataset)
    cat = dataset.catalog
    raw_items = [s.strip() for s in args.items.split(",") if s.strip()]
    if not raw_items:
        raise UsageError("--items needs at least one item id")
    try:
        items = [cat.item_index[r] for r in raw_items]
    except KeyError as exc:
        raise CatalogError(f"unknown item id {exc.args[0]!r}") from None
    user = -1
    if args.user is not None:
        user = cat.user_index.get(args.user, -1)
        if user < 0:
            log.warning("unknown user %r: recommending without history", args.user)
    recs = model.recommend(model.query_session(user, items), args.k)
    print(",".join(cat.raw_item(i) for i in recs))
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="enirec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[common], help="raw log -> dataset file + stats")
    p.add_argument("log")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic interaction log")
    p.add_argument("kind", choices=("pattern", "topic"))
    p.add_argument("path")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("pretrain", cmd_pretrain, "pretrain the session encoder"),
                                 ("train", cmd_train, "pretrain and train the full model")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("dataset", nargs="?")
        p.add_argument("--out")
        if name == "train":
            p.add_argument("--init", help="start from this checkpoint instead of a fresh init")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("dataset", nargs="?")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--out")
    p.add_argument("--part", default="test", choices=("train", "validation", "test"))
    p.add_argument("--popularity", action="store_true", help="also report the popularity ranker")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--out")
    p.add_argument("--variants", default="a,b1,b2,c")
    p.add_argument("--part", default="test", choices=("validation", "test"))
    p.add_argument("--include-full", action="store_true", help="also train the unablated model")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("recommend", parents=[common], help="top-k items for an ad-hoc session")
    p.add_argument("dataset", nargs="?")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--items", required=True, help="comma-separated raw item ids, oldest first")
    p.add_argument("--user", help="raw user id whose history to use")
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.read(args.config)
        cfg.with_overrides(args.seed, **{k: getattr(args, k, None) for k in PATH_KEYS})
        if getattr(args, "k", 1) < 1:
            raise UsageError("-k must be >= 1")
        return args.func(cfg, args)
    except NumericError as exc:
        print(f"enirec: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (EnirecError, OSError) as exc:
        msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else exc
        where = f" ({exc.filename})" if isinstance(exc, OSError) and exc.filename else ""
        print(f"enirec: {msg}{where}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
