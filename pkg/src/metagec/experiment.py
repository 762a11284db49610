"""Experimental protocol: base pretraining, the four adaptation strategies, seed-averaged tables."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import statistics
import time
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, synth
from .bpe import MergeTable, learn_bpe
from .corpus import DomainDataset, SplitSpec, TargetSplit, Vocabulary, load_parallel, make_splits
from .evaluation import extract_edits, score_corpus
from .meta import MetaHyperparams, StepRecord, fine_tune, meta_train, multitask_train, train_epochs
from .model import ModelConfig, beam_search, init_params, loss_and_grads

log = logging.getLogger(__name__)

STRATEGIES = ("no-finetune", "finetune", "mtl-finetune", "metagec")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # or a directory of <domain>.tsv files
    data_seed: int = 1234
    general_size: int = 20000
    source_pool: int = 1200
    valid_pool: int = 1400
    test_pool: int = 650
    bpe_merges: int = 500


@dataclass
class PretrainConfig:
    seed: int = 7
    epochs: int = 4
    batch: int = 32
    lr: float = 1e-3


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=lambda: default_split())
    model: dict = field(default_factory=dict)  # ModelConfig overrides except vocab_size
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaHyperparams = field(default_factory=lambda: desk_hyperparams())
    mtl_lr: float | None = None  # defaults to meta.beta
    beam_size: int = 12
    valid_beam: int = 1
    decode_extra: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = STRATEGIES

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {STRATEGIES}")

    @property
    def mtl_rate(self) -> float:
        return self.meta.beta if self.mtl_lr is None else self.mtl_lr


def default_split() -> SplitSpec:
    return SplitSpec(
        source_domains=tuple(p.domain for p in synth.SOURCE_PROFILES),
        valid_domain=synth.VALID_PROFILE.domain,
        test_domains=tuple(p.domain for p in synth.TEST_PROFILES),
    )


def desk_hyperparams() -> MetaHyperparams:
    """Rates sized for the toy model (not the published values)."""
    return MetaHyperparams(alpha=1e-3, beta=1e-3, finetune_lr=1e-3, meta_steps=600, finetune_epochs=8, eval_every=100)


def paper_hyperparams() -> MetaHyperparams:
    return MetaHyperparams(alpha=1e-7, beta=1e-5, finetune_lr=5e-4)


# ---------------------------------------------------------------------------
# config files: INI sections [data] [split] [model] [pretrain] [meta] [experiment]

def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if like and isinstance(like[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    return value.strip()


def _apply(obj, section, name: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _coerce(value, getattr(obj, key))
    return replace(obj, **updates)


def load_config(path: str | Path | None = None, preset: str = "desk") -> ExperimentConfig:
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = ExperimentConfig(meta=desk_hyperparams() if preset == "desk" else paper_hyperparams())
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    if parser.has_section("preset"):
        raise ConfigError("use --preset, not a [preset] section")
    for name in parser.sections():
        section = parser[name]
        if name == "data":
            cfg.data = _apply(cfg.data, section, name)
        elif name == "split":
            cfg.split = _apply(cfg.split, section, name)
        elif name == "pretrain":
            cfg.pretrain = _apply(cfg.pretrain, section, name)
        elif name == "meta":
            cfg.meta = _apply(cfg.meta, section, name)
        elif name == "model":
            defaults = ModelConfig(vocab_size=1)
            for key, value in section.items():
                if key == "vocab_size" or not hasattr(defaults, key):
                    raise ConfigError(f"[model] unknown or fixed key {key!r}")
                cfg.model[key] = int(value)
        elif name == "experiment":
            for key, value in section.items():
                if key == "mtl_lr":
                    cfg.mtl_lr = float(value)
                elif key in ("beam_size", "valid_beam", "decode_extra"):
                    setattr(cfg, key, int(value))
                elif key == "seeds":
                    cfg.seeds = _coerce(value, (0,))
                elif key == "strategies":
                    cfg.strategies = _coerce(value, ("",))
                else:
                    raise ConfigError(f"[experiment] unknown key {key!r}")
            cfg.__post_init__()
        else:
            raise ConfigError(f"unknown config section [{name}]")
    return cfg


# ---------------------------------------------------------------------------
# the lab

def seeded_rng(seed: int, *labels: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *(zlib.crc32(l.encode()) for l in labels)]))


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


class Lab:
    """Holds data, vocabulary and the trained models of one experiment, caching by seed."""

    def __init__(self, config: ExperimentConfig, log_dir: str | Path | None = None):
        self.config = config
        self.log_dir = Path(log_dir) if log_dir else None
        self._base = None
        self._adapted: dict = {}
        self._splits: dict = {}
        self.consumed: dict = {}
        self._encode_cache: dict = {}
        self._load_data()

    # -- data -------------------------------------------------------------
    def _load_data(self) -> None:
        dc = self.config.data
        if dc.source == "synthetic":
            self.general = synth.synth_mixture(synth.GENERAL_PROFILES, dc.general_size, dc.data_seed)
            self.datasets = [synth.synth_domain(p, dc.source_pool, dc.data_seed) for p in synth.SOURCE_PROFILES]
            self.datasets.append(synth.synth_domain(synth.VALID_PROFILE, dc.valid_pool, dc.data_seed))
            self.datasets += [synth.synth_domain(p, dc.test_pool, dc.data_seed) for p in synth.TEST_PROFILES]
        else:
            root = Path(dc.source)
            self.general = load_parallel(root / "general.tsv")
            names = (*self.config.split.source_domains, self.config.split.valid_domain, *self.config.split.test_domains)
            self.datasets = [load_parallel(root / f"{d}.tsv") for d in names]
        corpus = [p.source for p in self.general.pairs] + [p.target for p in self.general.pairs]
        self.bpe = learn_bpe(corpus, dc.bpe_merges)
        self.vocab = Vocabulary.build(corpus, self.bpe)
        self.model_config = ModelConfig(vocab_size=len(self.vocab), **self.config.model)

    def encode_pair(self, pair):
        key = (pair.source, pair.target)
        hit = self._encode_cache.get(key)
        if hit is None:
            hit = (tuple(self.vocab.encode(pair.source)), tuple(self.vocab.encode(pair.target)))
            self._encode_cache[key] = hit
        return hit

    def grad_fn(self, params, batch):
        return loss_and_grads(params, self.model_config, [self.encode_pair(p) for p in batch])

    def splits(self, seed: int):
        if seed not in self._splits:
            self._splits[seed] = make_splits(self.datasets, self.config.split, seed)
        return self._splits[seed]

    # -- decoding and scoring ------------------------------------------------
    def correct(self, params, sentences: Sequence[Sequence[str]], beam_size: int) -> list[list[str]]:
        ids = [self.vocab.encode(s) for s in sentences]
        limits = [min(len(s) + self.config.decode_extra, self.model_config.max_len - 1) for s in ids]
        outputs = beam_search(params, self.model_config, ids, beam_size, limits)
        return [self.vocab.decode(o) for o in outputs]

    def evaluate(self, params, dataset: DomainDataset, beam_size: int | None = None) -> float:
        beam = self.config.beam_size if beam_size is None else beam_size
        sources = [p.source for p in dataset.pairs]
        hyps = self.correct(params, sources, beam)
        gold = [extract_edits(p.source, p.target) for p in dataset.pairs]
        return score_corpus(sources, hyps, gold).f

    # -- training stages ------------------------------------------------------
    def base(self):
        """The pretrained "general domain" model, trained once per lab."""
        if self._base is None:
            pc = self.config.pretrain
            rng = seeded_rng(pc.seed, "pretrain")
            params = init_params(self.model_config, rng)
            t0 = time.perf_counter()
            lines = []
            params = train_epochs(
                params, self.general.pairs, pc.epochs, pc.batch, pc.lr, rng, self.grad_fn,
                on_epoch=lambda e, loss: lines.append(f"epoch={e + 1}\tloss={loss!r}"),
            )
            log.info("pretrained base model in %.1fs", time.perf_counter() - t0)
            self._write_log("pretrain.log", lines)
            self._base = (params, rng)
        return self._base[0]

    def set_base(self, params) -> None:
        self._base = (params, None)

    def base_rng(self) -> np.random.Generator | None:
        """Generator state right after pretraining (``None`` for a loaded base)."""
        self.base()
        return self._base[1]

    def load_base(self, path: str | Path) -> None:
        ckpt = checkpoint.load(path)
        if ckpt.config != self.model_config:
            raise ConfigError(f"{path}: checkpoint model {ckpt.config} does not match this config {self.model_config}")
        self.set_base(ckpt.params)

    def _write_log(self, name: str, lines: list[str]) -> None:
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            (self.log_dir / name).write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    def _validator(self, seed: int) -> Callable:
        _, valid, _ = self.splits(seed)
        return lambda params: self.evaluate(params, valid.dev, self.config.valid_beam)

    def source_trained(self, kind: str, seed: int, n_sources: int | None = None):
        """Meta-trained ("metagec") or multi-task trained ("mtl") parameters for a seed."""
        sources, _, _ = self.splits(seed)
        n = len(sources) if n_sources is None else n_sources
        if not 1 <= n <= len(sources):
            raise ConfigError(f"requested {n} source tasks, {len(sources)} available")
        key = (kind, seed, n)
        if key not in self._adapted:
            lines = []

            def on_record(rec: StepRecord, score):
                valid = "" if score is None else f"\tvalid_f05={score!r}"
                lines.append(f"step={rec.step}\ttasks={','.join(rec.domains)}\tsupport_loss={rec.support_loss!r}\tquery_loss={rec.query_loss!r}{valid}")

            consumed: set = set()
            rng = seeded_rng(seed, "episodes", str(n))
            t0 = time.perf_counter()
            hyper = self.config.meta
            if kind == "metagec":
                params = meta_train(self.base(), sources[:n], hyper, rng, self.grad_fn, self._validator(seed), on_record, consumed)
            elif kind == "mtl":
                params = multitask_train(self.base(), sources[:n], hyper, rng, self.grad_fn, self.config.mtl_rate, self._validator(seed), on_record, consumed)
            else:
                raise ValueError(kind)
            log.info("%s seed=%d sources=%d trained in %.1fs", kind, seed, n, time.perf_counter() - t0)
            self._write_log(f"{kind}_seed{seed}_sources{n}.log", lines)
            self.consumed[key] = consumed
            self._adapted[key] = params
        return self._adapted[key]

    def adapted_params(self, strategy: str, target: TargetSplit, seed: int, n_sources: int | None = None):
        if strategy == "no-finetune":
            return self.base()
        if strategy == "finetune":
            start = self.base()
        elif strategy == "mtl-finetune":
            start = self.source_trained("mtl", seed, n_sources)
        elif strategy == "metagec":
            start = self.source_trained("metagec", seed, n_sources)
        else:
            raise ConfigError(f"unknown strategy {strategy!r}")
        rng = seeded_rng(seed, "finetune", target.domain)
        return fine_tune(start, target.train, self.config.meta, rng, self.grad_fn)

    def targets(self, seed: int) -> list[TargetSplit]:
        _, valid, tests = self.splits(seed)
        return [valid, *tests]

    def run_strategy(self, strategy: str, target: TargetSplit, seed: int, n_sources: int | None = None) -> float:
        params = self.adapted_params(strategy, target, seed, n_sources)
        return self.evaluate(params, target.test)


# ---------------------------------------------------------------------------
# tables

@dataclass
class ResultsTable:
    targets: list[str]
    strategies: list[str]
    seeds: list[int]
    scores: dict[tuple[str, str], list[float]] = field(default_factory=dict)

    def mean(self, target: str, strategy: str) -> float:
        return _mean(self.scores[(target, strategy)])

    def average(self, strategy: str) -> float:
        return _mean([self.mean(t, strategy) for t in self.targets])

    def to_json(self) -> str:
        return json.dumps({
            "targets": self.targets, "strategies": self.strategies, "seeds": self.seeds,
            "cells": [{"target": t, "strategy": s, "scores": self.scores[(t, s)]} for t in self.targets for s in self.strategies],
        }, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ResultsTable:
        raw = json.loads(text)
        table = cls(raw["targets"], raw["strategies"], raw["seeds"])
        for cell in raw["cells"]:
            table.scores[(cell["target"], cell["strategy"])] = [float(x) for x in cell["scores"]]
        return table


def run_suite(lab: Lab, seeds: Sequence[int] | None = None, strategies: Sequence[str] | None = None) -> ResultsTable:
    seeds = list(lab.config.seeds if seeds is None else seeds)
    strategies = list(lab.config.strategies if strategies is None else strategies)
    targets = [t.domain for t in lab.targets(seeds[0])]
    table = ResultsTable(targets, strategies, seeds)
    for seed in seeds:
        for target in lab.targets(seed):
            for strategy in strategies:
                t0 = time.perf_counter()
                score = lab.run_strategy(strategy, target, seed)
                log.info("seed=%d target=%s strategy=%s f05=%.4f (%.1fs)", seed, target.domain, strategy, score, time.perf_counter() - t0)
                table.scores.setdefault((target.domain, strategy), []).append(score)
        if "mtl-finetune" in strategies and "metagec" in strategies:
            n = len(lab.splits(seed)[0])
            if lab.consumed[("mtl", seed, n)] != lab.consumed[("metagec", seed, n)]:
                raise RuntimeError(f"seed {seed}: mtl and metagec consumed different source pairs")
    return table


@dataclass
class AblationTable:
    counts: list[int]
    seeds: list[int]
    scores: dict[int, list[float]] = field(default_factory=dict)  # count -> per-seed target-averaged F0.5

    def mean(self, count: int) -> float:
        return _mean(self.scores[count])

    def to_json(self) -> str:
        cells = [{"sources": c, "scores": self.scores[c]} for c in self.counts]
        return json.dumps({"counts": self.counts, "seeds": self.seeds, "cells": cells}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> AblationTable:
        raw = json.loads(text)
        table = cls([int(c) for c in raw["counts"]], raw["seeds"])
        for cell in raw["cells"]:
            table.scores[int(cell["sources"])] = [float(x) for x in cell["scores"]]
        return table


def ablate_sources(lab: Lab, counts: Sequence[int], seeds: Sequence[int] | None = None) -> AblationTable:
    """MetaGEC with the first ``c`` source tasks (in the fixed addition order) for each ``c``."""
    seeds = list(lab.config.seeds if seeds is None else seeds)
    available = len(lab.config.split.source_domains)
    for c in counts:
        if not 1 <= c <= available:
            raise ConfigError(f"source count {c} outside 1..{available}")
    counts = sorted(counts)
    table = AblationTable(counts, seeds)
    for c in counts:
        for seed in seeds:
            f = [lab.run_strategy("metagec", t, seed, c) for t in lab.targets(seed)]
            table.scores.setdefault(c, []).append(_mean(f))
            log.info("sources=%d seed=%d mean f05=%.4f", c, seed, table.scores[c][-1])
    return table


# ---------------------------------------------------------------------------
# reporting

def format_table(table: ResultsTable) -> str:
    head = ["Target Task", *table.strategies]
    rows = [[t, *(f"{100 * table.mean(t, s):.2f}" for s in table.strategies)] for t in table.targets]
    rows.append(["Average", *(f"{100 * table.average(s):.2f}" for s in table.strategies)])
    widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]

    def line(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    rule = "-" * len(line(head))
    out = [line(head), rule, *(line(r) for r in rows[:-1]), rule, line(rows[-1])]
    return "\n".join(out) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def results_csv(table: ResultsTable) -> str:
    header = ["target", "strategy", "mean_f05", "std_f05", *(f"seed_{s}" for s in table.seeds)]
    rows = []
    for t in table.targets:
        for s in table.strategies:
            vals = table.scores[(t, s)]
            std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
            rows.append([t, s, repr(table.mean(t, s)), repr(std), *(repr(v) for v in vals)])
    return _csv_text(header, rows)


def ablation_csv(table: AblationTable) -> str:
    header = ["sources", "mean_f05", *(f"seed_{s}" for s in table.seeds)]
    return _csv_text(header, [[c, repr(table.mean(c)), *(repr(v) for v in table.scores[c])] for c in table.counts])


def format_ablation(table: AblationTable) -> str:
    lines = ["sources  mean F0.5", *(f"{c:>7}  {100 * table.mean(c):9.2f}" for c in table.counts)]
    return "\n".join(lines) + "\n"


def report(table: ResultsTable | None, out_dir: str | Path, ablation: AblationTable | None = None) -> list[Path]:
    if table is None and ablation is None:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    if table is not None:
        if not table.scores:
            raise ValueError("empty results table")
        put("results.txt", format_table(table))
        put("results.csv", results_csv(table))
        put("results.json", table.to_json())
    if ablation is not None:
        put("ablation.txt", format_ablation(ablation))
        put("ablation.csv", ablation_csv(ablation))
        put("ablation.json", ablation.to_json())
    return written


def save_model(lab: Lab, params, path: str | Path, rng: np.random.Generator | None = None) -> None:
    state = None if rng is None else rng.bit_generator.state
    checkpoint.save(checkpoint.Checkpoint(lab.model_config, params, None, state), path)


def load_bpe_vocab(directory: str | Path) -> tuple[MergeTable, Vocabulary]:
    table = MergeTable.load(Path(directory) / "bpe.codes")
    return table, Vocabulary.load(Path(directory) / "vocab.txt", table)
