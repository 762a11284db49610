"""``metagec`` command line.

Every subcommand writes its results under ``--out``; progress and timings go
to stderr only, so output files depend on nothing but the config and seed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import synth
from .corpus import load_parallel, write_parallel
from .evaluation import extract_edits, read_gold, score_corpus
from .experiment import (
    STRATEGIES, AblationTable, ConfigError, Lab, ResultsTable, ablate_sources, format_ablation,
    format_table, load_config, report, run_suite, save_model,
)

log = logging.getLogger("metagec")


def _lab(args) -> Lab:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    lab = Lab(cfg, args.out)
    base = getattr(args, "base", None)
    if base:
        lab.load_base(base)
    return lab


def _seed(args, lab: Lab) -> int:
    return lab.config.seeds[0] if args.seed is None else args.seed


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config, args.preset)
    dc = cfg.data
    if dc.source != "synthetic":
        raise ConfigError("gen-data needs [data] source = synthetic")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_parallel(synth.synth_mixture(synth.GENERAL_PROFILES, dc.general_size, dc.data_seed), out / "general.tsv")
    plan = [(p, dc.source_pool) for p in synth.SOURCE_PROFILES] + [(synth.VALID_PROFILE, dc.valid_pool)]
    plan += [(p, dc.test_pool) for p in synth.TEST_PROFILES]
    for profile, n in plan:
        write_parallel(synth.synth_domain(profile, n, dc.data_seed), out / f"{profile.domain}.tsv")


def cmd_pretrain(args) -> None:
    lab = _lab(args)
    out = Path(args.out)
    params = lab.base()
    save_model(lab, params, out / "base.ckpt", lab.base_rng())
    lab.bpe.save(out / "bpe.codes")
    lab.vocab.save(out / "vocab.txt")


def cmd_meta_train(args) -> None:
    lab = _lab(args)
    seed = _seed(args, lab)
    kind = "mtl" if args.method == "mtl" else "metagec"
    n = args.sources or len(lab.config.split.source_domains)
    params = lab.source_trained(kind, seed, n)
    save_model(lab, params, Path(args.out) / f"{kind}_seed{seed}_sources{n}.ckpt")
    ids = sorted(lab.consumed[(kind, seed, n)])
    _write(Path(args.out), f"{kind}_seed{seed}_sources{n}.consumed", "".join(i + "\n" for i in ids))


def cmd_finetune(args) -> None:
    lab = _lab(args)
    seed = _seed(args, lab)
    by_name = {t.domain: t for t in lab.targets(seed)}
    if args.target not in by_name:
        raise ConfigError(f"unknown target {args.target!r}; choose from {sorted(by_name)}")
    target = by_name[args.target]
    params = lab.adapted_params(args.strategy, target, seed, args.sources)
    out = Path(args.out)
    stem = f"{args.strategy}_{target.domain}_seed{seed}"
    save_model(lab, params, out / f"{stem}.ckpt")
    sources = [p.source for p in target.test.pairs]
    hyps = lab.correct(params, sources, lab.config.beam_size)
    _write(out, f"{stem}.hyp", "".join(" ".join(h) + "\n" for h in hyps))
    gold = [extract_edits(p.source, p.target) for p in target.test.pairs]
    rep = score_corpus(sources, hyps, gold)
    _write(out, f"{stem}.score", _score_text(rep))


def _score_text(rep) -> str:
    return f"tp={rep.tp}\tfp={rep.fp}\tfn={rep.fn}\tprecision={rep.precision!r}\trecall={rep.recall!r}\tf05={rep.f!r}\n"


def _lines(path: str) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def cmd_score(args) -> None:
    sources, hyps = _lines(args.source), _lines(args.hyp)
    if args.gold:
        gold = read_gold(args.gold, len(sources))
    else:
        refs = _lines(args.reference)
        if len(refs) != len(sources):
            raise ValueError(f"{len(refs)} references for {len(sources)} sources")
        gold = [extract_edits(s, r) for s, r in zip(sources, refs)]
    text = _score_text(score_corpus(sources, hyps, gold))
    if args.out:
        _write(Path(args.out), "score.txt", text)
    else:
        sys.stdout.write(text)


def cmd_run_suite(args) -> None:
    lab = _lab(args)
    table = run_suite(lab)
    report(table, args.out)
    sys.stdout.write(format_table(table))


def cmd_ablate_sources(args) -> None:
    lab = _lab(args)
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    table = ablate_sources(lab, counts)
    report(None, args.out, table)
    sys.stdout.write(format_ablation(table))


def cmd_report(args) -> None:
    table = ResultsTable.from_json(Path(args.results).read_text(encoding="utf-8")) if args.results else None
    ablation = AblationTable.from_json(Path(args.ablation).read_text(encoding="utf-8")) if args.ablation else None
    report(table, args.out, ablation)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults: built-in preset)")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk", help="hyperparameter preset the config overrides")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="metagec", description="Meta-learned domain adaptation for grammatical error correction.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "write the synthetic domain corpora as TSV files")
    add("pretrain", cmd_pretrain, "train the general-domain base model")
    p = add("meta-train", cmd_meta_train, "train on the source domains (metagec or the multi-task baseline)")
    p.add_argument("--method", choices=("metagec", "mtl"), default="metagec")
    p.add_argument("--sources", type=int, help="use the first N source domains")
    p.add_argument("--base", help="base checkpoint from `pretrain` (otherwise pretrained here)")
    p = add("finetune", cmd_finetune, "adapt to one target domain and score its test split")
    p.add_argument("--target", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="metagec")
    p.add_argument("--sources", type=int)
    p.add_argument("--base")
    p = add("run-suite", cmd_run_suite, "every strategy on every target for every seed")
    p.add_argument("--base")
    p = add("ablate-sources", cmd_ablate_sources, "metagec with the first N source domains")
    p.add_argument("--counts", default="5,6,7,8,9", help="comma-separated source counts")
    p.add_argument("--base")
    p = add("score", cmd_score, "MaxMatch F0.5 of hypotheses against gold edits or references")
    p.add_argument("--source", required=True, help="tokenized source sentences, one per line")
    p.add_argument("--hyp", required=True, help="system outputs, one per line")
    gold = p.add_mutually_exclusive_group(required=True)
    gold.add_argument("--gold", help="gold edit file (index, start, end, tokens)")
    gold.add_argument("--reference", help="corrected sentences; gold edits are extracted")
    p.set_defaults(out=None)
    p = add("report", cmd_report, "re-render tables from saved JSON results")
    p.add_argument("--results")
    p.add_argument("--ablation")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if args.command == "report" and not (args.results or args.ablation):
        parser.error("report needs --results and/or --ablation")
    t0 = time.perf_counter()
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"metagec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
