from dotenv import load_dotenv
import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

import pandas as pd

from xvocab_sandbox.agents.utils import aggregate
from xvocab_sandbox.config import ScenarioConfig, resolve_output_dir
from xvocab_sandbox.data.assets import gen_corpus
from xvocab_sandbox.errors import ConfigError, XVocabError
from xvocab_sandbox.harness import (REPORT_HEADER, SWEEP_AXES, build_corpora, build_tokenizers, run_scenario,
                                    run_seeds, sweep)

logger = logging.getLogger("run_tasks")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ScenarioConfig:
    config = ScenarioConfig.from_file(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        config = config.with_override(key, _parse_value(value))
    return config


def cmd_train_tokenizer(args) -> None:
    config = load_config(args)
    corpora = build_corpora(config)
    tokenizers = build_tokenizers(config, corpora)
    ids = [args.tokenizer] if args.tokenizer else sorted(tokenizers)
    os.makedirs(args.out_dir, exist_ok=True)
    for tid in ids:
        if tid not in tokenizers:
            raise ConfigError(f"unknown tokenizer id {tid!r}")
        path = Path(args.out_dir) / f"tokenizer_{tid}.json"
        tokenizers[tid].save(path)
        logger.info("Saved tokenizer %s (%d tokens) to %s", tid, tokenizers[tid].vocab_size, path)


def cmd_gen_corpus(args) -> None:
    config = load_config(args)
    ids = [args.corpus] if args.corpus else sorted(config.corpora)
    os.makedirs(args.out_dir, exist_ok=True)
    for cid in ids:
        if cid not in config.corpora:
            raise ConfigError(f"unknown corpus id {cid!r}")
        corpus = gen_corpus(config.corpora[cid], cid)
        path = Path(args.out_dir) / f"corpus_{cid}.json"
        corpus.save(path)
        logger.info("Saved corpus %s (%d train / %d test sentences) to %s", cid, len(corpus.train), len(corpus.test), path)


def cmd_run(args) -> None:
    config = load_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else resolve_output_dir(config)
    if args.all_seeds:
        summary = run_seeds(config, out_dir)
        print(json.dumps({"seeds": summary["seeds"], "mean": summary["mean"]}, indent=2))
    else:
        report = run_scenario(config, out_dir, seed=args.seed)
        print(json.dumps(report.aggregates, indent=2))


def cmd_sweep(args) -> None:
    config = load_config(args)
    values = [_parse_value(v) for v in args.values.split(",")]
    out_dir = Path(args.out_dir) if args.out_dir else resolve_output_dir(config)
    table = sweep(config, args.axis, values, out_dir)
    print(table.to_string(index=False))


def cmd_report(args) -> None:
    path = Path(args.run_dir) / "metrics.csv"
    if not path.exists():
        raise XVocabError(f"no metrics.csv in {args.run_dir}")
    ledger_path = Path(args.run_dir) / "rounds.csv"
    if not ledger_path.exists():
        raise XVocabError(f"no rounds.csv in {args.run_dir}")
    rows = pd.read_csv(path).merge(pd.read_csv(ledger_path), on="step").to_dict("records")
    print(REPORT_HEADER)
    print(json.dumps(aggregate(rows), indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Cross-vocabulary speculative decoding sandbox")
    parser.add_argument("--log_level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=str, required=True, help="Scenario JSON document")
        p.add_argument("--set", type=str, action="append", help="Override a config field, e.g. engine.k=4")
        return p

    p = with_config(sub.add_parser("train-tokenizer", help="Train and save the scenario's tokenizers"))
    p.add_argument("--tokenizer", type=str, default=None)
    p.add_argument("--out_dir", type=str, default="tokenizers")
    p.set_defaults(func=cmd_train_tokenizer)

    p = with_config(sub.add_parser("gen-corpus", help="Generate and save the scenario's corpora"))
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out_dir", type=str, default="corpora")
    p.set_defaults(func=cmd_gen_corpus)

    p = with_config(sub.add_parser("run", help="Run a scenario"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--all_seeds", action="store_true", help="Run every seed in the config and average")
    p.add_argument("--out_dir", type=str, default=None)
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep", help="Sweep one axis"))
    p.add_argument("--axis", type=str, required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", type=str, required=True, help="Comma separated values")
    p.add_argument("--out_dir", type=str, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="Recompute aggregates from a run directory")
    p.add_argument("--run_dir", type=str, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    start_time = datetime.now()
    logger.info("Starting %s at %s", args.command, start_time)
    try:
        args.func(args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except XVocabError as e:
        logger.error("runtime error: %s", e)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("unexpected error")
        return EXIT_RUNTIME
    logger.info("Finished %s at %s", args.command, datetime.now())
    return EXIT_OK


if __name__ == "__main__":
    load_dotenv()
    sys.exit(main())
