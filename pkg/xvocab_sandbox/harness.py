import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from xvocab_sandbox.agents.adapt import (AdaptHooks, AdaptState, FrozenHooks, adapt_step, head_items,
                                         pretrain_head, save_bundle)
from xvocab_sandbox.agents.spd_agent import SpdAgent
from xvocab_sandbox.agents.utils import (FLOAT_FORMAT, aggregate, ledger_frame, mean_reports, rows_frame, sample_row,
                                         switch_response)
from xvocab_sandbox.config import ModelSpec, ScenarioConfig, resolve_output_dir
from xvocab_sandbox.data.assets import Corpus, gen_corpus, tokenizer_training_texts
from xvocab_sandbox.env.env import DecodingEnv
from xvocab_sandbox.env.lm_oracles import TabularLM
from xvocab_sandbox.env.ngram_cache import ngram_histogram
from xvocab_sandbox.env.tokenizer import Tokenizer, train_bpe
from xvocab_sandbox.errors import ConfigError

logger = logging.getLogger(__name__)

REPORT_HEADER = ("Speedups use the abstract cost model of the engine config; they are comparable across "
                 "runs in direction only, never in magnitude with wall-clock measurements. Aggregate "
                 "speedup and acceleration pool every decoding round of the run.")

SWEEP_AXES = {
    "k": "engine.k",
    "gamma": "engine.stopping_threshold",
    "lambda": "adapt.ngram_lambda",
    "lambda_mode": "adapt.lambda_mode",
    "cache_policy": "cache.policy",
    "cache_capacity": "cache.capacity",
    "variant": None,
}

VARIANTS = {
    "spd_dm": {"engine.mode": "cross_vocab_dm", "adapt.mode": "none"},
    "spd_dm_pp": {"engine.mode": "cross_vocab_ngram", "adapt.mode": "none"},
    "l_dm": {"engine.mode": "cross_vocab_ngram", "adapt.mode": "distill_only", "adapt.ngram_lambda": 0.0},
    "l_dm_ngram": {"engine.mode": "cross_vocab_ngram", "adapt.mode": "distill_only"},
}


@dataclass
class RunReport:
    name: str
    seed: int
    rows: List[Dict] = field(default_factory=list)
    aggregates: Dict = field(default_factory=dict)
    cache_trajectory: List[Dict] = field(default_factory=list)
    histogram: Dict[int, int] = field(default_factory=dict)
    switches: List[Dict] = field(default_factory=list)
    test_aggregates: Dict = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    head_losses: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "header": REPORT_HEADER,
            "name": self.name,
            "seed": self.seed,
            "aggregates": self.aggregates,
            "test_aggregates": self.test_aggregates,
            "cache_trajectory": self.cache_trajectory,
            "switches": self.switches,
            "head_losses": self.head_losses,
            "config": self.config,
        }


### Session assembly ###
def build_corpora(config: ScenarioConfig) -> Dict[str, Corpus]:
    return {cid: gen_corpus(spec, cid) for cid, spec in sorted(config.corpora.items())}


def scenario_alphabet(corpora: Dict[str, Corpus]) -> str:
    return "".join(sorted(set("".join(c.symbols() for c in corpora.values()))))


def build_tokenizers(config: ScenarioConfig, corpora: Dict[str, Corpus]) -> Dict[str, Tokenizer]:
    alphabet = scenario_alphabet(corpora)
    tokenizers = {}
    for tid, spec in sorted(config.tokenizers.items()):
        texts = tokenizer_training_texts([corpora[c] for c in spec.corpora], spec.num_train_samples, alphabet)
        tokenizers[tid] = train_bpe(texts, spec.num_merges)
        logger.info("trained tokenizer %s: vocabulary %d", tid, tokenizers[tid].vocab_size)
    return tokenizers


def build_model(spec: ModelSpec, tokenizer: Tokenizer, corpora: Dict[str, Corpus], temperature: float,
                space: str) -> TabularLM:
    temperature = spec.temperature or temperature
    if spec.init == "fit" and spec.fit_corpora:
        sequences = [tokenizer.tokenize(s) for cid in spec.fit_corpora for s in corpora[cid].train[:spec.fit_samples]]
        return TabularLM.fit_counts(sequences, tokenizer.vocab_size, spec.order, temperature, spec.smoothing,
                                    spec.embed_dim, spec.seed, space)
    return TabularLM(tokenizer.vocab_size, spec.order, temperature, spec.embed_dim, spec.seed, space)


@dataclass
class Assets:
    corpora: Dict[str, Corpus]
    tokenizers: Dict[str, Tokenizer]
    targets: Dict[str, TabularLM]
    drafter: TabularLM


def build_assets(config: ScenarioConfig) -> Assets:
    corpora = build_corpora(config)
    tokenizers = build_tokenizers(config, corpora)
    temperature = config.engine.temperature
    targets = {tid: build_model(spec.model, tokenizers[spec.tokenizer], corpora, temperature, "target")
               for tid, spec in sorted(config.targets.items())}
    drafter = build_model(config.drafter, tokenizers[config.drafter_tokenizer], corpora, temperature, "draft")
    return Assets(corpora, tokenizers, targets, drafter)


def _make_env(config: ScenarioConfig, assets: Assets, tasks: List[Dict]) -> DecodingEnv:
    target_spec = config.targets[config.initial_target]
    return DecodingEnv(
        tasks=tasks,
        target=assets.targets[config.initial_target],
        tok_q=assets.tokenizers[config.drafter_tokenizer],
        tok_p=assets.tokenizers[target_spec.tokenizer],
        cache_config=config.cache,
        target_id=config.initial_target,
        tokenizer_id=target_spec.tokenizer,
    )


def _decode_frozen(agent: SpdAgent, env: DecodingEnv, state: Optional[AdaptState], num: int):
    rows, items = [], []
    for i in range(num):
        hooks = FrozenHooks(state) if state is not None else None
        result = agent.act(env, i, hooks=hooks)
        rows.append(sample_row(i, result.metrics, agent.config.cost_model, len(env.cache) if env.cache else 0))
        if hooks is not None:
            items.extend(hooks.items)
    return rows, items


### Scenario ###
def run_scenario(config: ScenarioConfig, out_dir=None, seed: Optional[int] = None,
                 assets: Optional[Assets] = None) -> RunReport:
    """
    Streams the scenario's samples through speculative decoding with optional online adaptation.

    Switch events apply before the sample at their step is decoded. Per-sample rows, the round
    trace, the cache and a checkpoint bundle are written under `out_dir`; a runtime error flushes
    what was produced so far and is re-raised.

    Parameters:
    - config (ScenarioConfig): the scenario document.
    - out_dir (str or Path): artifact directory; defaults to the config's resolved output dir.
    - seed (int): overrides `config.seed`.
    - assets (Assets): prebuilt corpora, tokenizers and models (rebuilt from the config if absent).

    Returns:
    - RunReport
    """
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    assets = assets if assets is not None else build_assets(config)
    drafter = assets.drafter.copy()
    stream = config.stream
    corpus = assets.corpora[stream.corpus]
    tasks = corpus.tasks(stream.num_samples, stream.prompt_words)
    env = _make_env(config, assets, tasks)
    rng = np.random.default_rng(seed)
    agent = SpdAgent(drafter, config.engine, rng=rng)
    state = None
    if config.adapt.mode != "none" or config.engine.adaptive_drafting:
        state = AdaptState(drafter, config.adapt, env.dmap, seed=seed)
    report = RunReport(config.name, seed, config=config.echo())

    logger.info("Loaded %d stream samples for scenario %s (seed %d)", stream.num_samples, config.name, seed)
    if state is not None and config.adapt.head_pretrain_epochs:
        offline_env = _make_env(config, assets, corpus.tasks(config.adapt.head_pretrain_samples, stream.prompt_words))
        offline_agent = SpdAgent(drafter, config.engine, seed=seed + 1)
        _, items = _decode_frozen(offline_agent, offline_env, state, config.adapt.head_pretrain_samples)
        pretrain_head(state, head_items(items), config.adapt.head_pretrain_epochs)
        logger.info("pretrained acceptance head for %d epochs", config.adapt.head_pretrain_epochs)

    switches = {event.step: event for event in config.switches}
    trace_file = open(out_dir / "trace.jsonl", "w") if config.output.write_trace else None
    tokens_processed = 0
    local_start = 0
    try:
        for step in tqdm(range(stream.num_samples), disable=not config.output.progress, desc=config.name):
            event = switches.get(step)
            if event is not None:
                report.switches.append(_apply_switch(event, config, assets, env, state, step))
                if event.kind == "dataset":
                    corpus = assets.corpora[event.id]
                    env.switch_dataset(corpus.tasks(stream.num_samples - step, stream.prompt_words))
                    local_start = step
            env.stamp_offset = local_start
            hooks = AdaptHooks(state) if state is not None else None
            result = agent.act(env, step - local_start, hooks=hooks, write_trace=trace_file is not None)
            if state is not None:
                adapt_step(state)
            tokens_processed += len(result.tokens)
            cache_size = len(env.cache) if env.cache is not None else 0
            report.rows.append(sample_row(step, result.metrics, config.engine.cost_model, cache_size))
            if trace_file is not None:
                for record in result.trace:
                    trace_file.write(json.dumps(record) + "\n")
            if env.cache is not None and (step + 1) % config.output.snapshot_every == 0 and tokens_processed:
                report.cache_trajectory.append({"step": step, **env.cache.stats_snapshot(tokens_processed).to_dict()})
    except Exception:
        logger.exception("scenario %s failed at sample %d; flushing partial artifacts", config.name, len(report.rows))
        _finish(report, config, env, state, agent, out_dir, trace_file)
        raise

    if stream.eval_test_samples and corpus.test:
        eval_env = copy.deepcopy(env)
        eval_env.switch_dataset(corpus.tasks(stream.eval_test_samples, stream.prompt_words, split="test"))
        eval_env.stamp_offset = stream.num_samples
        eval_agent = SpdAgent(drafter, config.engine, rng=np.random.default_rng(seed + 1))
        test_rows, _ = _decode_frozen(eval_agent, eval_env, state, stream.eval_test_samples)
        report.test_aggregates = aggregate(test_rows)
    _finish(report, config, env, state, agent, out_dir, trace_file)
    logger.info("Finished scenario %s: %s", config.name, report.aggregates)
    return report


def _apply_switch(event, config: ScenarioConfig, assets: Assets, env: DecodingEnv, state: Optional[AdaptState],
                  step: int) -> Dict:
    if event.kind == "dataset":
        logger.info("step %d: switching dataset to %s", step, event.id)
        return {"step": step, "kind": "dataset", "id": event.id}
    spec = config.targets[event.id]
    reset = env.switch_target(event.id, assets.targets[event.id], assets.tokenizers[spec.tokenizer], spec.tokenizer)
    if reset and state is not None:
        state.set_dmap(env.dmap)
    return {"step": step, "kind": "target", "id": event.id, "cache_reset": reset}


def _annotate_switches(report: RunReport, window: int) -> None:
    """Adds pre-switch, post-switch and best recovered acceptance to every switch with samples on both sides."""
    steps = [s["step"] for s in report.switches] + [len(report.rows)]
    for switch, stop in zip(report.switches, steps[1:]):
        if 0 < switch["step"] < min(stop, len(report.rows)):
            switch.update(switch_response(report.rows, switch["step"], window, stop))


def _finish(report: RunReport, config: ScenarioConfig, env: DecodingEnv, state: Optional[AdaptState],
            agent: SpdAgent, out_dir: Path, trace_file) -> None:
    if trace_file is not None:
        trace_file.close()
    report.aggregates = aggregate(report.rows)
    _annotate_switches(report, config.output.switch_window)
    if env.cache is not None:
        report.histogram = ngram_histogram(env.cache)
        if config.output.save_cache:
            env.cache.save(out_dir / "cache.jsonl")
    if state is not None:
        report.head_losses = list(state.head_losses)
        if config.output.save_checkpoint:
            save_bundle(state, out_dir / "bundle", session_rng=agent.rng)
    elif config.output.save_checkpoint:
        agent.drafter.save(out_dir / "drafter.json")
    formats = ["csv", "json"] + (["histogram"] if config.output.histogram else [])
    report_emit(report, out_dir, formats)


def report_emit(report: RunReport, out_dir, formats: Sequence[str] = ("csv", "json", "histogram")) -> List[Path]:
    """
    Writes the per-sample CSV with its round ledger, the aggregate JSON and the n-gram hit-count
    histogram table.

    Returns:
    - list of Path: files written.
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out_dir / "metrics.csv"
        rows_frame(report.rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
        path = out_dir / "rounds.csv"
        ledger_frame(report.rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        written.append(path)
    if "histogram" in formats:
        path = out_dir / "ngram_histogram.csv"
        pd.DataFrame(list(report.histogram.items()), columns=["hit_count", "num_entries"]).to_csv(path, index=False)
        written.append(path)
    return written


### Seeds, sweeps and ablations ###
def run_seeds(config: ScenarioConfig, out_dir=None, seeds: Optional[Sequence[int]] = None,
              assets: Optional[Assets] = None) -> Dict[str, Any]:
    """Runs the scenario once per seed (sharing the built assets) and averages the aggregates."""
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(config)
    assets = assets if assets is not None else build_assets(config)
    reports = [run_scenario(config, out_dir / f"seed_{s}", seed=s, assets=assets) for s in seeds]
    summary = {"header": REPORT_HEADER, "name": config.name, "seeds": seeds,
               "mean": mean_reports([r.aggregates for r in reports]),
               "test_mean": mean_reports([r.test_aggregates for r in reports])}
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return {"reports": reports, **summary}


def _full_cache_size(config: ScenarioConfig, seeds: Sequence[int], assets: Assets, out_dir: Path) -> int:
    full = config.with_override("cache.capacity", None).with_override("output.save_checkpoint", False)
    sizes = [run_scenario(full, out_dir / f"seed_{s}", seed=s, assets=assets).aggregates.get("final_cache_size", 0)
             for s in seeds]
    return max(1, int(round(float(np.mean(sizes)))))


def _point_config(config: ScenarioConfig, axis: str, value, full_size: Optional[int]) -> ScenarioConfig:
    if axis == "variant":
        if value not in VARIANTS:
            raise ConfigError(f"unknown variant {value!r}")
        point = config
        for path, v in VARIANTS[value].items():
            point = point.with_override(path, v)
        if value == "l_dm_ngram" and not point.adapt.ngram_lambda:
            point = point.with_override("adapt.ngram_lambda", 0.2)
        return point
    if axis == "cache_capacity":
        if value in (None, "full"):
            return config.with_override("cache.capacity", None)
        if value == "off":
            return config.with_override("cache.enabled", False)
        return config.with_override("cache.capacity", max(1, int(round(float(value) * full_size))))
    point = config.with_override(SWEEP_AXES[axis], value)
    if axis == "gamma":
        point = point.with_override("engine.adaptive_drafting", True)
    return point


def sweep(config: ScenarioConfig, axis: str, values: Sequence, out_dir=None,
          seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """
    Independent seed-averaged runs per value of one axis, merged into one comparison table.

    Axes: k, gamma, lambda, lambda_mode, cache_policy, cache_capacity (fractions of the recorded
    full-cache size, or "full" / "off"), variant (spd_dm, spd_dm_pp, l_dm, l_dm_ngram).
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(config)
    assets = build_assets(config)
    full_size = None
    if axis == "cache_capacity" and any(v not in (None, "full", "off") for v in values):
        full_size = _full_cache_size(config, seeds, assets, out_dir / "cache_full")
        logger.info("recorded full cache size %d", full_size)
    table = []
    for value in values:
        point = _point_config(config, axis, value, full_size)
        result = run_seeds(point, out_dir / f"{axis}_{value}", seeds=seeds, assets=assets)
        table.append({"axis": axis, "value": value, **result["mean"]})
    df = pd.DataFrame(table)
    os.makedirs(out_dir, exist_ok=True)
    df.to_csv(out_dir / f"sweep_{axis}.csv", index=False, float_format=FLOAT_FORMAT)
    return df


def ablate_variants(config: ScenarioConfig, out_dir=None, seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    return sweep(config, "variant", list(VARIANTS), out_dir, seeds)
