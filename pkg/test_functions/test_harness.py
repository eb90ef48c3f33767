import json
from collections import Counter

import numpy as np
import pandas as pd
import pytest

import run_tasks
from conftest import scenario_dict
from xvocab_sandbox.agents.spd_agent import StepMetrics
from xvocab_sandbox.agents.utils import (CSV_COLUMNS, LEDGER_COLUMNS, aggregate, mean_reports, sample_row,
                                         slice_acceptance, switch_response, windowed_acceptance)
from xvocab_sandbox.config import CorpusSpec, CostModel, ScenarioConfig
from xvocab_sandbox.data.assets import gen_corpus, tokenizer_training_texts, word_distribution
from xvocab_sandbox.env.tokenizer import train_bpe
from xvocab_sandbox.errors import ConfigError, XVocabError
from xvocab_sandbox.harness import REPORT_HEADER, run_scenario, run_seeds, sweep


## Corpora ##
def test_corpus_is_deterministic():
    spec = CorpusSpec(seed=4, num_samples=50)
    a, b = gen_corpus(spec), gen_corpus(spec)
    assert a.train == b.train and a.test == b.test and a.words == b.words
    assert len(a.test) == 5 and len(a.train) == 45
    assert all(s.endswith(".") for s in a.train)


def test_zero_merge_richness_gives_bare_alphabet_tokenizers():
    spec = CorpusSpec(seed=1, letters="abcdefgh", num_words=8, merge_richness=0.0, num_samples=60)
    corpus = gen_corpus(spec)
    texts = tokenizer_training_texts([corpus], alphabet=corpus.symbols())
    small, large = train_bpe(texts, 5), train_bpe(texts, 200)
    assert small == large
    assert small.vocab_size == len(corpus.symbols())


def test_word_frequencies_are_zipfian():
    spec = CorpusSpec(seed=2, num_words=50, num_samples=400)
    corpus = gen_corpus(spec)
    counts = Counter(w for s in corpus.train + corpus.test for w in s[:-1].split(" "))
    total = sum(counts.values())
    top = sum(counts[w] for w in corpus.words[:5])
    assert top / total >= 0.4
    assert len(corpus.words) == 50


def test_rare_tail_carries_its_share_of_the_mass():
    spec = CorpusSpec(seed=6, letters="abcdefghijkl", num_words=16, min_word_len=2, max_word_len=2,
                      merge_richness=1.0, rare_words=100, rare_mass=0.03, num_samples=50)
    corpus = gen_corpus(spec)
    assert len(corpus.words) == 116 and len(set(corpus.words)) == 116
    assert corpus.words[:16] == gen_corpus(spec.model_copy(update={"rare_words": 0, "rare_mass": 0.0})).words
    probs = word_distribution(spec, len(corpus.words))
    assert abs(probs.sum() - 1.0) < 1e-12
    assert abs(probs[16:].sum() - 0.03) < 1e-12
    assert np.all(np.diff(probs[:16]) <= 0.0) and probs[15] > probs[16]


def test_tasks_carry_prompt_and_reference():
    corpus = gen_corpus(CorpusSpec(seed=3, num_samples=20, test_fraction=0.0))
    tasks = corpus.tasks(25, 2)
    assert len(tasks) == 25
    assert tasks[20]["reference"] == tasks[0]["reference"]
    first = tasks[0]
    assert first["reference"].startswith(first["query"])
    assert first["query"].endswith(" ") and first["query"].count(" ") == 2
    assert corpus.tasks(3, 2, split="test") == []


## Configs ##
def test_invalid_configs_are_rejected():
    bad = [
        scenario_dict(switches=[{"step": 5, "kind": "dataset", "id": "main"},
                                {"step": 5, "kind": "target", "id": "large"}]),
        scenario_dict(initial_target="missing"),
        scenario_dict(engine={"k": 0}),
        scenario_dict(engine={"mode": "vanilla"}),
        scenario_dict(colour="blue"),
        scenario_dict(corpora={"main": {"seed": 5, "rare_words": 10}}),
    ]
    for data in bad:
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict(data)


def test_overrides(scenario, tmp_path):
    config = scenario()
    assert config.with_override("engine.k", 5).engine.k == 5
    with pytest.raises(ConfigError):
        config.with_override("engine.depth", 2)
    with pytest.raises(ConfigError):
        config.with_override("engine.k", -1)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_file(tmp_path / "missing.json")


## Metrics ##
def test_sample_row_and_aggregates():
    cost = CostModel(draft_step_cost=0.25, target_step_cost=1.0, verify_overhead_cost=0.005)
    metrics = [StepMetrics(3, 1, 1, 2, 3, 0.75, 1.0), StepMetrics(2, 2, 0, 3, 2, 0.5, 1.0)]
    row = sample_row(0, metrics, cost, cache_size=7)
    assert list(row) == CSV_COLUMNS + LEDGER_COLUMNS[1:]
    assert (row["proposed"], row["accepted"], row["acc_rate"]) == (5, 3, 0.6)
    assert row["ngram_hit"] == 0.5 and row["accel_rate"] == 2.5
    assert abs(row["overhead"] - 1.625) < 1e-12
    assert (row["rounds"], row["emitted"], row["cost"]) == (2, 5, 3.25)
    second = {**row, "step": 1, "proposed": 5, "accepted": 5, "ngram_hit": 0.5, "speedup": 4.0, "cache_size": 9,
              "rounds": 1, "emitted": 4, "cost": 1.0}
    rows = [row, second]
    agg = aggregate(rows)
    assert agg["num_samples"] == 2 and agg["acceptance_rate"] == 0.8 and agg["final_cache_size"] == 9
    assert abs(agg["speedup"] - 9 / 4.25) < 1e-12
    assert agg["acceleration_rate"] == 3.0 and agg["avg_ngram_hit"] == 0.5
    assert aggregate([]) == {}
    with pytest.raises(XVocabError):
        aggregate([{k: row[k] for k in CSV_COLUMNS}])
    assert windowed_acceptance(rows, 1) == [0.6, 1.0]
    assert slice_acceptance(rows, 1) == 1.0
    assert mean_reports([{"speedup": 1.0}, {"speedup": 2.0}, {}]) == {"speedup": 1.5}


def test_switch_response_windows():
    rows = [{"proposed": 10, "accepted": a} for a in [8, 8, 8, 8, 2, 2, 4, 6, 8, 8, 1]]
    out = switch_response(rows, 4, 2, stop=10)
    assert out["pre"] == 0.8 and out["after"] == 0.2
    assert out["recovered"] == 0.8
    assert switch_response(rows, 4, 2)["recovered"] == 0.8
    assert switch_response(rows, 9, 3)["recovered"] == 0.45
    with pytest.raises(XVocabError):
        switch_response(rows, 0, 2)


## Scenarios ##
def test_run_writes_its_artifacts(scenario, tmp_path):
    config = scenario()
    report = run_scenario(config, tmp_path / "run")
    out = tmp_path / "run"
    with open(out / "metrics.csv") as f:
        assert f.readline().strip() == ",".join(CSV_COLUMNS)
    df = pd.read_csv(out / "metrics.csv")
    assert len(df) == 20 == report.aggregates["num_samples"]
    assert abs(df["accepted"].sum() / df["proposed"].sum() - report.aggregates["acceptance_rate"]) < 1e-12
    ledger = pd.read_csv(out / "rounds.csv")
    assert list(ledger.columns) == LEDGER_COLUMNS and list(ledger["step"]) == list(df["step"])
    assert abs(ledger["emitted"].sum() / ledger["cost"].sum() - report.aggregates["speedup"]) < 1e-5
    saved = json.loads((out / "report.json").read_text())
    assert saved["header"] == REPORT_HEADER
    assert saved["config"]["engine"]["k"] == 3
    assert len(saved["cache_trajectory"]) == 4
    assert (out / "cache.jsonl").exists() and (out / "bundle" / "bundle.json").exists()
    hist = pd.read_csv(out / "ngram_histogram.csv")
    assert list(hist.columns) == ["hit_count", "num_entries"]
    assert hist["num_entries"].sum() == report.aggregates["final_cache_size"]
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert lines and all("draft_surfaces" in json.loads(line) for line in lines)


def test_runs_are_reproducible(scenario, tmp_path):
    config = scenario()
    run_scenario(config, tmp_path / "a")
    run_scenario(config, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_empty_stream(scenario, tmp_path):
    config = scenario(stream={"corpus": "main", "num_samples": 0})
    report = run_scenario(config, tmp_path / "empty")
    assert report.rows == [] and report.aggregates == {}
    lines = (tmp_path / "empty" / "metrics.csv").read_text().splitlines()
    assert lines == [",".join(CSV_COLUMNS)]


def test_cache_capacity_is_respected(scenario, tmp_path):
    config = scenario(cache={"policy": "lru", "capacity": 3})
    report = run_scenario(config, tmp_path / "capped")
    assert all(row["cache_size"] <= 3 for row in report.rows)


def test_disabled_cache(scenario, tmp_path):
    config = scenario(cache={"enabled": False})
    report = run_scenario(config, tmp_path / "nocache")
    assert all(row["cache_size"] == 0 and row["ngram_hit"] == 0 for row in report.rows)
    assert not (tmp_path / "nocache" / "cache.jsonl").exists()


def test_switch_events(tmp_path):
    data = scenario_dict()
    data["corpora"]["other"] = {**data["corpora"]["main"], "seed": 9}
    data["tokenizers"]["target_alt"] = {"corpora": ["other"], "num_merges": 30}
    data["targets"]["same_family"] = {"tokenizer": "target", "model": {"order": 2, "fit_corpora": ["main"]}}
    data["targets"]["alt"] = {"tokenizer": "target_alt", "model": {"order": 3, "fit_corpora": ["other"]}}
    data["switches"] = [
        {"step": 5, "kind": "target", "id": "same_family"},
        {"step": 8, "kind": "dataset", "id": "other"},
        {"step": 14, "kind": "target", "id": "alt"},
    ]
    report = run_scenario(ScenarioConfig.from_dict(data), tmp_path / "drift")
    keys = ("step", "kind", "id", "cache_reset")
    assert [{k: s[k] for k in keys if k in s} for s in report.switches] == [
        {"step": 5, "kind": "target", "id": "same_family", "cache_reset": False},
        {"step": 8, "kind": "dataset", "id": "other"},
        {"step": 14, "kind": "target", "id": "alt", "cache_reset": True},
    ]
    assert all({"pre", "after", "recovered"} <= set(s) for s in report.switches)
    assert report.switches[1]["pre"] == slice_acceptance(report.rows, 0, 8)
    assert len(report.rows) == 20
    # the cache restarts empty at the family switch; one sample adds at most one entry per emitted token
    assert report.rows[14]["cache_size"] <= 12


def test_online_distillation_improves_acceptance(tmp_path):
    data = scenario_dict(
        tokenizers={"draft": {"corpora": ["main"], "num_merges": 4}},
        targets={"large": {"tokenizer": "draft", "model": {"order": 3, "fit_corpora": ["main"]}}},
        drafter={"order": 2, "init": "zeros"},
        engine={"k": 3, "max_new_tokens": 12, "mode": "vanilla"},
        adapt={"mode": "distill_only", "lr": 0.005, "weight_decay": 0.0, "update_interval": 1},
        stream={"corpus": "main", "num_samples": 100},
    )
    report = run_scenario(ScenarioConfig.from_dict(data), tmp_path / "learn")
    assert slice_acceptance(report.rows, 80) > slice_acceptance(report.rows, 0, 20)


def test_head_pretraining_and_held_out_eval(scenario, tmp_path):
    config = scenario(
        engine={"k": 3, "max_new_tokens": 12, "adaptive_drafting": True},
        adapt={"mode": "none", "head_pretrain_epochs": 2, "head_pretrain_samples": 4, "head_lr": 0.01},
        stream={"corpus": "main", "num_samples": 6, "eval_test_samples": 4},
    )
    report = run_scenario(config, tmp_path / "head")
    assert report.head_losses
    assert report.test_aggregates["num_samples"] == 4


def test_seeds_and_sweeps(scenario, tmp_path):
    config = scenario(seeds=[0, 1], stream={"corpus": "main", "num_samples": 6})
    summary = run_seeds(config, tmp_path / "seeds")
    assert summary["seeds"] == [0, 1] and summary["mean"]["num_samples"] == 6.0
    assert (tmp_path / "seeds" / "summary.json").exists()
    table = sweep(config, "k", [2, 4], tmp_path / "sweep", seeds=[0])
    assert list(table["value"]) == [2, 4]
    assert (tmp_path / "sweep" / "sweep_k.csv").exists()
    table = sweep(config, "cache_capacity", [0.5, "off"], tmp_path / "capacity", seeds=[0])
    assert len(table) == 2
    with pytest.raises(ConfigError):
        sweep(config, "depth", [1], tmp_path / "bad")


## Command line ##
def test_cli_exit_codes(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(scenario_dict()))
    out = tmp_path / "cli"
    assert run_tasks.main(["run", "--config", str(path), "--out_dir", str(out),
                           "--set", "stream.num_samples=5"]) == 0
    assert len(pd.read_csv(out / "metrics.csv")) == 5
    assert run_tasks.main(["report", "--run_dir", str(out)]) == 0
    assert run_tasks.main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert run_tasks.main(["run", "--config", str(path), "--set", "engine.k=0"]) == 1
    assert run_tasks.main(["run", "--config", str(path), "--set", "engine.k"]) == 1
    assert run_tasks.main(["report", "--run_dir", str(tmp_path / "nowhere")]) == 2
    assert run_tasks.main(["gen-corpus", "--config", str(path), "--out_dir", str(tmp_path / "corpora")]) == 0
    assert (tmp_path / "corpora" / "corpus_main.json").exists()
    assert run_tasks.main(["train-tokenizer", "--config", str(path), "--out_dir", str(tmp_path / "toks")]) == 0
    assert sorted(p.name for p in (tmp_path / "toks").iterdir()) == ["tokenizer_draft.json", "tokenizer_target.json"]
