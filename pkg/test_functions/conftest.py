import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from xvocab_sandbox.config import ScenarioConfig  # noqa: E402
from xvocab_sandbox.env.lm_oracles import TabularLM  # noqa: E402
from xvocab_sandbox.env.tokenizer import Tokenizer  # noqa: E402


def random_lm(vocab_size, order=2, seed=0, temperature=1.0, scale=1.0):
    """Tabular model with an explicit random row for every window."""
    rng = np.random.default_rng(seed)
    model = TabularLM(vocab_size, order, temperature, embed_dim=4, seed=seed)
    for window in itertools.product(range(vocab_size), repeat=order - 1):
        model.rows[tuple(window)] = rng.normal(0.0, scale, size=vocab_size)
    model.backoff = rng.normal(0.0, scale, size=vocab_size)
    return model


@pytest.fixture
def small_vocabs():
    """
    Drafter vocabulary: a b c d e f ab (ids 0-6).
    Target vocabulary: a b c d e f ab abc de def cd (ids 0-10).
    """
    alphabet = list("abcdef")
    tok_q = Tokenizer(alphabet, [("a", "b")])
    tok_p = Tokenizer(alphabet, [("a", "b"), ("ab", "c"), ("d", "e"), ("de", "f"), ("c", "d")])
    return tok_q, tok_p


def scenario_dict(**overrides):
    data = {
        "name": "unit",
        "seed": 0,
        "seeds": [0],
        "corpora": {
            "main": {"seed": 5, "letters": "abcdefgh", "num_words": 16, "merge_richness": 0.8,
                     "min_word_len": 2, "max_word_len": 4, "min_sentence_words": 4, "max_sentence_words": 6,
                     "num_samples": 80},
        },
        "tokenizers": {
            "draft": {"corpora": ["main"], "num_merges": 4},
            "target": {"corpora": ["main"], "num_merges": 40},
        },
        "drafter_tokenizer": "draft",
        "drafter": {"order": 2, "init": "fit", "fit_corpora": ["main"], "fit_samples": 40},
        "targets": {"large": {"tokenizer": "target", "model": {"order": 3, "fit_corpora": ["main"]}}},
        "initial_target": "large",
        "engine": {"k": 3, "max_new_tokens": 12},
        "cache": {"policy": "lfu"},
        "adapt": {"mode": "distill_only", "lr": 0.001, "update_interval": 2},
        "stream": {"corpus": "main", "num_samples": 20},
        "output": {"dir": "unit", "progress": False, "snapshot_every": 5},
    }
    for key, value in overrides.items():
        data[key] = value
    return data


@pytest.fixture
def scenario():
    def build(**overrides):
        return ScenarioConfig.from_dict(scenario_dict(**overrides))
    return build


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale scenario and sampling checks")


def load_config(name):
    return ScenarioConfig.from_file(Path(__file__).resolve().parents[1] / "configs" / f"{name}.json")
