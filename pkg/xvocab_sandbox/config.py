import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from xvocab_sandbox.errors import ConfigError

OUTPUT_ROOT_ENV = "XVOCAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "outputs"

EngineMode = Literal["vanilla", "cross_vocab_dm", "cross_vocab_ngram"]
AdaptMode = Literal["none", "distill_only", "adapt_only", "joint", "interleaved"]
LambdaMode = Literal["fixed", "dynamic", "approx_kl"]
CachePolicy = Literal["lru", "lfu"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CostModel(_Strict):
    """Abstract per-step costs standing in for measured wall-clock latencies."""

    draft_step_cost: float = Field(0.0716, gt=0)
    target_step_cost: float = Field(1.0, gt=0)
    verify_overhead_cost: float = Field(0.005, gt=0)


class EngineConfig(_Strict):
    k: int = Field(3, ge=1)
    max_new_tokens: int = Field(32, ge=1)
    temperature: float = Field(0.01, gt=0)
    stopping_threshold: float = Field(0.3, ge=0.0, le=1.0)
    adaptive_drafting: bool = False
    mode: EngineMode = "cross_vocab_ngram"
    mask_unmapped: bool = False
    eos_symbol: Optional[str] = "."
    cost_model: CostModel = Field(default_factory=CostModel)


class CacheConfig(_Strict):
    enabled: bool = True
    policy: CachePolicy = "lfu"
    capacity: Optional[int] = Field(None, ge=1)


class AdaptConfig(_Strict):
    mode: AdaptMode = "none"
    lambda_mode: LambdaMode = "fixed"
    ngram_lambda: float = Field(0.2, ge=0.0)
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(8, ge=1)
    update_interval: int = Field(8, ge=1)
    distill_steps: int = Field(1, ge=1)
    replay_size: int = Field(64, ge=1)
    head_lr: float = Field(1e-4, gt=0)
    head_hidden: int = Field(0, ge=0)
    head_init_bias: float = 0.0
    head_pos_weight: float = Field(1.0, gt=0)
    head_pretrain_epochs: int = Field(0, ge=0)
    head_pretrain_samples: int = Field(32, ge=1)
    train_embeddings: bool = False
    teacher_floor: float = Field(1e-12, gt=0)


class CorpusSpec(_Strict):
    letters: str = "abcdefghijklmn"
    separator: str = " "
    eos: str = "."
    num_words: int = Field(40, ge=1)
    min_word_len: int = Field(3, ge=2)
    max_word_len: int = Field(6, ge=2)
    zipf_exponent: float = Field(1.1, gt=0)
    merge_richness: float = Field(0.8, ge=0.0, le=1.0)
    rare_words: int = Field(0, ge=0)
    rare_mass: float = Field(0.0, ge=0.0, lt=1.0)
    min_sentence_words: int = Field(6, ge=1)
    max_sentence_words: int = Field(12, ge=1)
    num_samples: int = Field(400, ge=0)
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_symbols(self):
        if not self.letters:
            raise ValueError("corpus alphabet is empty")
        if len(set(self.letters)) != len(self.letters):
            raise ValueError("corpus letters contain duplicates")
        for name in ("separator", "eos"):
            symbol = getattr(self, name)
            if len(symbol) != 1 or symbol in self.letters:
                raise ValueError(f"{name} must be a single symbol outside the letters")
        if self.separator == self.eos:
            raise ValueError("separator and eos must differ")
        if self.min_word_len > self.max_word_len:
            raise ValueError("min_word_len exceeds max_word_len")
        if self.min_sentence_words > self.max_sentence_words:
            raise ValueError("min_sentence_words exceeds max_sentence_words")
        if (self.rare_words > 0) != (self.rare_mass > 0.0):
            raise ValueError("rare_words and rare_mass must be set together")
        return self


class TokenizerSpec(_Strict):
    corpora: List[str]
    num_merges: int = Field(ge=0)
    num_train_samples: Optional[int] = Field(None, ge=1)


class ModelSpec(_Strict):
    order: int = Field(2, ge=1)
    temperature: Optional[float] = Field(None, gt=0)
    embed_dim: int = Field(16, ge=1)
    init: Literal["zeros", "fit"] = "fit"
    fit_corpora: List[str] = Field(default_factory=list)
    fit_samples: Optional[int] = Field(None, ge=1)
    smoothing: float = Field(0.01, gt=0)
    seed: int = 0


class TargetSpec(_Strict):
    tokenizer: str
    model: ModelSpec


class StreamSpec(_Strict):
    corpus: str
    num_samples: int = Field(200, ge=0)
    prompt_words: int = Field(2, ge=1)
    eval_test_samples: int = Field(0, ge=0)


class SwitchEvent(_Strict):
    step: int = Field(ge=0)
    kind: Literal["dataset", "target"]
    id: str


class OutputSpec(_Strict):
    dir: str = "run"
    write_trace: bool = True
    save_cache: bool = True
    save_checkpoint: bool = True
    histogram: bool = True
    snapshot_every: int = Field(50, ge=1)
    switch_window: int = Field(20, ge=1)
    progress: bool = True


class ScenarioConfig(_Strict):
    name: str = "scenario"
    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    corpora: Dict[str, CorpusSpec]
    tokenizers: Dict[str, TokenizerSpec]
    drafter_tokenizer: str
    drafter: ModelSpec = Field(default_factory=ModelSpec)
    targets: Dict[str, TargetSpec]
    initial_target: str
    engine: EngineConfig = Field(default_factory=EngineConfig)
    cache: CacheConfig = Field(default_factory=CacheConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    stream: StreamSpec
    switches: List[SwitchEvent] = Field(default_factory=list)
    output: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def _check_references(self):
        def need(kind, key, table):
            if key not in table:
                raise ValueError(f"unknown {kind} id {key!r}")

        for spec in self.tokenizers.values():
            for corpus_id in spec.corpora:
                need("corpus", corpus_id, self.corpora)
        need("tokenizer", self.drafter_tokenizer, self.tokenizers)
        for corpus_id in self.drafter.fit_corpora:
            need("corpus", corpus_id, self.corpora)
        for target in self.targets.values():
            need("tokenizer", target.tokenizer, self.tokenizers)
            for corpus_id in target.model.fit_corpora:
                need("corpus", corpus_id, self.corpora)
        need("target", self.initial_target, self.targets)
        need("corpus", self.stream.corpus, self.corpora)
        last = -1
        for event in self.switches:
            if event.step <= last:
                raise ValueError("switch steps must be strictly increasing")
            last = event.step
            need("corpus" if event.kind == "dataset" else "target", event.id,
                 self.corpora if event.kind == "dataset" else self.targets)
        if self.engine.mode == "vanilla":
            tokenizer_ids = {self.targets[t].tokenizer for t in self.targets}
            if tokenizer_ids != {self.drafter_tokenizer}:
                raise ValueError("vanilla mode needs drafter and targets to share one tokenizer")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read scenario config {path}: {e}") from e
        return cls.from_dict(data)

    def with_override(self, dotted: str, value: Any) -> "ScenarioConfig":
        """Return a validated copy with one nested field replaced, e.g. ``engine.k``."""
        data = copy.deepcopy(self.model_dump())
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config path {dotted!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node[parts[-1]] = value
        return ScenarioConfig.from_dict(data)

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def output_root() -> Path:
    load_dotenv()
    return Path(os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def resolve_output_dir(config: ScenarioConfig) -> Path:
    path = Path(config.output.dir)
    if not path.is_absolute():
        path = output_root() / path
    return path
