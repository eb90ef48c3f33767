import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from xvocab_sandbox.agents.adapt import early_exit
from xvocab_sandbox.config import CostModel, EngineConfig
from xvocab_sandbox.env.env import score_target
from xvocab_sandbox.env.lm_oracles import CategoricalDist, TabularLM, sample
from xvocab_sandbox.env.ngram_cache import NGramCache
from xvocab_sandbox.env.tokenizer import DirectMap, Tokenizer
from xvocab_sandbox.env.translate import (MappedProposal, ReverseResult, Segment, map_proposal,
                                          reverse_translate)
from xvocab_sandbox.errors import TranslationError, XVocabError

logger = logging.getLogger(__name__)

RESIDUAL_MASS_FLOOR = 1e-12

ScoreFn = Callable[[Sequence[int], Sequence[int]], List[CategoricalDist]]


@dataclass
class VerifyOutcome:
    accepted_count: int
    accepted_tokens: List[int]
    correction_token: Optional[int] = None
    free_token: Optional[int] = None
    ratios: List[float] = field(default_factory=list)
    draws: List[float] = field(default_factory=list)

    @property
    def emitted(self) -> List[int]:
        extra = self.correction_token if self.correction_token is not None else self.free_token
        return self.accepted_tokens + ([extra] if extra is not None else [])


@dataclass
class StepMetrics:
    """Counts and costs of one decoding round (one target invocation)."""

    proposed: int
    accepted: int
    ngram_hits: int
    emitted: int
    draft_steps: int
    draft_cost: float
    target_cost: float


@dataclass
class RoundRecord:
    """Everything one round saw; handed to hooks so online adaptation can build its buffers."""

    sample_index: int
    ctx_q: List[int]
    ctx_p: List[int]
    draft_tokens: List[int]
    draft_dists: List[CategoricalDist]
    proposal: MappedProposal
    target_dists: List[CategoricalDist]
    outcome: VerifyOutcome
    emitted: List[int]
    reverse: ReverseResult
    # (target ids, first draft ids) of the cached n-grams the round could match; None without a cache
    ngram_support: Optional[Tuple[np.ndarray, np.ndarray]] = None


@dataclass
class GenerateResult:
    text: str
    tokens: List[int]
    metrics: List[StepMetrics]
    trace: List[Dict]


class DecodeHooks:
    """No-op observer of the decoding loop."""

    def predict_accept(self, draft_token: int) -> float:
        return 1.0

    def on_round(self, record: RoundRecord) -> None:
        pass


def residual(p: CategoricalDist, q_prime: CategoricalDist) -> CategoricalDist:
    """norm(max(0, p - q')); falls back to p when the residual has no mass."""
    if len(p) != len(q_prime):
        raise TranslationError("residual needs both distributions over the same vocabulary")
    r = np.maximum(0.0, p.probs - q_prime.probs)
    mass = r.sum()
    if mass < RESIDUAL_MASS_FLOOR:
        return p
    return CategoricalDist(r / mass, p.space)


def verify(proposal: MappedProposal, target_dists: Sequence[CategoricalDist], rng) -> VerifyOutcome:
    """
    Sequential rejection sampling of a proposal against the target.

    Parameters:
    - proposal (MappedProposal): m proposed target tokens with their proposal distributions q'.
    - target_dists (list of CategoricalDist): m + 1 target distributions; the last is for the bonus position.
    - rng: anything with a `random()` method returning a uniform draw in [0, 1).

    Returns:
    - VerifyOutcome: accepted prefix plus a correction (on rejection) or a free token (all accepted).
    """
    m = len(proposal)
    if len(target_dists) != m + 1:
        raise TranslationError(f"expected {m + 1} target distributions, got {len(target_dists)}")
    outcome = VerifyOutcome(0, [])
    for i, (token, q_dist) in enumerate(zip(proposal.target_tokens, proposal.elevated)):
        q = q_dist[token]
        if q <= 0.0:
            raise TranslationError(f"proposed token {token} has zero proposal probability")
        ratio = min(1.0, target_dists[i][token] / q)
        u = float(rng.random())
        outcome.ratios.append(ratio)
        outcome.draws.append(u)
        if u < ratio:
            outcome.accepted_tokens.append(token)
            outcome.accepted_count += 1
        else:
            outcome.correction_token = sample(residual(target_dists[i], q_dist), rng)
            return outcome
    outcome.free_token = sample(target_dists[m], rng)
    return outcome


def compute_speedup(metrics: Sequence[StepMetrics], cost_model: CostModel) -> Dict[str, float]:
    """
    acceleration_rate = decoded tokens per target invocation; overhead = mean round cost relative
    to one plain target step; speedup = acceleration_rate / overhead.
    """
    if not metrics:
        raise XVocabError("cannot compute speedup without decoding rounds")
    rounds = len(metrics)
    acceleration = sum(m.emitted for m in metrics) / rounds
    overhead = sum(m.draft_cost + m.target_cost for m in metrics) / (rounds * cost_model.target_step_cost)
    return {"acceleration_rate": acceleration, "overhead": overhead, "speedup": acceleration / overhead}


def _masked(dist: CategoricalDist, mask: np.ndarray) -> CategoricalDist:
    probs = np.where(mask, dist.probs, 0.0)
    mass = probs.sum()
    if mass <= 0.0:
        return dist
    return CategoricalDist(probs / mass, dist.space)


def _proposal_mask(dmap: DirectMap, cache: Optional[NGramCache], vocab_size: int) -> np.ndarray:
    mask = dmap.draft_mask(vocab_size)
    if cache is not None:
        for seq in cache.entries:
            mask[list(seq)] = True
    return mask


def _same_vocab_proposal(draft_tokens: Sequence[int], draft_dists: Sequence[CategoricalDist]) -> MappedProposal:
    return MappedProposal(
        target_tokens=[int(t) for t in draft_tokens],
        elevated=[CategoricalDist(d.probs, "target", normalized=False) for d in draft_dists],
        segments=[Segment("dm", i, i + 1) for i in range(len(draft_tokens))],
        draft_consumed=len(draft_tokens),
    )


def _trace_record(sample_index: int, round_index: int, record: RoundRecord, inserted, tok_q: Tokenizer,
                  tok_p: Tokenizer) -> Dict:
    proposal = record.proposal
    return {
        "sample": sample_index,
        "round": round_index,
        "draft_tokens": record.draft_tokens,
        "draft_surfaces": [tok_q.surface(t) for t in record.draft_tokens],
        "target_tokens": proposal.target_tokens,
        "target_surfaces": [tok_p.surface(t) for t in proposal.target_tokens],
        "segments": [[s.kind, s.start, s.end] for s in proposal.segments],
        "q_prime": proposal.q_values,
        "p": [d[t] for t, d in zip(proposal.target_tokens, record.target_dists)],
        "draws": record.outcome.draws,
        "accepted": record.outcome.accepted_count,
        "correction": record.outcome.correction_token,
        "free": record.outcome.free_token,
        "emitted_surfaces": [tok_p.surface(t) for t in record.emitted],
        "cache_inserts": [[tok_p.surface(t), [tok_q.surface(d) for d in seq]] for t, seq in inserted],
    }


def generate(drafter: TabularLM, target: TabularLM, tok_q: Tokenizer, tok_p: Tokenizer, dmap: DirectMap,
             cache: Optional[NGramCache], config: EngineConfig, rng: np.random.Generator, prompt: str,
             hooks: Optional[DecodeHooks] = None, sample_index: int = 0, write_trace: bool = False,
             score: Optional[ScoreFn] = None) -> GenerateResult:
    """
    Speculative decoding of one prompt, same-vocabulary or cross-vocabulary depending on `config.mode`.

    Each round drafts up to k tokens, maps them into target space (direct map plus n-gram cache
    merges), scores them with one target invocation, verifies by rejection sampling, translates the
    emitted target tokens back into drafter tokens and records newly seen n-grams in the cache.

    Parameters:
    - drafter (TabularLM): draft model over the drafter vocabulary.
    - target (TabularLM): target model over the target vocabulary.
    - tok_q, tok_p (Tokenizer): drafter and target tokenizers.
    - dmap (DirectMap): direct mapping between the two vocabularies.
    - cache (NGramCache): n-gram cache; used only in cross_vocab_ngram mode.
    - config (EngineConfig): draft length, token budget, early exit and mode.
    - rng (np.random.Generator): session random generator.
    - prompt (str): text to continue.
    - hooks (DecodeHooks): acceptance predictor and per-round observer.
    - sample_index (int): stream position, used as the cache step stamp.
    - write_trace (bool): collect a JSON-ready record per round.
    - score (callable): target invocation `score(ctx_p, target_tokens)`; defaults to scoring `target` directly.

    Returns:
    - GenerateResult: generated text and target tokens, per-round metrics and the trace.
    """
    hooks = hooks or DecodeHooks()
    mode = config.mode
    if mode == "vanilla" and not dmap.is_identity(tok_p.vocab_size):
        raise TranslationError("vanilla decoding needs the drafter and target to share one vocabulary")
    if score is None:
        score = partial(score_target, target)
    use_cache = cache if mode == "cross_vocab_ngram" else None
    costs = config.cost_model
    eos = config.eos_symbol

    ctx_p = tok_p.tokenize(prompt)
    ctx_q = tok_q.tokenize(prompt) if mode != "vanilla" else list(ctx_p)
    generated: List[int] = []
    metrics: List[StepMetrics] = []
    trace: List[Dict] = []
    finished = False

    while len(generated) < config.max_new_tokens and not finished:
        mask = _proposal_mask(dmap, use_cache, drafter.vocab_size) if config.mask_unmapped and mode != "vanilla" else None
        draft_tokens: List[int] = []
        draft_dists: List[CategoricalDist] = []
        accept_probs: List[float] = []
        for _ in range(config.k):
            dist = drafter.next_token_dist(ctx_q + draft_tokens)
            if mask is not None:
                dist = _masked(dist, mask)
            token = sample(dist, rng)
            draft_tokens.append(token)
            draft_dists.append(dist)
            if config.adaptive_drafting:
                accept_probs.append(hooks.predict_accept(token))
                if early_exit(accept_probs, config.stopping_threshold):
                    break
            if eos and eos in tok_q.surface(token):
                break

        if mode == "vanilla":
            proposal = _same_vocab_proposal(draft_tokens, draft_dists)
        else:
            proposal = map_proposal(draft_tokens, draft_dists, dmap, use_cache, tok_p.vocab_size, sample_index)
        target_dists = score(ctx_p, proposal.target_tokens)
        outcome = verify(proposal, target_dists, rng)

        emitted = outcome.emitted[:config.max_new_tokens - len(generated)]
        if eos:
            for i, token in enumerate(emitted):
                if eos in tok_p.surface(token):
                    emitted = emitted[:i + 1]
                    finished = True
                    break

        if mode == "vanilla":
            reverse = ReverseResult.identity(emitted)
        else:
            reverse = reverse_translate(emitted, ctx_q, ctx_p, tok_q, tok_p, dmap)
        support = use_cache.first_token_support() if use_cache is not None else None
        inserted = []
        if use_cache is not None:
            for target_token, draft_seq in reverse.new_entries:
                if use_cache.insert(target_token, draft_seq, sample_index):
                    inserted.append((target_token, draft_seq))

        record = RoundRecord(sample_index, list(ctx_q), list(ctx_p), draft_tokens, draft_dists, proposal,
                             target_dists, outcome, emitted, reverse, support)
        ngram_hits = sum(1 for seg in proposal.segments[:outcome.accepted_count] if seg.kind == "ngram")
        metrics.append(StepMetrics(
            proposed=len(proposal),
            accepted=outcome.accepted_count,
            ngram_hits=ngram_hits,
            emitted=len(emitted),
            draft_steps=len(draft_tokens),
            draft_cost=len(draft_tokens) * costs.draft_step_cost,
            target_cost=costs.target_step_cost + costs.verify_overhead_cost,
        ))
        if write_trace:
            trace.append(_trace_record(sample_index, len(metrics) - 1, record, inserted, tok_q, tok_p))
        logger.debug("round %d: proposed %d accepted %d emitted %d", len(metrics) - 1, len(proposal),
                     outcome.accepted_count, len(emitted))
        hooks.on_round(record)

        ctx_q = ctx_q + reverse.draft_tokens
        ctx_p = ctx_p + emitted
        generated.extend(emitted)

    return GenerateResult(tok_p.detokenize(generated), generated, metrics, trace)


class SpdAgent:
    """Drafter side of a decoding session; `act` decodes one stream sample against a DecodingEnv."""

    def __init__(self, drafter: TabularLM, config: EngineConfig, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        self.drafter = drafter
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.info: Dict = {}

    def act(self, env, index: int, hooks: Optional[DecodeHooks] = None, write_trace: bool = False) -> GenerateResult:
        query, metadata = env.reset(index)
        result = generate(self.drafter, env.target, env.tok_q, env.tok_p, env.dmap, env.cache, self.config,
                          self.rng, query, hooks=hooks, sample_index=env.step_stamp(index), write_trace=write_trace,
                          score=env.score)
        self.info = {
            "task_index": index,
            "metadata": metadata,
            "text": result.text,
            "num_rounds": len(result.metrics),
            "proposed": sum(m.proposed for m in result.metrics),
            "accepted": sum(m.accepted for m in result.metrics),
        }
        return result
