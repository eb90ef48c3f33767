import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from xvocab_sandbox.env.lm_oracles import CategoricalDist
from xvocab_sandbox.env.ngram_cache import NGramCache, NGramEntry
from xvocab_sandbox.env.tokenizer import DirectMap, Tokenizer
from xvocab_sandbox.errors import TranslationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    """Provenance of one target position: a direct-mapped draft token or a merged draft n-gram."""

    kind: str  # "dm" | "ngram"
    start: int
    end: int
    entry: Optional[NGramEntry] = None


@dataclass
class MappedProposal:
    target_tokens: List[int] = field(default_factory=list)
    elevated: List[CategoricalDist] = field(default_factory=list)
    segments: List[Segment] = field(default_factory=list)
    draft_consumed: int = 0

    def __len__(self) -> int:
        return len(self.target_tokens)

    @property
    def q_values(self) -> List[float]:
        return [dist[t] for t, dist in zip(self.target_tokens, self.elevated)]


@dataclass
class ReverseResult:
    draft_tokens: List[int]
    new_entries: List[Tuple[int, Tuple[int, ...]]]
    # draft spelling of each translated target token, in order; concatenated they give draft_tokens
    pieces: List[Tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def identity(cls, tokens: Sequence[int]) -> "ReverseResult":
        return cls([int(t) for t in tokens], [], [(int(t),) for t in tokens])


def elevate_distribution(q: CategoricalDist, dmap: DirectMap, target_vocab_size: int,
                         matched: Optional[Tuple[NGramEntry, Sequence[CategoricalDist]]] = None) -> CategoricalDist:
    """
    Re-expresses a drafter distribution over the target vocabulary.

    Direct-mapped target tokens take the probability of their draft twin. When an n-gram was
    matched in the current round, its target token takes the product of the drafter's conditionals
    along the matched path and the image of its first sub-token keeps the remainder, so the two
    together carry exactly q(d_1). Target tokens with no mapping get 0; the result is
    sub-normalized in general.

    Parameters:
    - q (CategoricalDist): drafter distribution at the position where the match starts.
    - dmap (DirectMap): draft/target direct mapping.
    - target_vocab_size (int): size of the target vocabulary.
    - matched (tuple): optional (entry, sub_dists) with one drafter distribution per sub-token.

    Returns:
    - CategoricalDist: over the target vocabulary, flagged not normalized.
    """
    probs = np.zeros(target_vocab_size, dtype=np.float64)
    probs[dmap.p_ids] = q.probs[dmap.q_ids]
    if matched is not None:
        entry, sub_dists = matched
        if len(sub_dists) != len(entry.draft_seq):
            raise TranslationError("one drafter distribution is needed per matched sub-token")
        first = entry.draft_seq[0]
        prod = q[first]
        for dist, token in zip(sub_dists[1:], entry.draft_seq[1:]):
            prod *= dist[token]
        image = dmap.to_target(first)
        if image is not None:
            probs[image] = max(0.0, q[first] - prod)
        probs[entry.target_token] = prod
    return CategoricalDist(probs, "target", normalized=False)


def map_proposal(draft_tokens: Sequence[int], draft_dists: Sequence[CategoricalDist], dmap: DirectMap,
                 cache: Optional[NGramCache], target_vocab_size: int, step: Optional[int] = None) -> MappedProposal:
    """
    Scans the drafter's proposal left to right: the longest cache match at each position merges its
    sub-tokens into one target token, otherwise a direct-mapped token is emitted. The proposal is cut
    at the first draft token that is neither, since the target cannot score it.
    """
    if len(draft_tokens) != len(draft_dists):
        raise TranslationError("one drafter distribution is needed per draft token")
    proposal = MappedProposal()
    i = 0
    while i < len(draft_tokens):
        hit = cache.lookup_longest(draft_tokens, i, step) if cache is not None else None
        if hit is not None:
            entry, length = hit
            dist = elevate_distribution(draft_dists[i], dmap, target_vocab_size,
                                        matched=(entry, draft_dists[i:i + length]))
            proposal.target_tokens.append(entry.target_token)
            proposal.segments.append(Segment("ngram", i, i + length, entry))
            i += length
        elif dmap.has_draft(int(draft_tokens[i])):
            dist = elevate_distribution(draft_dists[i], dmap, target_vocab_size)
            proposal.target_tokens.append(dmap.to_target(int(draft_tokens[i])))
            proposal.segments.append(Segment("dm", i, i + 1))
            i += 1
        else:
            logger.debug("proposal truncated at draft position %d (token %d unmapped)", i, draft_tokens[i])
            break
        proposal.elevated.append(dist)
    proposal.draft_consumed = i
    return proposal


def reverse_translate(accepted_target_tokens: Sequence[int], ctx_q: Sequence[int], ctx_p: Sequence[int],
                      tok_q: Tokenizer, tok_p: Tokenizer, dmap: DirectMap) -> ReverseResult:
    """
    Translates accepted target tokens into drafter tokens and reports new n-gram candidates.

    Each target token is translated on its own: a direct-mapped token by id, any other token by
    retokenizing its surface with the drafter tokenizer. A token that retokenizes into two or more
    draft tokens is an n-gram candidate.
    """
    if tok_q.detokenize(ctx_q) != tok_p.detokenize(ctx_p):
        raise TranslationError("draft and target contexts do not spell the same text")
    draft_tokens: List[int] = []
    new_entries: List[Tuple[int, Tuple[int, ...]]] = []
    spellings: List[Tuple[int, ...]] = []
    for token in accepted_target_tokens:
        token = int(token)
        twin = dmap.to_draft(token)
        pieces = (twin,) if twin is not None else tuple(tok_q.tokenize(tok_p.surface(token)))
        draft_tokens.extend(pieces)
        spellings.append(pieces)
        if len(pieces) >= 2:
            new_entries.append((token, pieces))
    return ReverseResult(draft_tokens, new_entries, spellings)
