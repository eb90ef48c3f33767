import json
import logging
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from xvocab_sandbox.errors import TokenizerError, VersionError

logger = logging.getLogger(__name__)

TOKENIZER_FORMAT_VERSION = 1
_CHUNK_CACHE_LIMIT = 100_000


class Tokenizer:
    """
    Merge-rule tokenizer over a fixed alphabet.

    Token ids are assigned to the alphabet symbols first (in alphabet order), then to the output
    of each merge rule in training order. Every surface string is produced by exactly one rule,
    which keeps tokenization unambiguous and lets `tokenize` apply the rules by rank.
    """

    def __init__(self, alphabet: Iterable[str], merges: Iterable[Tuple[str, str]] = ()):
        self.alphabet: Tuple[str, ...] = tuple(alphabet)
        if not self.alphabet:
            raise TokenizerError("tokenizer alphabet is empty")
        if any(len(s) != 1 for s in self.alphabet) or len(set(self.alphabet)) != len(self.alphabet):
            raise TokenizerError("alphabet must be distinct single symbols")
        self.merges: Tuple[Tuple[str, str], ...] = tuple((str(l), str(r)) for l, r in merges)

        surfaces: List[str] = list(self.alphabet)
        vocab: Dict[str, int] = {s: i for i, s in enumerate(surfaces)}
        for left, right in self.merges:
            if left not in vocab or right not in vocab:
                raise TokenizerError(f"merge ({left!r}, {right!r}) uses a token that does not exist yet")
            merged = left + right
            if merged in vocab:
                raise TokenizerError(f"merge ({left!r}, {right!r}) produces duplicate surface {merged!r}")
            vocab[merged] = len(surfaces)
            surfaces.append(merged)
        self.vocab: Dict[str, int] = vocab
        self.id_to_surface: Tuple[str, ...] = tuple(surfaces)
        self._ranks: Dict[Tuple[str, str], int] = {pair: rank for rank, pair in enumerate(self.merges)}
        merged_symbols = set("".join(l + r for l, r in self.merges))
        # symbols that take part in no merge can never be merged, so text splits on them exactly
        self._breaks = frozenset(s for s in self.alphabet if s not in merged_symbols)
        self._alphabet_set = frozenset(self.alphabet)
        self._chunk_cache: Dict[str, Tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_surface)

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_surface):
            raise TokenizerError(f"unknown token id {token_id}")
        return self.id_to_surface[token_id]

    def token_id(self, surface: str) -> int:
        if surface not in self.vocab:
            raise TokenizerError(f"surface {surface!r} is not in the vocabulary")
        return self.vocab[surface]

    def tokenize(self, text: str) -> List[int]:
        for symbol in text:
            if symbol not in self._alphabet_set:
                raise TokenizerError(f"symbol {symbol!r} is not in the tokenizer alphabet")
        ids: List[int] = []
        start = 0
        for i, symbol in enumerate(text):
            if symbol in self._breaks:
                if i > start:
                    ids.extend(self._tokenize_chunk(text[start:i]))
                ids.append(self.vocab[symbol])
                start = i + 1
        if start < len(text):
            ids.extend(self._tokenize_chunk(text[start:]))
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        return "".join(self.surface(int(i)) for i in ids)

    def _tokenize_chunk(self, chunk: str) -> Tuple[int, ...]:
        cached = self._chunk_cache.get(chunk)
        if cached is not None:
            return cached
        parts = list(chunk)
        while len(parts) > 1:
            best = None
            for pair in zip(parts, parts[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best is None or rank < best):
                    best = rank
            if best is None:
                break
            left, right = self.merges[best]
            merged = left + right
            out = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == left and parts[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        ids = tuple(self.vocab[p] for p in parts)
        if len(self._chunk_cache) < _CHUNK_CACHE_LIMIT:
            self._chunk_cache[chunk] = ids
        return ids

    def to_dict(self) -> Dict:
        return {
            "version": TOKENIZER_FORMAT_VERSION,
            "alphabet": list(self.alphabet),
            "merges": [list(m) for m in self.merges],
            "vocab": dict(self.vocab),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Tokenizer":
        if data.get("version") != TOKENIZER_FORMAT_VERSION:
            raise VersionError("tokenizer", data.get("version"), TOKENIZER_FORMAT_VERSION)
        try:
            tok = cls(data["alphabet"], [tuple(m) for m in data["merges"]])
        except KeyError as e:
            raise TokenizerError(f"tokenizer record is missing {e}") from e
        if "vocab" in data and data["vocab"] != tok.vocab:
            raise TokenizerError("stored vocabulary does not match the merge rules")
        return tok

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise TokenizerError(f"corrupt tokenizer file {path}: {e}") from e
        return cls.from_dict(data)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.alphabet == other.alphabet and self.merges == other.merges

    def __hash__(self) -> int:
        return hash((self.alphabet, self.merges))

    def __repr__(self) -> str:
        return f"Tokenizer(alphabet={len(self.alphabet)}, merges={len(self.merges)})"


def train_bpe(corpus: Sequence[str], num_merges: int) -> Tokenizer:
    """
    Trains a merge-rule tokenizer on a list of strings.

    Pairs are counted inside each corpus string only, so a corpus of words never produces merges
    that span word boundaries. The most frequent pair is merged first; ties go to the
    lexicographically smallest merged string. Pairs whose merged string already exists are skipped.

    Parameters:
    - corpus (list of str): training strings; their characters define the alphabet.
    - num_merges (int): maximum number of merge rules to learn.

    Returns:
    - Tokenizer: with `num_merges` rules, or fewer if the corpus runs out of pairs.
    """
    if not corpus or not any(corpus):
        raise TokenizerError("cannot train a tokenizer on an empty corpus")
    if num_merges < 0:
        raise TokenizerError("num_merges must be non-negative")
    alphabet = sorted(set("".join(corpus)))
    seqs: Counter = Counter(tuple(text) for text in corpus if text)
    surfaces = set(alphabet)
    merges: List[Tuple[str, str]] = []
    while len(merges) < num_merges:
        pairs: Counter = Counter()
        for seq, freq in seqs.items():
            for pair in zip(seq, seq[1:]):
                pairs[pair] += freq
        candidates = [(-count, a + b, a, b) for (a, b), count in pairs.items() if a + b not in surfaces]
        if not candidates:
            break
        _, merged, left, right = min(candidates)
        merges.append((left, right))
        surfaces.add(merged)
        merged_seqs: Counter = Counter()
        for seq, freq in seqs.items():
            merged_seqs[_merge_pair(seq, left, right, merged)] += freq
        seqs = merged_seqs
    logger.debug("trained tokenizer: %d symbols, %d merges", len(alphabet), len(merges))
    return Tokenizer(alphabet, merges)


def _merge_pair(seq: Tuple[str, ...], left: str, right: str, merged: str) -> Tuple[str, ...]:
    out = []
    i = 0
    while i < len(seq):
        if i < len(seq) - 1 and seq[i] == left and seq[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


class DirectMap:
    """Bijection between draft and target token ids whose surface strings are identical."""

    def __init__(self, q_to_p: Dict[int, int]):
        self.q_to_p: Dict[int, int] = dict(sorted(q_to_p.items()))
        self.p_to_q: Dict[int, int] = {p: q for q, p in self.q_to_p.items()}
        if len(self.p_to_q) != len(self.q_to_p):
            raise TokenizerError("direct map is not a bijection")
        self.q_ids = np.array(list(self.q_to_p.keys()), dtype=np.int64)
        self.p_ids = np.array(list(self.q_to_p.values()), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.q_to_p)

    def to_target(self, draft_id: int) -> Optional[int]:
        return self.q_to_p.get(draft_id)

    def to_draft(self, target_id: int) -> Optional[int]:
        return self.p_to_q.get(target_id)

    def has_draft(self, draft_id: int) -> bool:
        return draft_id in self.q_to_p

    def draft_mask(self, vocab_size: int) -> np.ndarray:
        mask = np.zeros(vocab_size, dtype=bool)
        mask[self.q_ids] = True
        return mask

    def is_identity(self, vocab_size: int) -> bool:
        return len(self) == vocab_size and bool(np.all(self.q_ids == self.p_ids))


def compute_direct_map(tok_q: Tokenizer, tok_p: Tokenizer) -> DirectMap:
    if set(tok_q.alphabet) != set(tok_p.alphabet):
        logger.warning("tokenizers do not share an alphabet; direct map covers the common surfaces only")
    return DirectMap({q: tok_p.vocab[s] for s, q in tok_q.vocab.items() if s in tok_p.vocab})
