import json
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from xvocab_sandbox.env.tokenizer import Tokenizer
from xvocab_sandbox.errors import CacheError, TokenizerError, VersionError

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
POLICIES = ("lru", "lfu")

DraftSeq = Tuple[int, ...]


@dataclass
class NGramEntry:
    target_token: int
    draft_seq: DraftSeq
    hit_count: int = 0
    last_used: int = 0
    created_at: int = 0


@dataclass(frozen=True)
class CacheStats:
    size: int
    memory_estimate: int
    growth_rate: float
    hit_rate: float

    def to_dict(self) -> Dict:
        return {"size": self.size, "memory_estimate": self.memory_estimate,
                "growth_rate": self.growth_rate, "hit_rate": self.hit_rate}


class NGramCache:
    """
    Cross-vocabulary n-gram cache: draft sub-token sequences that concatenate to one target token.

    Entries are kept in an OrderedDict whose order is recency of use (oldest first); it breaks
    ties between entries stamped with the same step. Step stamps come from the decoding loop's
    sample counter.
    """

    def __init__(self, tok_q: Tokenizer, tok_p: Tokenizer, capacity: Optional[int] = None, policy: str = "lfu"):
        if policy not in POLICIES:
            raise CacheError(f"unknown eviction policy {policy!r}")
        if capacity is not None and capacity < 1:
            raise CacheError("cache capacity must be at least 1")
        self.tok_q = tok_q
        self.tok_p = tok_p
        self.capacity = capacity
        self.policy = policy
        self.entries: "OrderedDict[DraftSeq, NGramEntry]" = OrderedDict()
        self.by_target: Dict[int, Set[DraftSeq]] = {}
        self._lengths: Counter = Counter()
        self.stats = {"inserts": 0, "hits": 0, "misses": 0, "evictions": 0}
        self.clock = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, draft_seq) -> bool:
        return tuple(draft_seq) in self.entries

    def get(self, draft_seq: Sequence[int]) -> Optional[NGramEntry]:
        return self.entries.get(tuple(draft_seq))

    @property
    def max_len(self) -> int:
        return max((n for n, c in self._lengths.items() if c > 0), default=0)

    def _check_surface(self, target_token: int, draft_seq: DraftSeq) -> None:
        if len(draft_seq) < 2:
            raise CacheError("n-gram entries need at least two draft tokens")
        try:
            draft_surface = self.tok_q.detokenize(draft_seq)
            target_surface = self.tok_p.surface(target_token)
        except TokenizerError as e:
            raise CacheError(f"corrupt mapping: {e}") from e
        if draft_surface != target_surface:
            raise CacheError(f"corrupt mapping: draft {draft_surface!r} != target {target_surface!r}")

    def insert(self, target_token: int, draft_seq: Sequence[int], step: int) -> bool:
        draft_seq = tuple(int(t) for t in draft_seq)
        self._check_surface(target_token, draft_seq)
        self.clock = max(self.clock, step)
        if draft_seq in self.entries:
            return False
        self.evict_if_needed(reserve=1)
        self._add(NGramEntry(int(target_token), draft_seq, 0, step, step))
        self.stats["inserts"] += 1
        return True

    def _add(self, entry: NGramEntry) -> None:
        self.entries[entry.draft_seq] = entry
        self.by_target.setdefault(entry.target_token, set()).add(entry.draft_seq)
        self._lengths[len(entry.draft_seq)] += 1

    def _remove(self, draft_seq: DraftSeq) -> NGramEntry:
        entry = self.entries.pop(draft_seq)
        seqs = self.by_target[entry.target_token]
        seqs.discard(draft_seq)
        if not seqs:
            del self.by_target[entry.target_token]
        self._lengths[len(draft_seq)] -= 1
        return entry

    def lookup_longest(self, draft_tokens: Sequence[int], start: int = 0,
                       step: Optional[int] = None) -> Optional[Tuple[NGramEntry, int]]:
        """
        Finds the longest entry whose draft sequence is a prefix of draft_tokens[start:].

        Parameters:
        - draft_tokens (list of int): draft-space token ids.
        - start (int): scan position, 0 <= start <= len(draft_tokens).
        - step (int): stamp for the hit; defaults to the last step the cache has seen.

        Returns:
        - (NGramEntry, matched_len) on a hit, None on a miss.
        """
        if not 0 <= start <= len(draft_tokens):
            raise CacheError(f"lookup start {start} out of bounds for {len(draft_tokens)} tokens")
        if step is not None:
            self.clock = max(self.clock, step)
        remaining = len(draft_tokens) - start
        for length in range(min(self.max_len, remaining), 1, -1):
            if not self._lengths[length]:
                continue
            key = tuple(int(t) for t in draft_tokens[start:start + length])
            entry = self.entries.get(key)
            if entry is not None:
                entry.hit_count += 1
                entry.last_used = self.clock if step is None else step
                self.entries.move_to_end(key)
                self.stats["hits"] += 1
                return entry, length
        self.stats["misses"] += 1
        return None

    def _victim(self) -> DraftSeq:
        if self.policy == "lru":
            rank = lambda item: (item[1].last_used, item[0])
        else:
            rank = lambda item: (item[1].hit_count, item[1].last_used, item[0])
        _, entry = min(enumerate(self.entries.values()), key=rank)
        return entry.draft_seq

    def evict_if_needed(self, reserve: int = 0) -> List[NGramEntry]:
        """Evicts policy victims until `reserve` more entries fit under the capacity; returns them in eviction order."""
        evicted = []
        if self.capacity is None:
            return evicted
        while self.entries and len(self.entries) + reserve > self.capacity:
            evicted.append(self._remove(self._victim()))
        if evicted:
            self.stats["evictions"] += len(evicted)
            logger.debug("evicted %d n-gram entries (%s)", len(evicted), self.policy)
        return evicted

    def first_token_support(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Target ids of the cached n-grams and, for each, the first draft token of its spelling.
        A target token cached under several spellings is listed once, with its smallest spelling.
        """
        pairs = sorted((target, min(seqs)[0]) for target, seqs in self.by_target.items())
        return (np.array([t for t, _ in pairs], dtype=np.int64),
                np.array([d for _, d in pairs], dtype=np.int64))

    def _record(self, entry: NGramEntry) -> Dict:
        return {
            "target_surface": self.tok_p.surface(entry.target_token),
            "draft_surfaces": [self.tok_q.surface(t) for t in entry.draft_seq],
            "hit_count": entry.hit_count,
            "last_used": entry.last_used,
            "created_at": entry.created_at,
        }

    def stats_snapshot(self, tokens_processed: int) -> CacheStats:
        if tokens_processed <= 0:
            raise CacheError("tokens_processed must be positive")
        memory = sum(len(json.dumps(self._record(e)).encode("utf-8")) for e in self.entries.values())
        lookups = self.stats["hits"] + self.stats["misses"]
        return CacheStats(
            size=len(self.entries),
            memory_estimate=memory,
            growth_rate=len(self.entries) / tokens_processed,
            hit_rate=self.stats["hits"] / lookups if lookups else 0.0,
        )

    def save(self, path) -> None:
        header = {"version": CACHE_FORMAT_VERSION, "policy": self.policy, "capacity": self.capacity,
                  "clock": self.clock, "stats": self.stats}
        with open(path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for entry in self.entries.values():
                f.write(json.dumps(self._record(entry)) + "\n")

    @classmethod
    def load(cls, path, tok_q: Tokenizer, tok_p: Tokenizer) -> "NGramCache":
        try:
            with open(path, "r") as f:
                records = [json.loads(line) for line in f if line.strip()]
        except json.JSONDecodeError as e:
            raise CacheError(f"corrupt cache file {path}: {e}") from e
        if not records:
            raise CacheError(f"cache file {path} has no header")
        header = records[0]
        if header.get("version") != CACHE_FORMAT_VERSION:
            raise VersionError("cache", header.get("version"), CACHE_FORMAT_VERSION)
        cache = cls(tok_q, tok_p, capacity=header.get("capacity"), policy=header.get("policy", "lfu"))
        cache.clock = int(header.get("clock", 0))
        cache.stats.update(header.get("stats", {}))
        for record in records[1:]:
            try:
                target_token = tok_p.token_id(record["target_surface"])
                draft_seq = tuple(tok_q.token_id(s) for s in record["draft_surfaces"])
            except (KeyError, TokenizerError) as e:
                raise CacheError(f"corrupt cache entry {record}: {e}") from e
            cache._check_surface(target_token, draft_seq)
            cache._add(NGramEntry(target_token, draft_seq, int(record["hit_count"]),
                                  int(record["last_used"]), int(record["created_at"])))
        if cache.capacity is not None and len(cache) > cache.capacity:
            raise CacheError("cache file holds more entries than its capacity")
        return cache


def ngram_histogram(cache: NGramCache) -> Dict[int, int]:
    """Number of entries per hit count, sorted by hit count."""
    return dict(sorted(Counter(e.hit_count for e in cache.entries.values()).items()))
