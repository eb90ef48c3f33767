import json
import random

import pytest

from xvocab_sandbox.env.ngram_cache import NGramCache, ngram_histogram
from xvocab_sandbox.env.tokenizer import Tokenizer, train_bpe
from xvocab_sandbox.errors import CacheError, VersionError


def _ids(tok, *surfaces):
    return [tok.token_id(s) for s in surfaces]


def _entry(tok_q, tok_p, surface, *pieces):
    return tok_p.token_id(surface), _ids(tok_q, *pieces)


def test_insert_and_reinsert(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    target, seq = _entry(tok_q, tok_p, "abc", "ab", "c")
    assert cache.insert(target, seq, step=3)
    assert not cache.insert(target, seq, step=9)
    entry = cache.get(seq)
    assert (entry.hit_count, entry.last_used, entry.created_at) == (0, 3, 3)
    assert len(cache) == 1


def test_insert_rejects_bad_mappings(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    with pytest.raises(CacheError):
        cache.insert(tok_p.token_id("abc"), _ids(tok_q, "d", "e"), step=0)
    with pytest.raises(CacheError):
        cache.insert(tok_p.token_id("ab"), _ids(tok_q, "ab"), step=0)
    assert len(cache) == 0


def test_lookup_prefers_the_longest_entry(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    cache.insert(*_entry(tok_q, tok_p, "de", "d", "e"), step=0)
    cache.insert(*_entry(tok_q, tok_p, "def", "d", "e", "f"), step=0)
    entry, length = cache.lookup_longest(_ids(tok_q, "d", "e", "f"), step=1)
    assert tok_p.surface(entry.target_token) == "def" and length == 3
    entry, length = cache.lookup_longest(_ids(tok_q, "a", "d", "e", "a"), start=1, step=2)
    assert tok_p.surface(entry.target_token) == "de" and length == 2
    assert entry.hit_count == 1 and entry.last_used == 2
    assert cache.lookup_longest(_ids(tok_q, "d", "a"), step=3) is None
    assert cache.stats["hits"] == 2 and cache.stats["misses"] == 1


def test_lookup_on_empty_cache_and_bounds(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    assert cache.lookup_longest(_ids(tok_q, "d", "e")) is None
    assert cache.lookup_longest(_ids(tok_q, "d", "e"), start=2) is None
    with pytest.raises(CacheError):
        cache.lookup_longest(_ids(tok_q, "d", "e"), start=3)


def test_lfu_evicts_the_least_hit_entry(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=2, policy="lfu")
    a = _entry(tok_q, tok_p, "abc", "ab", "c")
    b = _entry(tok_q, tok_p, "de", "d", "e")
    cache.insert(*a, step=0)
    cache.insert(*b, step=1)
    for step in (2, 3, 4):
        cache.lookup_longest(a[1], step=step)
    cache.lookup_longest(b[1], step=5)
    cache.insert(*_entry(tok_q, tok_p, "cd", "c", "d"), step=6)
    assert len(cache) == 2
    assert tuple(a[1]) in cache and tuple(b[1]) not in cache
    assert cache.stats["evictions"] == 1


def test_lfu_ties_break_on_last_use(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=2, policy="lfu")
    a = _entry(tok_q, tok_p, "abc", "ab", "c")
    b = _entry(tok_q, tok_p, "de", "d", "e")
    cache.insert(*a, step=0)
    cache.insert(*b, step=0)
    cache.lookup_longest(a[1], step=1)
    cache.lookup_longest(a[1], step=3)
    cache.lookup_longest(b[1], step=5)
    cache.lookup_longest(b[1], step=7)
    cache.insert(*_entry(tok_q, tok_p, "cd", "c", "d"), step=8)
    assert tuple(a[1]) not in cache and tuple(b[1]) in cache


def test_lfu_full_ties_break_on_recency_of_use(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=2, policy="lfu")
    a = _entry(tok_q, tok_p, "abc", "ab", "c")
    b = _entry(tok_q, tok_p, "de", "d", "e")
    cache.insert(*a, step=0)
    cache.insert(*b, step=0)
    # same hit count and step stamp; b was used before a
    cache.lookup_longest(b[1], step=1)
    cache.lookup_longest(a[1], step=1)
    assert list(cache.entries) == [tuple(b[1]), tuple(a[1])]
    cache.insert(*_entry(tok_q, tok_p, "cd", "c", "d"), step=1)
    assert tuple(a[1]) in cache and tuple(b[1]) not in cache


def test_lru_evicts_the_stalest_entry(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=2, policy="lru")
    a = _entry(tok_q, tok_p, "abc", "ab", "c")
    b = _entry(tok_q, tok_p, "de", "d", "e")
    cache.insert(*a, step=5)
    cache.insert(*b, step=9)
    cache.insert(*_entry(tok_q, tok_p, "cd", "c", "d"), step=10)
    assert tuple(a[1]) not in cache
    assert tuple(b[1]) in cache


def test_first_token_support_lists_each_cached_target_once(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    targets, firsts = cache.first_token_support()
    assert targets.size == firsts.size == 0
    cache.insert(*_entry(tok_q, tok_p, "def", "d", "e", "f"), step=0)
    cache.insert(*_entry(tok_q, tok_p, "abc", "ab", "c"), step=0)
    cache.insert(*_entry(tok_q, tok_p, "abc", "a", "b", "c"), step=0)
    targets, firsts = cache.first_token_support()
    assert targets.tolist() == sorted(_ids(tok_p, "abc", "def"))
    expected = {tok_p.token_id("abc"): tok_q.token_id("a"), tok_p.token_id("def"): tok_q.token_id("d")}
    assert dict(zip(targets.tolist(), firsts.tolist())) == expected


def test_invalid_policy_and_capacity(small_vocabs):
    tok_q, tok_p = small_vocabs
    with pytest.raises(CacheError):
        NGramCache(tok_q, tok_p, policy="fifo")
    with pytest.raises(CacheError):
        NGramCache(tok_q, tok_p, capacity=0)


def _reference_pool():
    rng = random.Random(11)
    words = ["".join(rng.choice("abcdefgh") for _ in range(rng.randint(2, 5))) for _ in range(60)]
    tok_p = train_bpe(words, 40)
    tok_q = Tokenizer(tok_p.alphabet)
    pool = [(tid, tuple(tok_q.tokenize(tok_p.surface(tid)))) for tid in range(len(tok_p.alphabet), tok_p.vocab_size)]
    return tok_q, tok_p, pool


@pytest.mark.parametrize("policy", ["lru", "lfu"])
@pytest.mark.parametrize("capacity", [1, 2, 8])
def test_eviction_matches_a_reference_simulation(policy, capacity):
    tok_q, tok_p, pool = _reference_pool()
    cache = NGramCache(tok_q, tok_p, capacity=capacity, policy=policy)
    ref = {}
    evictions = 0
    rng = random.Random(capacity)

    def victim():
        if policy == "lru":
            return min(ref, key=lambda s: ref[s][1])
        return min(ref, key=lambda s: (ref[s][0], ref[s][1]))

    for step in range(1000):
        target, seq = rng.choice(pool)
        if rng.random() < 0.5:
            inserted = cache.insert(target, seq, step)
            assert inserted == (seq not in ref)
            if seq not in ref:
                while len(ref) > capacity - 1:
                    del ref[victim()]
                    evictions += 1
                ref[seq] = [0, step]
        else:
            hit = cache.lookup_longest(seq, step=step)
            matches = [s for s in ref if seq[:len(s)] == s]
            if not matches:
                assert hit is None
            else:
                best = max(matches, key=len)
                assert hit[0].draft_seq == best and hit[1] == len(best)
                ref[best][0] += 1
                ref[best][1] = step
        assert set(cache.entries) == set(ref)
        assert len(cache) <= capacity
    assert cache.stats["evictions"] == evictions


def test_stats_snapshot(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    stats = cache.stats_snapshot(10)
    assert (stats.size, stats.memory_estimate, stats.growth_rate, stats.hit_rate) == (0, 0, 0.0, 0.0)
    with pytest.raises(CacheError):
        cache.stats_snapshot(0)
    cache.insert(*_entry(tok_q, tok_p, "de", "d", "e"), step=0)
    cache.lookup_longest(_ids(tok_q, "d", "e"))
    cache.lookup_longest(_ids(tok_q, "a", "b"))
    stats = cache.stats_snapshot(20)
    assert stats.size == 1 and stats.growth_rate == 0.05 and stats.hit_rate == 0.5
    assert stats.memory_estimate > 0


def test_growth_rate_falls_on_a_stationary_stream():
    tok_q, tok_p, pool = _reference_pool()
    cache = NGramCache(tok_q, tok_p)
    rng = random.Random(0)
    weights = [1.0 / (i + 1) for i in range(len(pool))]
    rates = []
    tokens = 0
    for checkpoint in (1000, 2000, 4000):
        while tokens < checkpoint:
            target, seq = rng.choices(pool, weights)[0]
            cache.insert(target, seq, tokens)
            tokens += 1
        rates.append(cache.stats_snapshot(tokens).growth_rate)
    assert rates[0] > rates[1] > rates[2]


def test_save_and_load(tmp_path, small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=3, policy="lru")
    cache.insert(*_entry(tok_q, tok_p, "abc", "ab", "c"), step=1)
    cache.insert(*_entry(tok_q, tok_p, "def", "d", "e", "f"), step=2)
    cache.lookup_longest(_ids(tok_q, "d", "e", "f"), step=4)
    path = tmp_path / "ngram_cache.jsonl"
    cache.save(path)
    loaded = NGramCache.load(path, tok_q, tok_p)
    assert loaded.policy == "lru" and loaded.capacity == 3 and loaded.clock == 4
    assert list(loaded.entries) == list(cache.entries)
    for seq, entry in cache.entries.items():
        assert loaded.entries[seq] == entry
    assert loaded.stats == cache.stats


def test_load_wrong_version(tmp_path, small_vocabs):
    tok_q, tok_p = small_vocabs
    path = tmp_path / "ngram_cache.jsonl"
    path.write_text(json.dumps({"version": 99, "policy": "lfu", "capacity": None}) + "\n")
    with pytest.raises(VersionError) as excinfo:
        NGramCache.load(path, tok_q, tok_p)
    assert excinfo.value.found == 99
    assert not isinstance(excinfo.value, CacheError)


def test_histogram(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p)
    for surface, pieces in (("abc", ("ab", "c")), ("de", ("d", "e")), ("cd", ("c", "d"))):
        cache.insert(*_entry(tok_q, tok_p, surface, *pieces), step=0)
    for _ in range(3):
        cache.lookup_longest(_ids(tok_q, "c", "d"))
    cache.lookup_longest(_ids(tok_q, "d", "e"))
    assert ngram_histogram(cache) == {1: 1, 0: 1, 3: 1} and list(ngram_histogram(cache)) == [0, 1, 3]


def test_evict_if_needed_reports_its_victims(small_vocabs):
    tok_q, tok_p = small_vocabs
    cache = NGramCache(tok_q, tok_p, capacity=3, policy="lru")
    entries = [_entry(tok_q, tok_p, s, *s) for s in ("de", "cd", "def")]
    for step, entry in enumerate(entries):
        cache.insert(*entry, step=step)
    assert cache.evict_if_needed() == []
    cache.lookup_longest(entries[0][1], step=5)
    cache.capacity = 1
    evicted = cache.evict_if_needed()
    assert [e.draft_seq for e in evicted] == [tuple(entries[1][1]), tuple(entries[2][1])]
    assert list(cache.entries) == [tuple(entries[0][1])]
    assert cache.stats["evictions"] == 2
