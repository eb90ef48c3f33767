import itertools
import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from xvocab_sandbox.config import CorpusSpec
from xvocab_sandbox.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class Corpus:
    """A synthetic text domain: a Zipfian word list and sentences drawn from it."""

    corpus_id: str
    spec: CorpusSpec
    words: List[str]
    word_probs: np.ndarray
    train: List[str]
    test: List[str]

    def tasks(self, num_samples: int, prompt_words: int, split: str = "train") -> List[Dict]:
        """
        Builds stream samples. Each sample is a dict with the prompt under "query" (the first
        `prompt_words` words followed by the separator) and the full sentence under "reference".
        Sentences are cycled when the stream is longer than the split.
        """
        source = self.train if split == "train" else self.test
        if not source:
            return []
        tasks = []
        for i in range(num_samples):
            sentence = source[i % len(source)]
            words = sentence[:-len(self.spec.eos)].split(self.spec.separator)
            prompt = self.spec.separator.join(words[:prompt_words]) + self.spec.separator
            tasks.append({"idx": i, "corpus": self.corpus_id, "split": split,
                          "query": prompt, "reference": sentence})
        return tasks

    def symbols(self) -> str:
        return self.spec.letters + self.spec.separator + self.spec.eos

    def to_dict(self) -> Dict:
        return {"corpus_id": self.corpus_id, "spec": self.spec.model_dump(), "words": self.words,
                "word_probs": self.word_probs.tolist(), "train": self.train, "test": self.test}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _draw_multi(spec: CorpusSpec, rng: np.random.Generator, count: int, seen: set) -> List[str]:
    letters = list(spec.letters)
    words: List[str] = []
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 1000 * max(count, spec.num_words):
            raise ConfigError("cannot draw enough distinct words; widen the word length range or the alphabet")
        length = int(rng.integers(spec.min_word_len, spec.max_word_len + 1))
        word = "".join(rng.choice(letters, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _build_words(spec: CorpusSpec, rng: np.random.Generator) -> List[str]:
    letters = list(spec.letters)
    num_multi = int(round(spec.merge_richness * spec.num_words))
    num_single = min(spec.num_words - num_multi, len(letters))
    words = [str(c) for c in rng.permutation(letters)[:num_single]]
    seen = set(words)
    words.extend(_draw_multi(spec, rng, num_multi, seen))
    # rank order is random so single-letter and merged words mix across the frequency range
    head = [words[i] for i in rng.permutation(len(words))]
    return head + _draw_multi(spec, rng, spec.rare_words, seen)


def word_distribution(spec: CorpusSpec, num_words: int) -> np.ndarray:
    """Zipf law over the head ranks; the rare tail shares `rare_mass` uniformly."""
    num_head = num_words - spec.rare_words
    ranks = np.arange(1, num_head + 1, dtype=np.float64)
    head = ranks ** (-spec.zipf_exponent)
    head /= head.sum()
    if not spec.rare_words:
        return head
    tail = np.full(spec.rare_words, spec.rare_mass / spec.rare_words)
    return np.concatenate([head * (1.0 - spec.rare_mass), tail])


def gen_corpus(spec: CorpusSpec, corpus_id: str = "corpus") -> Corpus:
    """
    Generates a deterministic synthetic corpus.

    Words follow a Zipf law over their rank. `merge_richness` is the fraction of multi-letter
    words; the rest are single letters, which no tokenizer can merge. A richness of 0 therefore
    gives a corpus on which every tokenizer trained from it is the bare alphabet. `rare_words`
    extra multi-letter words, ranked after the Zipfian head, share `rare_mass` of the probability.

    Parameters:
    - spec (CorpusSpec): generator settings.
    - corpus_id (str): name carried into stream samples.

    Returns:
    - Corpus: word list, word probabilities, train sentences and the held-out test slice.
    """
    if not spec.letters:
        raise ConfigError("corpus alphabet is empty")
    rng = np.random.default_rng(spec.seed)
    words = _build_words(spec, rng)
    probs = word_distribution(spec, len(words))

    sentences = []
    for _ in range(spec.num_samples):
        n = int(rng.integers(spec.min_sentence_words, spec.max_sentence_words + 1))
        picks = rng.choice(len(words), size=n, p=probs)
        sentences.append(spec.separator.join(words[i] for i in picks) + spec.eos)
    num_test = int(round(spec.test_fraction * len(sentences)))
    train, test = sentences[:len(sentences) - num_test], sentences[len(sentences) - num_test:]
    logger.debug("generated corpus %s: %d words, %d train, %d test", corpus_id, len(words), len(train), len(test))
    return Corpus(corpus_id, spec, words, probs, train, test)


def tokenizer_training_texts(corpora: Iterable[Corpus], num_samples: Optional[int] = None,
                             alphabet: str = "") -> List[str]:
    """
    Splits sentences into letter runs and single non-letter symbols, so no merge spans a word boundary.
    Every symbol of `alphabet` is added as its own text so tokenizers trained on different corpora
    share one alphabet.
    """
    texts: List[str] = list(alphabet)
    for corpus in corpora:
        letters = set(corpus.spec.letters)
        sentences = corpus.train if num_samples is None else corpus.train[:num_samples]
        for sentence in sentences:
            for is_letter, group in itertools.groupby(sentence, key=lambda c: c in letters):
                if is_letter:
                    texts.append("".join(group))
                else:
                    texts.extend(group)
    return texts
