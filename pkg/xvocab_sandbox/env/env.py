import logging
from typing import Dict, List, Optional, Sequence

from xvocab_sandbox.config import CacheConfig
from xvocab_sandbox.env.lm_oracles import CategoricalDist, TabularLM
from xvocab_sandbox.env.ngram_cache import NGramCache
from xvocab_sandbox.env.tokenizer import Tokenizer, compute_direct_map

logger = logging.getLogger(__name__)


def score_target(target: TabularLM, ctx_p: Sequence[int], tokens: Sequence[int]) -> List[CategoricalDist]:
    """One target invocation: distributions after every proposed prefix, bonus position included."""
    ctx = list(ctx_p)
    dists = [target.next_token_dist(ctx)]
    for token in tokens:
        ctx.append(token)
        dists.append(target.next_token_dist(ctx))
    return dists


class DecodingEnv(object):
    """
    Target side of a decoding session: the stream of prompts, the target model and its tokenizer,
    the direct map to the drafter vocabulary and the n-gram cache.
    """

    def __init__(
        self,
        tasks: List[Dict],
        target: TabularLM,
        tok_q: Tokenizer,
        tok_p: Tokenizer,
        cache_config: Optional[CacheConfig] = None,
        target_id: str = "target",
        tokenizer_id: Optional[str] = None,
    ) -> None:
        super().__init__()
        self.tasks = tasks
        self.target = target
        self.tok_q = tok_q
        self.tok_p = tok_p
        self.target_id = target_id
        self.tokenizer_id = tokenizer_id
        self.cache_config = cache_config or CacheConfig()
        self.dmap = compute_direct_map(tok_q, tok_p)
        self.cache = self._new_cache()
        self.task = None
        self.target_calls = 0
        self.stamp_offset = 0

    def _new_cache(self) -> Optional[NGramCache]:
        if not self.cache_config.enabled:
            return None
        return NGramCache(self.tok_q, self.tok_p, self.cache_config.capacity, self.cache_config.policy)

    def reset(self, task_index: int = 0):
        self.task = self.tasks[task_index]
        initial_observation = self.task.get("query", "")
        metadata = {k: v for k, v in self.task.items() if k != "query"}
        return initial_observation, metadata

    def step_stamp(self, task_index: int) -> int:
        return self.stamp_offset + task_index

    def score(self, ctx_p: Sequence[int], target_tokens: Sequence[int]) -> List[CategoricalDist]:
        self.target_calls += 1
        return score_target(self.target, ctx_p, target_tokens)

    def switch_dataset(self, tasks: List[Dict]) -> None:
        self.tasks = tasks

    def switch_target(self, target_id: str, target: TabularLM, tok_p: Tokenizer,
                      tokenizer_id: Optional[str] = None) -> bool:
        """
        Swaps the target model. The n-gram cache is kept when the new target uses the same tokenizer
        and rebuilt (with a new direct map) otherwise.

        Returns:
        - bool: True if the cache was reset.
        """
        same_family = tok_p == self.tok_p and (tokenizer_id is None or tokenizer_id == self.tokenizer_id)
        self.target = target
        self.target_id = target_id
        if same_family:
            logger.info("switched target to %s; n-gram cache reused", target_id)
            return False
        self.tok_p = tok_p
        self.tokenizer_id = tokenizer_id
        self.dmap = compute_direct_map(self.tok_q, tok_p)
        self.cache = self._new_cache()
        logger.info("switched target to %s; new tokenizer, n-gram cache reset", target_id)
        return True
