from .env import DecodingEnv
from .ngram_cache import NGramCache
from .tokenizer import DirectMap, Tokenizer, compute_direct_map, train_bpe
