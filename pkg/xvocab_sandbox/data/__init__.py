from .assets import Corpus, gen_corpus
