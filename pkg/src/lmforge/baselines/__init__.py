"""Non-transformer reference models: an n-gram LM and subword skip-gram embeddings."""

from .ngram import EvaluationError, NGramModel, perplexity, sentence_logprob, train_ngram
from .static_embeddings import StaticEmbeddings, char_ngrams, fnv1a_32, train_static_embeddings

__all__ = [
    "EvaluationError", "NGramModel", "perplexity", "sentence_logprob", "train_ngram",
    "StaticEmbeddings", "char_ngrams", "fnv1a_32", "train_static_embeddings",
]
