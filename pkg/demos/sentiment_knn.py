"""
Sentence embeddings and kNN sentiment classification
====================================================

Twenty labelled sentences, 50 random 14/6 splits, a 5-nearest-neighbour
vote over mean-pooled sentence vectors. A model trained on text whose two
classes use disjoint words is compared with the chance-level baselines.
"""

import numpy as np

from lmforge.corpus import Corpus, SentimentDataset
from lmforge.downstream import knn_trials, sentiment_experiment
from lmforge.model import ModelConfig
from lmforge.tokenizer import train_wordpiece
from lmforge.training import Schedule, pretrain

rng = np.random.default_rng(0)
good = ["anigye", "ahoɔfɛ", "dɔ", "papa", "ahomeka", "nhyira"]
bad = ["awerɛhoɔ", "yare", "bɔne", "abufuo", "ɔhaw", "ahometeɛ"]


def sentences(words, count):
    return [" ".join(rng.choice(words, size=int(rng.integers(3, 7)))) for _ in range(count)]


corpus = Corpus.from_sentences(sentences(good, 60) + sentences(bad, 60))
tokenizer = train_wordpiece(corpus, vocab_size=120, min_frequency=1)
config = ModelConfig.for_flavor("distil", vocab_size=len(tokenizer), hidden_size=64, num_layers=2,
                                num_heads=4, feedforward_size=256, max_positions=64)
params = pretrain(config, corpus, tokenizer, Schedule(epochs=3, batch_size=16, lr=1e-3, max_seq=16)).params

dataset = SentimentDataset(tuple([(s, "positive") for s in sentences(good, 10)]
                                 + [(s, "negative") for s in sentences(bad, 10)]))
report = sentiment_experiment(params, config, tokenizer, dataset, trials=50, seed=0)
print(f"model:   mean {report.mean:.3f}  min {report.min:.3f}  max {report.max:.3f}")

# reference points: perfectly separable vectors, and the same vectors with shuffled labels
labels = dataset.labels
oracle = np.array([[1.0 if lab == "positive" else -1.0, 0.0] for lab in labels])
print(f"oracle:  mean {knn_trials(oracle, labels).mean:.3f}")
print(f"shuffled: mean {knn_trials(oracle[rng.permutation(20)], labels).mean:.3f}")
