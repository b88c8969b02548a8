"""
Count-based and static-embedding baselines
==========================================

A trigram model with add-k smoothing, and skip-gram embeddings whose word
vectors include hashed character n-grams, scored on the bundled
word-similarity pairs.
"""

from lmforge.baselines import perplexity, train_ngram, train_static_embeddings
from lmforge.corpus import bundled, load_corpus, load_wordsim, split_train_valid
from lmforge.evaluation import eval_wordsim

corpus = load_corpus(bundled("toy_twi_1k.txt"))
train, valid = split_train_valid(corpus, 0.2, seed=0)

# perplexity on seen and unseen documents, for a few orders and smoothing constants
for n in (1, 2, 3):
    for k in (0.1, 1.0):
        m = train_ngram(train, n, add_k=k)
        print(f"n={n} k={k}: train {perplexity(m, train):7.2f}  valid {perplexity(m, valid):7.2f}")

# embeddings; a small bucket table keeps this quick
emb = train_static_embeddings(corpus, dim=32, window=3, epochs=3, buckets=20_000, seed=0)
print("epoch losses:", [round(x, 3) for x in emb.epoch_losses])

# unseen words still get a vector from their character n-grams
print("vector for an unseen word:", emb.word_vector("nkwadaasɛm")[:4])

dataset = load_wordsim(bundled("wordsim_twi.tsv"))
report = eval_wordsim(emb, dataset)
print("\n".join(report.lines()))
