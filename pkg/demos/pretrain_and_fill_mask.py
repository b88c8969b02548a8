"""
Pretraining a tiny model and querying it with fill-mask
=======================================================

A two-layer, 64-dimensional bert-flavor model is trained on the bundled
64-sentence corpus until it has memorised it, then asked to fill in
blanks.
"""

# corpus and WordPiece vocabulary
from lmforge.corpus import bundled, load_corpus
from lmforge.tokenizer import train_wordpiece

corpus = load_corpus(bundled("overfit64.txt"))
tokenizer = train_wordpiece(corpus, vocab_size=400, min_frequency=1)
print(len(corpus), "sentences,", len(tokenizer), "tokens")

# a tiny configuration; the presets for the full-size models live in lmforge.model
from lmforge.model import ModelConfig, param_count

config = ModelConfig.for_flavor("bert", vocab_size=len(tokenizer), hidden_size=64, num_layers=2,
                                num_heads=4, feedforward_size=256, max_positions=64)
print("parameters:", param_count(config))

# 50 epochs of 4 batches; masking is drawn once so the loss measures memorisation
from lmforge.training import Schedule, pretrain

schedule = Schedule(epochs=50, batch_size=16, lr=3e-3, max_seq=40, dynamic_masking=False, seed=0)
report = pretrain(config, corpus, tokenizer, schedule)
print(f"loss {report.initial_loss:.3f} -> {report.final_loss:.3f} in {report.steps} steps")

# per-epoch losses, as written to report.tsv by the CLI
print(report.tsv(include_time=False).splitlines()[-1])

# fill-mask on a training sentence with its second word hidden
from lmforge.evaluation import fill_mask

words = corpus.sentences[3].split()
query = " ".join(words[:1] + ["[MASK]"] + words[2:])
print(query)
for c in fill_mask(report.params, config, tokenizer, query, top_k=5):
    print(f"{c.score:.3f}  {c.token:12s} {c.sequence}")
