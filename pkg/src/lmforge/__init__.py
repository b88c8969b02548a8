"""lmforge: a small numpy toolkit for training and evaluating transformer language models.

Subpackages cover a reverse-mode autodiff engine (``tensor``), corpus and
dataset loading (``corpus``), WordPiece/BPE tokenizers (``tokenizer``),
BERT-style encoders and checkpoints (``model``), pretraining, fine-tuning
and distillation (``training``), count and embedding baselines
(``baselines``), evaluation metrics (``evaluation``) and a kNN sentiment
experiment (``downstream``).
"""

__version__ = "0.1.0"
