"""
Distilling a teacher into a one-layer student
=============================================

The student is trained on soft teacher targets, the masked-token labels and
a hidden-state cosine term. The KL to the teacher is compared with an
untrained student of the same shape.
"""

from dataclasses import replace

from lmforge.corpus import bundled, load_corpus
from lmforge.model import ModelConfig, new_model, param_count
from lmforge.tokenizer import train_wordpiece
from lmforge.training import (DistillationConfig, Schedule, distill, make_batches, mean_kl_to_teacher,
                              pretrain)

corpus = load_corpus(bundled("overfit64.txt"))
tokenizer = train_wordpiece(corpus, vocab_size=400, min_frequency=1)

# teacher: the same tiny bert-flavor model as in the pretraining demo
teacher_config = ModelConfig.for_flavor("bert", vocab_size=len(tokenizer), hidden_size=64, num_layers=2,
                                        num_heads=4, feedforward_size=256, max_positions=64)
teacher = pretrain(teacher_config, corpus, tokenizer,
                   Schedule(epochs=50, batch_size=16, lr=3e-3, max_seq=40, dynamic_masking=False)).params

# student: half the layers, no next-sentence head
student_config = replace(teacher_config, flavor="distil", num_segment_types=0, num_layers=1)
print("teacher", param_count(teacher_config), "student", param_count(student_config))

weights = DistillationConfig(temperature=2.0, alpha_soft=0.5, alpha_mlm=0.2, alpha_cos=0.3)
report = distill((teacher, teacher_config, tokenizer), student_config, corpus, weights,
                 Schedule(epochs=20, batch_size=16, lr=3e-3, max_seq=40))

# held-out masked batches, drawn with a seed the training never used
held = make_batches(corpus.sentences, tokenizer, Schedule(batch_size=8, max_seq=40), seed=999)
kl_trained = mean_kl_to_teacher(report.params, student_config, teacher, teacher_config, held)
kl_random = mean_kl_to_teacher(new_model(student_config, 0), student_config, teacher, teacher_config, held)
print(f"KL to teacher: distilled {kl_trained:.4f}, random init {kl_random:.4f}")
