from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from lmforge import tensor as T
from lmforge.tokenizer import load_tokenizer
from lmforge.model import ForwardOutput, load_checkpoint, new_model, param_count
from lmforge.training import (DistillationConfig, Schedule, TrainingBatch, build_mlm_batch, cosine_loss, distill,
                              distillation_loss, make_batches, mean_kl_to_teacher, mlm_nsp_loss, run_forward, soft_kl)


def _logits(seed, shape=(2, 5, 13)):
    return np.random.default_rng(seed).normal(size=shape)


def _fake_batch(wordpiece, overfit_corpus):
    return build_mlm_batch(overfit_corpus.sentences[:2], wordpiece, max_seq=16, seed=0)


def test_kl_zero_for_identical_logits():
    z = _logits(0)
    rows = np.arange(10)
    for temp in (1.0, 2.0, 5.0):
        assert abs(soft_kl(T.tensor(z, dtype=np.float64), z, rows, temp).item()) < 1e-12


def test_kl_matches_direct_formula():
    s, t = _logits(1), _logits(2)
    rows = np.array([0, 3, 7])
    temp = 2.0

    def sm(x):
        e = np.exp(x - x.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    p = sm(t.reshape(-1, 13)[rows] / temp)
    q = sm(s.reshape(-1, 13)[rows] / temp)
    want = (p * np.log(p / q)).sum(-1).mean()
    assert abs(soft_kl(T.tensor(s, dtype=np.float64), t, rows, temp).item() - want) < 1e-12


def test_cosine_term_zero_for_equal_hidden():
    h = _logits(3, (2, 4, 8))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]])
    assert abs(cosine_loss(T.tensor(h, dtype=np.float64), h, mask).item()) < 1e-12
    assert abs(cosine_loss(T.tensor(-h, dtype=np.float64), h, mask).item() - 2.0) < 1e-12


def test_pure_mlm_weights_reduce_to_mlm_loss(wordpiece, overfit_corpus):
    cfg = tiny_config("distil", len(wordpiece))
    student, teacher = new_model(cfg, 0), new_model(cfg, 1)
    b = _fake_batch(wordpiece, overfit_corpus)
    s_out, t_out = run_forward(student, cfg, b), run_forward(teacher, cfg, b)
    got = distillation_loss(s_out, t_out, b, DistillationConfig(alpha_soft=0.0, alpha_mlm=1.0, alpha_cos=0.0))
    assert got.data == mlm_nsp_loss(s_out, b)[0].data


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        DistillationConfig(alpha_soft=0.5, alpha_mlm=0.5, alpha_cos=0.5)
    with pytest.raises(ValueError):
        DistillationConfig(temperature=0.0)


def test_vocab_mismatch_rejected(overfit_run, overfit_corpus):
    _, out = overfit_run
    _, cfg = load_checkpoint(out / "epoch-50")
    with pytest.raises(ValueError, match="vocab"):
        distill(out / "epoch-50", replace(cfg, flavor="distil", num_segment_types=0, vocab_size=cfg.vocab_size + 1),
                overfit_corpus)


def test_hidden_mismatch_rejected_for_cosine_term(overfit_run, overfit_corpus):
    _, out = overfit_run
    _, cfg = load_checkpoint(out / "epoch-50")
    narrow = replace(cfg, flavor="distil", num_segment_types=0, hidden_size=32, num_heads=2)
    with pytest.raises(ValueError, match="hidden"):
        distill(out / "epoch-50", narrow, overfit_corpus)
    s = ForwardOutput(T.tensor(np.zeros((1, 2, 32))), T.tensor(np.zeros((1, 2, 7))), None)
    t = ForwardOutput(T.tensor(np.ones((1, 2, 64))), T.tensor(np.zeros((1, 2, 7))), None)
    batch = TrainingBatch(np.zeros((1, 2), int), np.ones((1, 2), int), np.array([[1, -100]]), np.zeros((1, 2), int))
    with pytest.raises(ValueError, match="hidden"):
        distillation_loss(s, t, batch)


@pytest.fixture(scope="module")
def distilled(overfit_run, overfit_corpus):
    _, out = overfit_run
    teacher, t_cfg = load_checkpoint(out / "epoch-50")
    before = teacher.state_dict()
    s_cfg = replace(t_cfg, flavor="distil", num_segment_types=0, num_layers=1)
    sched = Schedule(epochs=20, batch_size=16, lr=3e-3, max_seq=40, seed=0)
    # in-memory teacher, so any mutation during training would be visible
    report = distill((teacher, t_cfg, load_tokenizer(out / "epoch-50")), s_cfg, overfit_corpus, schedule=sched)
    return teacher, t_cfg, s_cfg, report, before, teacher.state_dict()


def test_teacher_is_untouched(distilled):
    _, _, _, _, before, after = distilled
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_student_is_smaller(distilled):
    _, t_cfg, s_cfg, report, _, _ = distilled
    assert param_count(s_cfg) < param_count(t_cfg)
    assert report.params.num_scalars() == param_count(s_cfg)


def test_distilled_student_beats_random_student(distilled, overfit_corpus, wordpiece):
    teacher, t_cfg, s_cfg, report, _, _ = distilled
    sched = Schedule(batch_size=4, max_seq=40)
    held = []
    seed = 100
    while len(held) < 50:
        held += make_batches(overfit_corpus.sentences, wordpiece, sched, seed)
        seed += 1
    held = held[:50]
    trained = mean_kl_to_teacher(report.params, s_cfg, teacher, t_cfg, held)
    random = mean_kl_to_teacher(new_model(s_cfg, 0), s_cfg, teacher, t_cfg, held)
    assert trained < random
    assert report.final_kl is not None and report.final_kl < random
