import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from lmforge.baselines import train_static_embeddings
from lmforge.corpus import WordSimDataset, load_wordsim, bundled
from lmforge.evaluation import (EvaluationError, MaskCountError, TransformerWordVectors, WordVectors,
                                eval_heldout_loss, eval_wordsim, fill_mask, spearman_rho, write_report)
from lmforge.model import load_checkpoint, new_model


def brute_spearman(xs, ys):
    """Rank by counting, then textbook Pearson with exact summation."""
    def ranks(v):
        return [1 + sum(u < a for u in v) + (sum(u == a for u in v) - 1) / 2 for a in v]

    rx, ry = ranks(xs), ranks(ys)
    n = len(xs)
    mx, my = math.fsum(rx) / n, math.fsum(ry) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = math.fsum((a - mx) ** 2 for a in rx)
    vy = math.fsum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


def test_spearman_small_cases():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(spearman_rho([1, 1, 2], [1, 2, 3]) - brute_spearman([1, 1, 2], [1, 2, 3])) <= 1e-12


def test_spearman_matches_oracle_on_random_vectors_with_ties():
    rng = np.random.default_rng(0)
    for i in range(100):
        n = int(rng.integers(2, 40))
        # rounding to few levels forces ties in about half the cases
        xs = rng.normal(size=n).round(0 if i % 2 else 6).tolist()
        ys = rng.normal(size=n).round(1 if i % 3 else 6).tolist()
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        assert abs(spearman_rho(xs, ys) - brute_spearman(xs, ys)) <= 1e-12
        assert spearman_rho(xs, xs) == pytest.approx(1.0, abs=1e-12)
        assert spearman_rho(xs, [-x for x in xs]) == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=3, max_size=30, unique=True),
       st.randoms(use_true_random=False))
def test_spearman_invariant_under_monotone_transform(xs, rnd):
    ys = xs[:]
    rnd.shuffle(ys)
    if len(set(ys)) < 2:
        return
    assert spearman_rho([x ** 3 for x in xs], ys) == pytest.approx(spearman_rho(xs, ys), abs=1e-12)


def test_spearman_errors():
    with pytest.raises(ValueError):
        spearman_rho([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman_rho([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman_rho([1], [1])


def _random_vectors(words, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    return WordVectors({w: rng.normal(size=dim) for w in words})


def test_wordsim_self_consistency():
    words = [f"w{i}" for i in range(12)]
    vecs = _random_vectors(words)
    pairs = [(words[i], words[j]) for i in range(12) for j in range(i + 1, 12)][:30]
    sims = [float(vecs.vector(a) @ vecs.vector(b) / np.linalg.norm(vecs.vector(a)) / np.linalg.norm(vecs.vector(b)))
            for a, b in pairs]
    ds = WordSimDataset(tuple((a, b, s) for (a, b), s in zip(pairs, sims)))
    report = eval_wordsim(vecs, ds)
    assert report.rho == pytest.approx(1.0, abs=1e-12)
    assert report.evaluated + report.skipped == len(ds)


def test_wordsim_random_vectors_near_zero():
    rng = np.random.default_rng(1)
    words = [f"w{i}" for i in range(706)]
    vecs = _random_vectors(words, seed=2)
    ds = WordSimDataset(tuple((words[2 * i], words[2 * i + 1], float(rng.uniform(0, 10))) for i in range(353)))
    assert abs(eval_wordsim(vecs, ds).rho) < 0.2


def test_wordsim_scale_invariance():
    words = [f"w{i}" for i in range(20)]
    vecs = _random_vectors(words, seed=3)
    scaled = WordVectors({w: 7.5 * v for w, v in vecs.vectors.items()})
    rng = np.random.default_rng(4)
    ds = WordSimDataset(tuple((words[i], words[(i * 7 + 3) % 20], float(rng.uniform(0, 10))) for i in range(20)))
    assert eval_wordsim(vecs, ds).rho == eval_wordsim(scaled, ds).rho


def test_wordsim_skip_and_backoff(toy_corpus):
    ds = load_wordsim(bundled("wordsim_twi.tsv"))
    emb = train_static_embeddings(toy_corpus, dim=16, epochs=1, buckets=2000, seed=0)
    backoff = eval_wordsim(emb, ds)
    assert backoff.skipped == 0 and backoff.evaluated == len(ds)
    skip = eval_wordsim(emb, ds, "skip")
    assert skip.evaluated + skip.skipped == len(ds)
    assert skip.skipped == sum(1 for a, b, _ in ds.rows if a not in emb.index or b not in emb.index)


def test_wordsim_too_few_pairs():
    vecs = _random_vectors(["a", "b"])
    ds = WordSimDataset((("a", "b", 1.0), ("a", "zz", 2.0)))
    with pytest.raises(EvaluationError):
        eval_wordsim(vecs, ds)


def test_wordsim_text_vectors_round_trip(tmp_path, toy_corpus):
    emb = train_static_embeddings(toy_corpus, dim=8, epochs=1, buckets=500, seed=0)
    emb.save_text(tmp_path / "v.txt")
    loaded = WordVectors.load(tmp_path / "v.txt")
    w = emb.words[3]
    np.testing.assert_allclose(loaded.vector(w), emb.word_vector(w), atol=1e-6)


def test_transformer_word_vectors(wordpiece):
    cfg = tiny_config("bert", len(wordpiece))
    src = TransformerWordVectors(new_model(cfg, 0), cfg, wordpiece)
    v = src.vector("kofi")
    assert v.shape == (64,) and np.isfinite(v).all()
    assert src.vector("") is None


def test_fill_mask_output_contract(wordpiece):
    cfg = tiny_config("bert", len(wordpiece))
    p = new_model(cfg, 0)
    out = fill_mask(p, cfg, wordpiece, "kofi [MASK] fie", top_k=len(wordpiece))
    scores = [c.score for c in out]
    assert scores == sorted(scores, reverse=True)
    assert abs(sum(scores) - 1.0) <= 1e-5
    assert all(0 < s < 1 for s in scores)
    top = out[0]
    assert top.token == wordpiece.vocab[top.token_id]
    assert len(fill_mask(p, cfg, wordpiece, "kofi [MASK] fie", top_k=3)) == 3


def test_fill_mask_bpe_accepts_bracket_placeholder(bpe):
    cfg = tiny_config("roberta", len(bpe))
    out = fill_mask(new_model(cfg, 0), cfg, bpe, "kofi [MASK] fie", top_k=2)
    assert len(out) == 2


@pytest.mark.parametrize("text", ["kofi kɔɔ fie", "[MASK] kɔɔ [MASK]"])
def test_fill_mask_needs_exactly_one_mask(wordpiece, text):
    cfg = tiny_config("bert", len(wordpiece))
    with pytest.raises(MaskCountError):
        fill_mask(new_model(cfg, 0), cfg, wordpiece, text)


def test_heldout_loss_untrained_near_log_v(wordpiece, overfit_corpus):
    cfg = tiny_config("bert", len(wordpiece))
    loss = eval_heldout_loss(new_model(cfg, 0), cfg, wordpiece, overfit_corpus, max_seq=40)
    assert abs(loss.mlm / math.log(len(wordpiece)) - 1) < 0.15
    assert loss.total == pytest.approx(loss.mlm + loss.nsp, rel=1e-6)
    again = eval_heldout_loss(new_model(cfg, 0), cfg, wordpiece, overfit_corpus, max_seq=40)
    assert again == loss


def test_heldout_loss_drops_after_training(overfit_run, overfit_corpus, wordpiece):
    _, out = overfit_run
    params, cfg = load_checkpoint(out / "epoch-50")
    before = eval_heldout_loss(new_model(cfg, 0), cfg, wordpiece, overfit_corpus, max_seq=40)
    after = eval_heldout_loss(params, cfg, wordpiece, overfit_corpus, max_seq=40)
    assert after.total < before.total


def test_write_report(tmp_path):
    write_report(tmp_path / "r.tsv", [("rho", "0.5"), ("pairs", 3)])
    assert (tmp_path / "r.tsv").read_text() == "rho\t0.5\npairs\t3\n"
