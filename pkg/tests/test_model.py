import json

import numpy as np
import pytest

from conftest import tiny_config
from gradcheck import model_directional_errors
from lmforge import tensor as T
from lmforge.model import (CheckpointError, ModelConfig, distil_mbert_config, forward, load_checkpoint, mbert_config,
                           new_model, param_count, parameter_shapes, read_manifest, replace_embeddings_for_new_tokenizer,
                           roberta_small_config, save_checkpoint)
from lmforge.training import build_mlm_batch, mlm_nsp_loss, run_forward, unique_parameters
from lmforge.corpus import sample_sentence_pairs


def brute_count(config: ModelConfig) -> int:
    """Independent count assembled layer by layer from the architecture description."""
    d, f, v = config.hidden_size, config.feedforward_size, config.vocab_size
    linear = lambda i, o: i * o + o
    norm = 2 * d
    total = v * d + config.max_positions * d + config.num_segment_types * d + norm
    for _ in range(config.num_layers):
        total += 4 * linear(d, d) + norm + linear(d, f) + linear(f, d) + norm
    total += linear(d, d) + norm + v
    if not config.tie_mlm_head:
        total += v * d
    if config.flavor == "bert":
        total += linear(d, d) + linear(d, 2)
    return total


def test_reference_scale_counts():
    bert, distil, roberta = (param_count(c) for c in (mbert_config(), distil_mbert_config(), roberta_small_config()))
    assert abs(bert / 179e6 - 1) < 0.03
    assert abs(distil / 135e6 - 1) < 0.03
    assert abs(roberta / 84e6 - 1) < 0.03
    assert abs(distil / bert - 0.75) <= 0.02
    assert abs(roberta / bert - 0.47) <= 0.02


@pytest.mark.parametrize("flavor", ["bert", "distil", "roberta"])
@pytest.mark.parametrize("tied", [True, False])
def test_param_count_matches_layout_and_brute_count(flavor, tied):
    cfg = tiny_config(flavor, 97, tie_mlm_head=tied)
    assert param_count(cfg) == brute_count(cfg)
    assert param_count(cfg) == sum(int(np.prod(s)) for _, s in parameter_shapes(cfg))
    assert param_count(cfg) == new_model(cfg, 0).num_scalars()


def test_param_count_equals_scalars_touched_by_optimizer(wordpiece, overfit_corpus):
    cfg = tiny_config("bert", len(wordpiece))
    params = new_model(cfg, 0)
    batch = build_mlm_batch(sample_sentence_pairs(overfit_corpus, 4, 0.5, 0), wordpiece, max_seq=24, seed=0)
    mlm_nsp_loss(run_forward(params, cfg, batch), batch)[2].backward()
    opt = T.Adam(unique_parameters(params), lr=1e-3)
    assert sum(p.grad.size for p in opt.params if p.grad is not None) == param_count(cfg)
    before = {id(p): p.data.copy() for p in opt.params}
    opt.step()
    assert all(p.data.shape == before[id(p)].shape for p in opt.params)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("bert", vocab_size=50, hidden_size=30, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig("distil", vocab_size=50, num_segment_types=2)
    with pytest.raises(ValueError):
        ModelConfig("gpt")


def test_init_is_deterministic_and_well_formed():
    cfg = tiny_config("bert", 60)
    a, b = new_model(cfg, 3), new_model(cfg, 3)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
        if name.endswith(".gain"):
            assert np.all(a[name].data == 1.0)
        elif name.endswith(".bias"):
            assert np.all(a[name].data == 0.0)
        else:
            assert np.abs(a[name].data).max() <= 0.04 + 1e-7
    w = a["embeddings.token"].data
    assert 0.015 < w.std() < 0.02


def test_tied_head_shares_storage():
    cfg = tiny_config("roberta", 40)
    p = new_model(cfg, 0)
    assert p.mlm_projection is p["embeddings.token"]
    p["embeddings.token"].data[7, 3] = 5.0
    assert p.mlm_projection.data[7, 3] == 5.0
    untied = new_model(tiny_config("roberta", 40, tie_mlm_head=False), 0)
    assert untied.mlm_projection is not untied["embeddings.token"]


def test_shapes_and_softmax_rows():
    cfg = tiny_config("bert", 50)
    p = new_model(cfg, 0)
    ids = np.random.default_rng(0).integers(5, 50, size=(3, 7))
    out = forward(p, cfg, ids)
    assert out.hidden.shape == (3, 7, 64)
    assert out.mlm_logits.shape == (3, 7, 50)
    assert out.nsp_logits.shape == (3, 2)
    probs = T.softmax(out.mlm_logits, axis=-1).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
    assert forward(new_model(tiny_config("distil", 50), 0), tiny_config("distil", 50), ids).nsp_logits is None


@pytest.mark.parametrize("flavor", ["bert", "distil", "roberta"])
def test_padding_does_not_change_real_positions(flavor):
    cfg = tiny_config(flavor, 50)
    p = new_model(cfg, 1)
    rng = np.random.default_rng(0)
    ids = rng.integers(5, 50, size=(1, 6))
    padded = np.concatenate([ids, np.zeros((1, 4), dtype=ids.dtype)], axis=1)
    mask = np.array([[1] * 6 + [0] * 4])
    a = forward(p, cfg, ids).hidden.data
    b = forward(p, cfg, padded, mask).hidden.data
    np.testing.assert_allclose(a[0], b[0, :6], atol=1e-5)


def test_attention_rows_are_distributions_and_masked():
    cfg = tiny_config("bert", 50)
    p = new_model(cfg, 2)
    ids = np.random.default_rng(0).integers(5, 50, size=(2, 8))
    mask = np.ones((2, 8))
    mask[1, 5:] = 0
    out = forward(p, cfg, ids, mask, return_attentions=True)
    assert len(out.attentions) == cfg.num_layers
    for a in out.attentions:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)
        assert a[1, :, :, 5:].max() < 1e-6


def test_forward_input_errors():
    cfg = tiny_config("bert", 50, max_positions=8)
    p = new_model(cfg, 0)
    with pytest.raises(ValueError, match="max_positions"):
        forward(p, cfg, np.ones((1, 9), dtype=int))
    with pytest.raises(ValueError, match="out of range"):
        forward(p, cfg, np.array([[1, 50]]))


def test_forward_is_pure():
    cfg = tiny_config("roberta", 50)
    p = new_model(cfg, 0)
    ids = np.arange(5, 15)[None]
    before = p.state_dict()
    a, b = forward(p, cfg, ids).mlm_logits.data, forward(p, cfg, ids).mlm_logits.data
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], p[k].data) for k in p)


@pytest.mark.parametrize("flavor", ["bert", "roberta"])
def test_full_model_gradients(flavor, wordpiece, bpe, overfit_corpus):
    """Finite-difference check of the full 2-layer, 64-dim model (tied embedding included)."""
    tok = wordpiece if flavor == "bert" else bpe
    cfg = tiny_config(flavor, len(tok))
    params = new_model(cfg, 5)
    examples = sample_sentence_pairs(overfit_corpus, 4, 0.5, 1) if flavor == "bert" else overfit_corpus.sentences[:4]
    batch = build_mlm_batch(examples, tok, max_seq=24, seed=2)

    def loss(p, c, b):
        return mlm_nsp_loss(run_forward(p, c, b), b)[2]

    errors, vanishing = model_directional_errors(params, cfg, batch, loss)
    assert "embeddings.token" in errors
    assert max(errors.values()) < 1e-2, sorted(errors.items(), key=lambda kv: -kv[1])[:3]
    assert all(name.endswith("attn.key.bias") for name in vanishing)
    assert all(v < 1e-4 for v in vanishing.values())


def test_checkpoint_round_trip(tmp_path, wordpiece):
    cfg = tiny_config("bert", len(wordpiece))
    p = new_model(cfg, 4)
    save_checkpoint(p, cfg, wordpiece, tmp_path / "ck")
    q, cfg2 = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    ids = np.arange(5, 20)[None]
    assert np.array_equal(forward(p, cfg, ids).mlm_logits.data, forward(q, cfg2, ids).mlm_logits.data)
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["total_bytes"] == 4 * param_count(cfg)
    assert [e["name"] for e in manifest["tensors"]] == [n for n, _ in parameter_shapes(cfg)]
    assert manifest["config"]["flavor"] == "bert" and "cased" in manifest["config"]
    assert set(manifest["tokenizer_files"]) <= {f.name for f in (tmp_path / "ck").iterdir()}


def test_checkpoint_truncation_and_corruption(tmp_path, wordpiece):
    cfg = tiny_config("distil", len(wordpiece))
    save_checkpoint(new_model(cfg, 0), cfg, wordpiece, tmp_path / "ck")
    blob = tmp_path / "ck" / "weights.bin"
    raw = blob.read_bytes()
    blob.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    flipped = bytearray(raw)
    flipped[1234] ^= 0xFF
    blob.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "ck")
    blob.unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_manifest_tamper_detected(tmp_path, wordpiece):
    cfg = tiny_config("distil", len(wordpiece))
    save_checkpoint(new_model(cfg, 0), cfg, wordpiece, tmp_path / "ck")
    mpath = tmp_path / "ck" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["tensors"][0]["shape"] = [1, 1]
    mpath.write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_replace_embeddings_preserves_body():
    cfg = tiny_config("bert", 80)
    p = new_model(cfg, 0)
    q, cfg2 = replace_embeddings_for_new_tokenizer(p, cfg, 120, seed=9)
    assert cfg2.vocab_size == 120
    for name, t in q.items():
        if name in ("embeddings.token", "mlm.decoder.bias"):
            assert t.shape[0] == 120
        else:
            assert np.array_equal(t.data, p[name].data)
    assert not np.array_equal(q["embeddings.token"].data[:80], p["embeddings.token"].data)
    assert param_count(cfg2) - param_count(cfg) == (120 - 80) * (cfg.hidden_size + 1)
    assert q.mlm_projection is q["embeddings.token"]
    with pytest.raises(ValueError):
        replace_embeddings_for_new_tokenizer(p, cfg, 4)
