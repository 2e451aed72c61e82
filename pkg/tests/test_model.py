import numpy as np
import pytest

from docfuse.errors import ConfigError, ValidationError
from docfuse.gradcheck import grad_check
from docfuse.layout import LayoutDocument
from docfuse.model import EOS, DocModel, attention, encoder_block_forward, feed_forward, strip_eos
from docfuse.suites import tiny_model_loss
from docfuse.tensor import Tensor, rms_norm

from conftest import random_document, tiny_config


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(d=10, num_heads=3)
    with pytest.raises(ConfigError):
        tiny_config(vocab_size=1)


def _block_inputs(model, n=5, seed=0):
    rng = np.random.default_rng(seed)
    d, H = model.cfg.d, model.cfg.num_heads
    return Tensor(rng.normal(size=(1, n, d))), Tensor(rng.normal(size=(1, n, d))), Tensor(rng.normal(size=(1, H, n, n)))


def test_block_with_zero_fusion_output_is_plain_block(tiny_model):
    P, cfg = tiny_model.params, tiny_model.cfg
    P["fusion.0.O"].data[:] = 0.0
    x, img, bias = _block_inputs(tiny_model)
    out = encoder_block_forward(x, img, bias, P, 0, cfg).data
    h = x + attention(rms_norm(x, P["enc.0.ln_attn"]), P, "enc.0.attn", bias, cfg.num_heads)
    h = h + feed_forward(rms_norm(h, P["enc.0.ln_ffn"]), P, "enc.0.ffn")
    np.testing.assert_array_equal(out, h.data)


def test_block_identity_when_everything_zero(tiny_model):
    P, cfg = tiny_model.params, tiny_model.cfg
    for k in ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.wi", "ffn.wo"):
        P[f"enc.0.{k}"].data[:] = 0.0
    P["fusion.0.O"].data[:] = 0.0
    x, img, bias = _block_inputs(tiny_model)
    np.testing.assert_array_equal(encoder_block_forward(x, img, bias, P, 0, cfg).data, x.data)


def test_block_hand_trace_d2():
    m = DocModel(tiny_config(d=2, num_heads=1, d_ff=2, num_layers_enc=1, eps=1e-300), seed=0)
    P = m.params
    for k in ("q", "k"):
        P[f"enc.0.attn.{k}"].data[:] = 0.0  # uniform attention
    P["enc.0.attn.v"].data[:] = np.eye(2)
    P["enc.0.attn.o"].data[:] = np.eye(2)
    P["enc.0.ffn.wi"].data[:] = 0.0
    P["fusion.0.O"].data[:] = 0.0
    x = Tensor([[[3.0, 4.0], [0.0, 1.0]]])
    out = encoder_block_forward(x, Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))), P, 0, m.cfg).data[0]
    # normed rows: [3,4]/sqrt(12.5) and [0,1]/sqrt(0.5); uniform attention averages them
    avg = (np.array([3.0, 4.0]) / np.sqrt(12.5) + np.array([0.0, 1.0]) / np.sqrt(0.5)) / 2
    np.testing.assert_allclose(avg, [0.424264069, 1.272792206], atol=1e-9)
    np.testing.assert_allclose(out, [[3.424264069, 5.272792206], [0.424264069, 2.272792206]], atol=1e-9)


def test_encode_single_chunk_shape(tiny_model):
    m = DocModel(tiny_config(c=1024), seed=0)
    enc = m.encode(random_document(10), [3, 4, 5])
    assert enc.states.shape == (13, 16)
    assert [o for o, _ in enc.token_origin] == [-1, -2, -3] + list(range(10))


def test_encode_long_document_shape():
    m = DocModel(tiny_config(d=4, num_heads=1, d_ff=4, num_layers_enc=1, c=1024, vocab_size=8), seed=0)
    doc = random_document(4096, vocab=8, grid=False)
    enc = m.encode(doc, np.full(64, 3))
    assert len(enc.plan) == 5
    assert enc.states.shape == (4160, 4)


def test_encode_empty_document(tiny_model):
    with pytest.raises(ValidationError):
        tiny_model.encode(LayoutDocument([]), [3])


def test_prefix_must_fit(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model.encode(random_document(5), list(range(3, 19)))


def test_encode_deterministic(tiny_model):
    doc = random_document(40, seed=1)
    a = tiny_model.encode(doc, [3, 4]).states.data
    b = tiny_model.encode(doc, [3, 4]).states.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("o,n", [(0, 40), (3, 37)])
def test_chunked_equals_masked_full(o, n):
    m = DocModel(tiny_config(o=o), seed=2)
    doc = random_document(n, seed=3, pages=2)
    a = m.encode(doc, [5, 6]).states.data
    b = m.encode_masked_full(doc, [5, 6]).states.data
    assert len(m.encode(doc, [5, 6]).plan) > 1
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_chunked_equals_masked_full_through_loss():
    m = DocModel(tiny_config(), seed=4)
    doc = random_document(30, seed=5)
    q, ans = [5, 6], [9, 10]
    full = m.loss([doc], [q], [ans]).item()
    enc = m.encode_masked_full(doc, q)
    states, valid = m._pad_encoded([enc])
    from docfuse.model import BOS
    from docfuse.tensor import cross_entropy
    logits = m.decoder_forward(np.array([[BOS] + ans]), states, valid)
    ref = cross_entropy(logits, np.array([ans + [EOS]]), np.ones((1, 3), dtype=bool)).item()
    assert abs(full - ref) < 1e-6


def test_single_chunk_equals_vanilla():
    m = DocModel(tiny_config(c=64), seed=6)
    doc = random_document(20, seed=7)
    a = m.encode(doc, [3]).states.data
    np.testing.assert_allclose(a, m.encode_vanilla(doc, [3]).data, atol=1e-9, rtol=0)


def test_batch_encode_matches_single():
    m = DocModel(tiny_config(), seed=8)
    docs = [random_document(n, seed=n) for n in (7, 33, 20)]
    qs = [[3], [4, 5], [6]]
    batch = m.encode_batch(docs, qs)
    for doc, q, e in zip(docs, qs, batch):
        np.testing.assert_allclose(e.states.data, m.encode(doc, q).states.data, atol=1e-12)


def test_forced_token_generation(tiny_model):
    tiny_model.params["lm_bias"].data[:] = 0.0
    tiny_model.params["lm_bias"].data[7] = 100.0
    enc = tiny_model.encode(random_document(12), [3])
    toks, scores = tiny_model.generate(enc, 5)
    assert toks == [7] * 5
    assert all(0.999 < s <= 1.0 for s in scores)


def test_scores_are_chosen_token_probabilities(tiny_model):
    doc = random_document(12, seed=2)
    enc = tiny_model.encode(doc, [3])
    toks, scores = tiny_model.generate(enc, 3)
    assert all(0.0 < s <= 1.0 for s in scores)
    states, valid = tiny_model._pad_encoded([enc])
    from docfuse.model import BOS
    logits = tiny_model.decoder_forward(np.array([[BOS] + toks[:-1]]), states, valid).data[0]
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    np.testing.assert_allclose(probs.max(-1), scores, rtol=1e-12)
    assert list(probs.argmax(-1)) == toks


def test_recompute_cross_kv_bitwise(tiny_model):
    enc = tiny_model.encode(random_document(25, seed=3), [3, 4])
    assert tiny_model.generate(enc, 6, True) == tiny_model.generate(enc, 6, False)


def test_generate_rejects_zero_max_out(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.generate(tiny_model.encode(random_document(3), [3]), 0)


def test_strip_eos():
    assert strip_eos([5, 6, EOS]) == [5, 6]
    assert strip_eos([5, 6]) == [5, 6]


def test_zero_image_changes_encoding(tiny_model):
    doc = random_document(10, seed=4)
    a = tiny_model.encode(doc, [3]).states.data
    b = tiny_model.encode(doc, [3], zero_image=True).states.data
    assert not np.allclose(a, b)


def test_untrained_uniform_loss():
    m = DocModel(tiny_config(vocab_size=16), seed=0)
    m.params["embed"].data[:] = 0.0  # tied head: zero logits everywhere
    loss = m.loss([random_document(6, vocab=16)], [[3]], [[4, 5]]).item()
    assert abs(loss - np.log(16)) < 1e-12


def test_tiny_model_gradients_sampled():
    loss, params = tiny_model_loss(seed=1)
    rep = grad_check(loss, params, h=1e-5, tol=1e-4, max_entries=4, seed=1)
    assert rep.passed, rep.summary()
    groups = {k.split(".")[0] for k in params}
    assert {"embed", "enc", "dec", "fusion", "vis_proj", "lm_bias"} <= groups
