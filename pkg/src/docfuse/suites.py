"""Ready-made scalar losses for gradient checking.

Each builder returns ``(loss_fn, params)`` in 64-bit precision with dropout off,
ready for :func:`docfuse.gradcheck.grad_check`.
"""

from __future__ import annotations

import numpy as np

from .fusion import FusionParams, fuse
from .layout import BiasTables, BoundingBox, attention_bias
from .model import DocModel, ModelConfig, attention
from .tensor import Tensor, parameter, rms_norm, tsum


def _weights(rng, shape):
    return Tensor(rng.normal(0.0, 1.0, shape))


def fusion_loss(seed: int = 0, d: int = 6, n: int = 4):
    rng = np.random.default_rng(seed)
    fp = FusionParams.init(d, rng, dropout_rate=0.0)
    fp.w.data[:] = rng.uniform(0.5, 1.5, d)
    t, i = Tensor(rng.normal(size=(2, n, d))), Tensor(rng.normal(size=(2, n, d)))
    proj = _weights(rng, (2, n, d))
    return (lambda: tsum(fuse(t, i, fp) * proj)), {f"fusion.{k}": v for k, v in fp.named().items()}


def rms_norm_loss(seed: int = 0, d: int = 7, n: int = 5):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(n, d)), "x")
    w = parameter(rng.uniform(0.5, 1.5, d), "w")
    proj = _weights(rng, (n, d))
    return (lambda: tsum(rms_norm(x, w, 1e-6) * proj)), {"x": x, "w": w}


def attention_loss(seed: int = 0, d: int = 8, heads: int = 2, n: int = 6):
    """Self-attention with 1D and 2D layout biases; tables are checked too."""
    rng = np.random.default_rng(seed)
    P = {f"attn.{m}": parameter(rng.normal(0.0, d ** -0.5, (d, d)), f"attn.{m}") for m in "qkvo"}
    tables = BiasTables(*(parameter(rng.normal(0.0, 0.5, (heads, 32)), f"bias.{t}") for t in ("1d", "h", "v")))
    boxes = []
    for k in range(n):
        x0, y0 = rng.uniform(0, 0.8, 2)
        boxes.append(BoundingBox(x0, y0, x0 + 0.1, y0 + 0.05, 0))
    x = Tensor(rng.normal(size=(1, n, d)))
    proj = _weights(rng, (1, n, d))

    def loss():
        bias = attention_bias(np.arange(n), boxes, tables)
        return tsum(attention(x, P, "attn", bias, heads) * proj)

    params = dict(P)
    params.update({"bias.1d": tables.bias_1d, "bias.h": tables.bias_h, "bias.v": tables.bias_v})
    return loss, params


def tiny_model_loss(seed: int = 0, d: int = 16, tokens: int = 12):
    """Full encoder-decoder loss of a 2+2-layer model on a 12-token two-chunk document."""
    from .data import CorpusSpec, generate_examples

    spec = CorpusSpec(num_docs=1, pages_per_doc=(2, 2), keys_per_page=(3, 3), vocab_size=40, num_keys=8,
                      visual_marker_fraction=1.0, seed=seed)
    _, doc, qa = generate_examples(spec)[0]
    doc.tokens = doc.tokens[:tokens]
    cfg = ModelConfig(d=d, num_layers_enc=2, num_layers_dec=2, num_heads=2, d_ff=2 * d, vocab_size=40,
                      d_vis=spec.d_vis, c=8, dropout=0.0, fusion_dropout=0.0, dtype="float64")
    model = DocModel(cfg, seed=seed)
    return (lambda: model.loss([doc], [qa.question], [qa.answer])), model.params


SUITES = {
    "fusion": fusion_loss,
    "rms_norm": rms_norm_loss,
    "attention": attention_loss,
    "model": tiny_model_loss,
}
