import numpy as np
import pytest

from docfuse.layout import BoundingBox, FeatureGrid, LayoutDocument, Token
from docfuse.model import DocModel, ModelConfig


def random_document(n: int, seed: int = 0, vocab: int = 32, pages: int = 1, grid: bool = True) -> LayoutDocument:
    """Random tokens on random non-degenerate boxes, optionally with a feature grid."""
    rng = np.random.default_rng(seed)
    toks = []
    for k in range(n):
        x0, y0 = rng.uniform(0.0, 0.9, 2)
        page = int(k * pages // max(n, 1))
        toks.append(Token(int(rng.integers(3, vocab)), BoundingBox(x0, y0, x0 + 0.05, y0 + 0.03, page)))
    fg = FeatureGrid(rng.normal(size=(pages, 4, 4, 4))) if grid else None
    return LayoutDocument(toks, fg)


def tiny_config(**kw) -> ModelConfig:
    base = dict(d=16, num_layers_enc=2, num_layers_dec=2, num_heads=2, d_ff=32, vocab_size=32, d_vis=4, c=16,
                dropout=0.0, fusion_dropout=0.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return DocModel(tiny_config(), seed=0)
