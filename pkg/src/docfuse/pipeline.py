"""Glue between corpora on disk, training and prediction records."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .calibration import PredictionRecord
from .config import build
from .data import Corpus, CorpusSpec, QAExample, ValuePermutation
from .layout import LayoutDocument
from .model import DocModel, ModelConfig, strip_eos
from .tensor import no_grad
from .training import Example, TrainConfig, fit


def run_configs(values: dict) -> tuple[TrainConfig, ModelConfig]:
    """Split a flat run config: ``model.``-prefixed keys go to the model."""
    model_vals = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
    train_vals = {k: v for k, v in values.items() if not k.startswith("model.")}
    return build(TrainConfig, train_vals), build(ModelConfig, model_vals)


def corpus_spec(corpus: Corpus) -> CorpusSpec:
    spec = dict(corpus.manifest["spec"])
    for k in ("pages_per_doc", "keys_per_page", "value_len"):
        spec[k] = tuple(spec[k])
    return CorpusSpec(**spec)


def training_examples(corpus: Corpus, split: str = "train") -> list[Example]:
    return [Example(doc, qa.question, qa.answer, f"{qa.doc_id}:{qa.question[-1]}")
            for doc, qa in corpus.load_split(split)]


def train_on_corpus(corpus: Corpus, train_cfg: TrainConfig, model_cfg: ModelConfig, out_dir=None,
                    log_every: int = 0) -> tuple[DocModel, list[dict]]:
    model = DocModel(model_cfg, seed=train_cfg.seed)
    augment = ValuePermutation.for_spec(corpus_spec(corpus)) if train_cfg.permute_values else None
    log = fit(training_examples(corpus), model, train_cfg, out_dir, log_every=log_every, augment=augment)
    return model, log


def predict(model: DocModel, items: Sequence[tuple[LayoutDocument, QAExample]], max_out: int = 4,
            zero_image: bool = False, batch_size: int = 32,
            recompute_cross_kv: bool | None = None) -> list[PredictionRecord]:
    """Greedy answers as prediction records.

    The confidence is the minimum per-token score, EOS included.
    """
    out = []
    for k in range(0, len(items), batch_size):
        chunk = items[k:k + batch_size]
        with no_grad():
            encs = model.encode_batch([d for d, _ in chunk], [q.question for _, q in chunk], zero_image=zero_image)
        gens = model.generate_batch(encs, max_out, recompute_cross_kv)
        for (doc, qa), (toks, scores) in zip(chunk, gens):
            answer = strip_eos(toks)
            out.append(PredictionRecord.from_scores(
                answer, scores, answer == list(qa.answer), evidence_page=qa.evidence_page,
                doc_pages=qa.doc_pages, example_id=f"{qa.doc_id}:{qa.question[-1]}",
                target_tokens=list(qa.answer), marker=qa.marker))
    return out


def accuracy(records: Sequence[PredictionRecord], marker: bool | None = None) -> tuple[float, int]:
    sel = [r for r in records if marker is None or r.marker == marker]
    if not sel:
        return float("nan"), 0
    return float(np.mean([r.correct for r in sel])), len(sel)
