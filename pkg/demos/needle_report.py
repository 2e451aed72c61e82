"""Accuracy by evidence position on a 25-page needle corpus.

One answer-bearing box is planted on a uniformly chosen page among filler
pages; the report groups held-out accuracy into 5-page buckets.

    python3 demos/needle_report.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from docfuse.calibration import evidence_position_report, format_buckets
from docfuse.data import CorpusSpec, generate_corpus
from docfuse.model import ModelConfig
from docfuse.pipeline import predict, train_on_corpus
from docfuse.training import TrainConfig

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
spec = CorpusSpec(num_docs=600, needle_mode=True, pages_per_doc=(25, 25), keys_per_page=(2, 3), num_keys=25,
                  test_fraction=0.3, seed=5)
corpus = generate_corpus(spec, work / "needle")
model, _ = train_on_corpus(corpus, TrainConfig(total_steps=500, batch_size=16, optimizer="adamw",
                                               permute_values=True, seed=0),
                           ModelConfig(dtype="float32", dropout=0.0, fusion_dropout=0.0), log_every=100)
recs = predict(model, corpus.load_split("test"))
print(format_buckets(evidence_position_report(recs, 5)))
