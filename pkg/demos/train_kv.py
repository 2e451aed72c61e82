"""Train the tiny fused model and its text-only twin on the KV corpus.

Marker questions ask for "the value in the highlighted box"; only the image
channel says which box that is, so the text-only twin is stuck at chance
among the page's candidates while the fused model reads it off the grid.

    python3 demos/train_kv.py [workdir]
"""

import sys
import tempfile
import time
from pathlib import Path

from docfuse.calibration import summary
from docfuse.config import build, read_flat
from docfuse.data import CorpusSpec, generate_corpus
from docfuse.pipeline import accuracy, predict, run_configs, train_on_corpus

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
corpus = generate_corpus(build(CorpusSpec, read_flat(CONFIGS / "kv_corpus.cfg")), work / "corpus")
test = corpus.load_split("test")
print(f"corpus: {corpus.manifest['counts']}")

for name in ("kv_train.cfg", "kv_train_text_only.cfg"):
    train_cfg, model_cfg = run_configs(read_flat(CONFIGS / name))
    t0 = time.perf_counter()
    model, log = train_on_corpus(corpus, train_cfg, model_cfg, work / name.removesuffix(".cfg"), log_every=500)
    recs = predict(model, test, zero_image=train_cfg.zero_image)
    m = summary(recs)
    print(f"{name}: {time.perf_counter() - t0:.0f}s, final loss {log[-1]['loss']:.4f}")
    print(f"  exact match {m['exact_match']:.3f}  marker {accuracy(recs, True)[0]:.3f}  "
          f"plain {accuracy(recs, False)[0]:.3f}  ece {m['ece']:.4f}  aurc {m['aurc']:.4f}")
