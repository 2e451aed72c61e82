"""Calibration metrics on a synthetic, perfectly calibrated predictor.

Each record's correctness is drawn as Bernoulli(confidence), so the expected
calibration error should shrink towards zero as the sample grows.

    python3 demos/calibration.py
"""

import numpy as np

from docfuse.calibration import PredictionRecord, aurc, calibration_plot_data, ece, format_bins

rng = np.random.default_rng(0)
for n in (100, 1000, 10000):
    conf = rng.uniform(0.05, 1.0, n)
    recs = [PredictionRecord([1], [c], float(c), bool(rng.random() < c)) for c in conf]
    print(f"n={n:>6d}  ece {ece(recs):.4f}  aurc {aurc(recs):.4f}")

print("\n" + format_bins(calibration_plot_data(recs, 10)))

three = [PredictionRecord([1], [p], p, ok) for p, ok in ((0.9, True), (0.8, False), (0.6, True))]
print(f"three-record AURC {aurc(three):.4f} (mean of risks 0, 1/2, 1/3)")
