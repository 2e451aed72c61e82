"""Answer confidence and calibration metrics.

An answer's confidence is the minimum of its per-token generation
probabilities. Calibration is summarised by the expected calibration error over
equal-width confidence bins and by the area under the risk-coverage curve.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class PredictionRecord:
    answer_tokens: list[int]
    token_scores: list[float]
    confidence: float
    correct: bool
    evidence_page: int | None = None
    doc_pages: int | None = None
    example_id: str = ""
    target_tokens: list[int] | None = None
    marker: bool = False

    @classmethod
    def from_scores(cls, answer_tokens, token_scores, correct, **kw) -> "PredictionRecord":
        return cls(list(answer_tokens), [float(s) for s in token_scores], answer_confidence(token_scores),
                   bool(correct), **kw)

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "PredictionRecord":
        try:
            return cls(**rec)
        except TypeError as exc:
            raise ValidationError(f"malformed prediction record: {exc}") from exc


def answer_confidence(token_scores: Sequence[float], method: str = "min") -> float:
    """Aggregate per-token scores; ``method`` is ``"min"`` or ``"geomean"``."""
    s = np.asarray(token_scores, dtype=np.float64)
    if s.size == 0:
        raise ValidationError("token_scores must be non-empty")
    if np.any(~np.isfinite(s)) or np.any(s <= 0) or np.any(s > 1):
        raise ValidationError("token scores must lie in (0, 1]")
    if method == "min":
        return float(s.min())
    if method == "geomean":
        return float(np.exp(np.mean(np.log(s))))
    raise ValidationError(f"unknown aggregation {method!r}")


def _arrays(records: Sequence[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    if len(records) == 0:
        raise ValidationError("no prediction records")
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise ValidationError("confidences must lie in [0, 1]")
    correct = np.array([bool(r.correct) for r in records], dtype=np.float64)
    return conf, correct


def bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    """Right-closed equal-width bins ``(k/B, (k+1)/B]``; confidence 0 joins bin 0.

    Edges are the correctly rounded doubles ``k/B``, so a confidence written
    as exactly ``k/B`` (e.g. 0.1, 0.3) lands in bin ``k - 1``.
    """
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    edges = np.arange(num_bins + 1) / num_bins
    return np.clip(np.digitize(conf, edges, right=True) - 1, 0, num_bins - 1)


@dataclass(frozen=True)
class BinRow:
    bin: int
    lower: float
    upper: float
    mean_confidence: float
    accuracy: float
    count: int


def calibration_plot_data(records: Sequence[PredictionRecord], num_bins: int = 10) -> list[BinRow]:
    """One row per populated bin."""
    conf, correct = _arrays(records)
    idx = bin_index(conf, num_bins)
    rows = []
    for k in range(num_bins):
        sel = idx == k
        n = int(sel.sum())
        if n:
            rows.append(BinRow(k, k / num_bins, (k + 1) / num_bins, float(conf[sel].mean()),
                               float(correct[sel].mean()), n))
    return rows


def ece(records: Sequence[PredictionRecord], num_bins: int = 10) -> float:
    n = len(records)
    rows = calibration_plot_data(records, num_bins)
    return float(sum(r.count / n * abs(r.accuracy - r.mean_confidence) for r in rows))


def risk_coverage(records: Sequence[PredictionRecord]) -> tuple[list[tuple[float, float]], float]:
    """Risk at every coverage ``i/N`` after a stable sort by descending confidence."""
    conf, correct = _arrays(records)
    order = np.argsort(-conf, kind="stable")
    errors = np.cumsum(1.0 - correct[order])
    n = len(order)
    counts = np.arange(1, n + 1)
    risks = errors / counts
    curve = [(float(c / n), float(r)) for c, r in zip(counts, risks)]
    return curve, float(risks.mean())


def aurc(records: Sequence[PredictionRecord]) -> float:
    return risk_coverage(records)[1]


@dataclass(frozen=True)
class BucketRow:
    bucket: int
    first_page: int
    last_page: int
    accuracy: float
    count: int


def evidence_position_report(records: Sequence[PredictionRecord], bucket_pages: int = 5) -> list[BucketRow]:
    """Mean correctness grouped by ``evidence_page // bucket_pages``.

    Buckets between the first and last populated one are listed even when
    empty (accuracy NaN, count 0) so the table keeps a regular page axis.
    """
    if bucket_pages < 1:
        raise ValidationError("bucket_pages must be >= 1")
    rows = [r for r in records if r.evidence_page is not None]
    if not rows:
        raise ValidationError("no record carries an evidence_page")
    b = np.array([r.evidence_page // bucket_pages for r in rows])
    ok = np.array([bool(r.correct) for r in rows], dtype=np.float64)
    out = []
    for k in range(int(b.min()), int(b.max()) + 1):
        sel = b == k
        n = int(sel.sum())
        out.append(BucketRow(k, k * bucket_pages, (k + 1) * bucket_pages - 1,
                             float(ok[sel].mean()) if n else math.nan, n))
    return out


def summary(records: Sequence[PredictionRecord], num_bins: int = 10) -> dict:
    conf, correct = _arrays(records)
    return {
        "count": len(records),
        "exact_match": float(correct.mean()),
        "mean_confidence": float(conf.mean()),
        "ece": ece(records, num_bins),
        "aurc": aurc(records),
        "ece_bins": num_bins,
    }


# -- line-delimited record files ---------------------------------------------
def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{n}: {exc}") from exc
            out.append(PredictionRecord.from_record(rec))
    return out


def format_bins(rows: Sequence[BinRow]) -> str:
    lines = ["bin\tlower\tupper\tmean_conf\taccuracy\tcount"]
    lines += [f"{r.bin}\t{r.lower:.2f}\t{r.upper:.2f}\t{r.mean_confidence:.6f}\t{r.accuracy:.6f}\t{r.count}"
              for r in rows]
    return "\n".join(lines) + "\n"


def format_curve(curve: Sequence[tuple[float, float]]) -> str:
    return "coverage\trisk\n" + "".join(f"{c:.6f}\t{r:.6f}\n" for c, r in curve)


def format_buckets(rows: Sequence[BucketRow]) -> str:
    lines = ["bucket\tpages\taccuracy\tcount"]
    lines += [f"{r.bucket}\t{r.first_page}-{r.last_page}\t{r.accuracy:.4f}\t{r.count}" for r in rows]
    return "\n".join(lines) + "\n"
