"""Layout-aware inputs: relative position buckets, 1D+2D attention biases,
RoI-pooled visual embeddings and the on-disk document record.

Bucketing follows the T5 scheme. The bucket range is split in half by the
sign of the offset (negative offsets in the lower half, positive in the upper
half), the first quarter of each half holds exact offsets and the rest grows
logarithmically up to ``max_distance``, beyond which offsets share the last
bucket. Spatial offsets are page-normalised centroid differences, quantised to
thousandths of a page before bucketing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, concat, matmul, relu, take, transpose

SPATIAL_RESOLUTION = 1000


@dataclass(frozen=True)
class BucketConfig:
    num_buckets: int = 32
    max_distance: int = 128

    def __post_init__(self):
        if self.num_buckets < 4:
            raise ValueError("num_buckets must be >= 4")
        if self.max_distance <= 0:
            raise ValueError("max_distance must be positive")


DEFAULT_1D = BucketConfig(32, 128)
DEFAULT_2D = BucketConfig(32, SPATIAL_RESOLUTION)


def bucket_relative_position(delta, num_buckets: int = 32, max_distance: int = 128, bidirectional: bool = True):
    """Map signed integer offsets (``key - query``) to bucket indices.

    Works elementwise on ints or integer arrays. With ``bidirectional=False``
    positive offsets (attending to the future) collapse onto bucket 0, as in a
    causal decoder.
    """
    rel = np.asarray(delta, dtype=np.int64)
    out = np.zeros_like(rel)
    if bidirectional:
        num_buckets //= 2
        out = out + (rel > 0) * num_buckets
        rel = np.abs(rel)
    else:
        rel = -np.minimum(rel, 0)
    max_exact = num_buckets // 2
    is_small = rel < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(rel, 1) / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    out = out + np.where(is_small, rel, large)
    return int(out) if np.ndim(out) == 0 else out


def quantize_spatial(delta) -> np.ndarray:
    return np.rint(np.asarray(delta, dtype=np.float64) * SPATIAL_RESOLUTION).astype(np.int64)


def bucket_spatial_distance(delta, num_buckets: int = 32, max_distance: int = SPATIAL_RESOLUTION):
    return bucket_relative_position(quantize_spatial(delta), num_buckets, max_distance)


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float
    page: int = 0

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(0.0 <= v <= 1.0 for v in coords):
            raise ValidationError(f"box coordinates must lie in [0, 1]: {coords}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValidationError(f"box corners out of order: {coords}")
        if self.page < 0:
            raise ValidationError("page must be non-negative")

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


FULL_PAGE = BoundingBox(0.0, 0.0, 1.0, 1.0, 0)


@dataclass
class BiasTables:
    bias_1d: Tensor
    bias_h: Tensor
    bias_v: Tensor

    @property
    def num_heads(self) -> int:
        return self.bias_1d.shape[0]

    @classmethod
    def zeros(cls, num_heads: int, nb_1d: int = 32, nb_2d: int = 32) -> "BiasTables":
        return cls(
            Tensor(np.zeros((num_heads, nb_1d)), requires_grad=True),
            Tensor(np.zeros((num_heads, nb_2d)), requires_grad=True),
            Tensor(np.zeros((num_heads, nb_2d)), requires_grad=True),
        )


def relative_buckets(positions, cx, cy, cfg_1d: BucketConfig = DEFAULT_1D, cfg_2d: BucketConfig = DEFAULT_2D):
    """Bucket index arrays ``(b1, bh, bv)`` of shape ``[..., n, n]``.

    Inputs have shape ``[..., n]``; entry ``[i, j]`` buckets ``value_j - value_i``.
    """
    positions = np.asarray(positions, dtype=np.int64)
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    d1 = positions[..., None, :] - positions[..., :, None]
    dx = quantize_spatial(cx)[..., None, :] - quantize_spatial(cx)[..., :, None]
    dy = quantize_spatial(cy)[..., None, :] - quantize_spatial(cy)[..., :, None]
    return (
        bucket_relative_position(d1, cfg_1d.num_buckets, cfg_1d.max_distance),
        bucket_relative_position(dx, cfg_2d.num_buckets, cfg_2d.max_distance),
        bucket_relative_position(dy, cfg_2d.num_buckets, cfg_2d.max_distance),
    )


def bias_from_buckets(tables: BiasTables, b1, bh, bv) -> Tensor:
    """Sum the three table lookups; ``[n, n]`` buckets give ``[H, n, n]``,
    ``[B, n, n]`` buckets give ``[B, H, n, n]``."""
    bias = take(tables.bias_1d, b1, axis=1) + take(tables.bias_h, bh, axis=1) + take(tables.bias_v, bv, axis=1)
    if np.ndim(b1) == 3:
        bias = transpose(bias, (1, 0, 2, 3))
    return bias


def attention_bias(
    positions,
    boxes: list[BoundingBox],
    tables: BiasTables,
    cfg_1d: BucketConfig = DEFAULT_1D,
    cfg_2d: BucketConfig = DEFAULT_2D,
) -> Tensor:
    """Per-head additive attention-logit bias ``[H, n, n]`` from 1D positions
    and box centroids. Cross-page pairs use the same page-frame coordinates."""
    if len(positions) != len(boxes):
        raise DimensionError(f"{len(positions)} positions but {len(boxes)} boxes")
    cents = np.array([b.centroid for b in boxes], dtype=np.float64).reshape(-1, 2)
    b1, bh, bv = relative_buckets(positions, cents[:, 0], cents[:, 1], cfg_1d, cfg_2d)
    return bias_from_buckets(tables, b1, bh, bv)


def causal_bias(n: int, table: Tensor, cfg: BucketConfig = DEFAULT_1D) -> Tensor:
    """Decoder self-attention bias ``[H, n, n]`` (unidirectional buckets)."""
    pos = np.arange(n)
    buckets = bucket_relative_position(pos[None, :] - pos[:, None], cfg.num_buckets, cfg.max_distance, False)
    return take(table, buckets, axis=1)


# -- visual features -----------------------------------------------------
@dataclass
class FeatureGrid:
    """Per-page visual feature maps, ``data`` of shape ``[pages, H, W, d_vis]``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or min(arr.shape[1:3]) < 1:
            raise ValidationError(f"feature grid must be [pages, H, W, d_vis], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("feature grid contains non-finite values")
        self.data = arr

    @property
    def pages(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]

    @property
    def d_vis(self) -> int:
        return self.data.shape[3]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.d_vis)

    def to_record(self) -> dict:
        return {"H": self.H, "W": self.W, "d_vis": self.d_vis, "pages": self.pages,
                "data": self.data.reshape(-1).tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "FeatureGrid":
        shape = (rec.get("pages", 1), rec["H"], rec["W"], rec["d_vis"])
        return cls(np.asarray(rec["data"], dtype=np.float64).reshape(shape))


def roi_weights(box: BoundingBox, H: int, W: int) -> np.ndarray:
    """Area-weighted pooling weights over the ``H x W`` cells, summing to 1."""
    xs = np.arange(W + 1) / W
    ys = np.arange(H + 1) / H
    ox = np.clip(np.minimum(box.x1, xs[1:]) - np.maximum(box.x0, xs[:-1]), 0.0, None)
    oy = np.clip(np.minimum(box.y1, ys[1:]) - np.maximum(box.y0, ys[:-1]), 0.0, None)
    area = np.outer(oy, ox)
    total = area.sum()
    if total <= 0.0:
        cx, cy = box.centroid
        area = np.zeros((H, W))
        area[min(int(cy * H), H - 1), min(int(cx * W), W - 1)] = 1.0
        total = 1.0
    return (area / total).reshape(-1)


def roi_weight_matrix(boxes: list[BoundingBox], grid_shape: tuple[int, int, int]) -> np.ndarray:
    """``[n, pages*H*W]`` pooling matrix; a token reads the grid of its own page
    (the last page when the grid has fewer pages than the document)."""
    pages, H, W = grid_shape
    mat = np.zeros((len(boxes), pages * H * W))
    for k, box in enumerate(boxes):
        p = min(box.page, pages - 1)
        mat[k, p * H * W:(p + 1) * H * W] = roi_weights(box, H, W)
    return mat


def roi_visual_embed(grid, box: BoundingBox, proj: Tensor) -> Tensor:
    """Pool ``grid`` over ``box`` and project ``d_vis -> d``; returns ``[d]``."""
    if isinstance(grid, FeatureGrid):
        grid = Tensor(grid.data)
    pages, H, W, dv = grid.shape
    weights = Tensor(roi_weight_matrix([box], (pages, H, W)), dtype=grid.dtype)
    pooled = matmul(weights, grid.reshape(pages * H * W, dv))
    return matmul(pooled, proj).reshape(proj.shape[1])


class PageEncoder:
    """Two stride-2, 3x3 convolutions (ReLU between) turning a rasterised
    page ``[Hr, Wr, c_in]`` into a feature grid ``[Hr/4, Wr/4, d_vis]``."""

    def __init__(self, c_in: int, c_hidden: int, d_vis: int, rng: np.random.Generator, dtype=np.float64):
        self.w1 = Tensor(rng.normal(0, (9 * c_in) ** -0.5, (9 * c_in, c_hidden)), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(rng.normal(0, (9 * c_hidden) ** -0.5, (9 * c_hidden, d_vis)), requires_grad=True, dtype=dtype)

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2}

    def __call__(self, raster) -> Tensor:
        x = raster if isinstance(raster, Tensor) else Tensor(np.asarray(raster, dtype=self.w1.dtype))
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1)
        return conv3x3_s2(relu(conv3x3_s2(x, self.w1)), self.w2)


def conv3x3_s2(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 2, zero padding 1, via patch gathering."""
    H, W, C = x.shape
    if w.shape[0] != 9 * C:
        raise DimensionError(f"conv weight {w.shape} does not match {C} input channels")
    zr = Tensor(np.zeros((1, W, C), dtype=x.dtype))
    xp = concat([zr, x, zr], axis=0)
    zc = Tensor(np.zeros((H + 2, 1, C), dtype=x.dtype))
    xp = concat([zc, xp, zc], axis=1)
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    r = (np.arange(Ho) * 2)[:, None, None, None] + np.arange(3)[None, None, :, None]
    c = (np.arange(Wo) * 2)[None, :, None, None] + np.arange(3)[None, None, None, :]
    r, c = np.broadcast_arrays(r, c)
    patches = xp[r, c]  # [Ho, Wo, 3, 3, C]
    return matmul(patches.reshape(Ho * Wo, 9 * C), w).reshape(Ho, Wo, w.shape[1])


# -- document record -----------------------------------------------------
@dataclass
class Token:
    id: int
    box: BoundingBox
    text: str = ""


@dataclass
class LayoutDocument:
    tokens: list[Token]
    feature_grid: FeatureGrid | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def ids(self) -> np.ndarray:
        return np.array([t.id for t in self.tokens], dtype=np.int64)

    @property
    def boxes(self) -> list[BoundingBox]:
        return [t.box for t in self.tokens]

    @property
    def num_pages(self) -> int:
        return 1 + max((t.box.page for t in self.tokens), default=0)

    def to_record(self) -> dict:
        rec = {
            "tokens": [{"id": t.id, "text": t.text, "box": t.box.as_list(), "page": t.box.page} for t in self.tokens],
            "meta": self.meta,
        }
        if self.feature_grid is not None:
            rec["feature_grid"] = self.feature_grid.to_record()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "LayoutDocument":
        try:
            tokens = [Token(int(t["id"]), BoundingBox(*map(float, t["box"]), int(t.get("page", 0))), t.get("text", ""))
                      for t in rec["tokens"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed document record: {exc}") from exc
        grid = rec.get("feature_grid")
        return cls(tokens, FeatureGrid.from_record(grid) if grid else None, dict(rec.get("meta", {})))


def write_document(doc: LayoutDocument, path) -> None:
    Path(path).write_text(json.dumps(doc.to_record(), sort_keys=True, separators=(",", ":")) + "\n")


def read_document(path) -> LayoutDocument:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty document file")
    return LayoutDocument.from_record(json.loads(lines[0]))
