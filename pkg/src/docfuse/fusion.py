"""Tensor-product fusion of aligned text and image token states.

Both modalities are RMS-normalised with one shared weight and dropped out,
then combined as

    out = V(t_n + i_n)
    out = out + out * R(t_n)
    return t + O(out)

so the fused state keeps a residual path to the raw text state ``t``. Setting
``O`` to zero turns the module into the identity on ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, dropout, matmul, rms_norm

DEFAULT_DROPOUT = 0.1
NORM_EPS = 1e-6


@dataclass
class FusionParams:
    V: Tensor
    R: Tensor
    O: Tensor
    w: Tensor
    dropout_rate: float = DEFAULT_DROPOUT
    eps: float = NORM_EPS

    def __post_init__(self):
        d = self.V.shape[0]
        for name in ("V", "R", "O"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"fusion matrix {name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.w.shape != (d,):
            raise DimensionError(f"fusion norm weight must have shape ({d},), got {self.w.shape}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dropout_rate: float = DEFAULT_DROPOUT, dtype=np.float64):
        std = d ** -0.5
        mk = lambda: Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True, dtype=dtype)  # noqa: E731
        return cls(mk(), mk(), mk(), Tensor(np.ones(d), requires_grad=True, dtype=dtype), dropout_rate)

    def named(self) -> dict[str, Tensor]:
        return {"V": self.V, "R": self.R, "O": self.O, "w": self.w}


def fuse(
    text_states: Tensor,
    image_states: Tensor,
    params: FusionParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Fuse ``[..., n, d]`` text and image states; output has the text shape.

    Matrices act on row vectors, i.e. ``V(x)`` is ``x @ V``.
    """
    if text_states.shape != image_states.shape:
        raise DimensionError(f"text {text_states.shape} and image {image_states.shape} states differ")
    if text_states.shape[-1] != params.d:
        raise DimensionError(f"state width {text_states.shape[-1]} != fusion width {params.d}")
    t = dropout(rms_norm(text_states, params.w, params.eps), params.dropout_rate, rng, training)
    i = dropout(rms_norm(image_states, params.w, params.eps), params.dropout_rate, rng, training)
    out = matmul(t + i, params.V)
    out = out + out * matmul(t, params.R)
    return text_states + matmul(out, params.O)
