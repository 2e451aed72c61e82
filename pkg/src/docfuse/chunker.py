"""Blockwise long-context processing: chunk planning, recombination of chunk
encodings, and random chunk dropping for training.

Every chunk is ``l`` prefix (question) tokens followed by up to ``c - l`` input
tokens; consecutive input spans overlap by ``o`` tokens. Chunks are encoded
independently, so encoder attention is block diagonal and its cost grows
linearly with the input length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat

DEFAULT_CORE = 1024
DEFAULT_OVERLAP = 0


@dataclass(frozen=True)
class Chunk:
    index: int  # position in the full (unsampled) plan
    start: int
    end: int
    prefix_len: int

    @property
    def input_len(self) -> int:
        return self.end - self.start

    @property
    def total_len(self) -> int:
        return self.prefix_len + self.input_len

    @property
    def prefix_span(self) -> tuple[int, int]:
        return (0, self.prefix_len)

    @property
    def input_span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class ChunkPlan:
    core_len: int
    overlap: int
    prefix_len: int
    input_len: int
    chunks: tuple[Chunk, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self):
        return iter(self.chunks)

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [c.input_span for c in self.chunks]

    def recombined_len(self) -> int:
        """Rows kept after recombination (see :func:`recombine`)."""
        return sum(len(rows) for rows in self.kept_rows())

    def kept_rows(self) -> list[range]:
        """Row ranges of each chunk output that survive recombination.

        The first chunk keeps everything; later chunks drop their prefix rows
        and any input rows already covered by the previously kept chunk.
        """
        kept = []
        covered = 0
        for k, ch in enumerate(self.chunks):
            if k == 0:
                kept.append(range(0, ch.total_len))
            else:
                skip = max(0, covered - ch.start)
                kept.append(range(ch.prefix_len + skip, ch.total_len))
            covered = max(covered, ch.end)
        return kept

    def to_lines(self) -> list[str]:
        return [
            f"chunk={ch.index} prefix=[0,{ch.prefix_len}) input=[{ch.start},{ch.end}) len={ch.total_len}"
            for ch in self.chunks
        ]


def plan_chunks(input_len: int, c: int = DEFAULT_CORE, o: int = DEFAULT_OVERLAP, l: int = 0) -> ChunkPlan:
    """Cover ``[0, input_len)`` with prefix-replicated chunks of length <= ``c``."""
    if not 0 <= l < c:
        raise ConfigError(f"prefix length must satisfy 0 <= l < c (l={l}, c={c})")
    if not 0 <= o < c - l:
        raise ConfigError(f"overlap must satisfy 0 <= o < c - l (o={o}, c - l={c - l})")
    if input_len < 1:
        raise ConfigError(f"input_len must be >= 1, got {input_len}")
    body = c - l
    chunks = []
    start = 0
    while True:
        end = min(start + body, input_len)
        chunks.append(Chunk(len(chunks), start, end, l))
        if end >= input_len:
            break
        start = end - o
    return ChunkPlan(c, o, l, input_len, tuple(chunks))


def num_chunks(input_len: int, c: int, o: int = 0, l: int = 0) -> int:
    """Closed form for ``len(plan_chunks(...))``."""
    body = c - l
    if input_len <= body:
        return 1
    return 1 + math.ceil((input_len - body) / (body - o))


def recombine(chunk_outputs: Sequence[Tensor], l: int, overlap: int = 0) -> Tensor:
    """Concatenate chunk encodings, dropping the ``l`` prefix rows (and the
    ``overlap`` duplicated input rows) of every chunk but the first."""
    if not chunk_outputs:
        raise DimensionError("recombine needs at least one chunk output")
    parts = []
    for k, out in enumerate(chunk_outputs):
        drop = 0 if k == 0 else l + overlap
        if out.shape[0] < (l if k == 0 else drop):
            raise DimensionError(f"chunk {k} has {out.shape[0]} rows, fewer than the {max(l, drop)} to drop")
        parts.append(out if drop == 0 else out[drop:])
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def sample_training_chunks(plan: ChunkPlan, max_chunks: int, rng: np.random.Generator) -> ChunkPlan:
    """Keep the first chunk plus ``max_chunks - 1`` others drawn uniformly
    without replacement, in their original order."""
    if max_chunks < 1:
        raise ConfigError("max_chunks must be >= 1")
    if len(plan) <= max_chunks:
        return plan
    picks = rng.choice(np.arange(1, len(plan)), size=max_chunks - 1, replace=False)
    keep = [0] + sorted(int(i) for i in picks)
    return ChunkPlan(plan.core_len, plan.overlap, plan.prefix_len, plan.input_len,
                     tuple(plan.chunks[i] for i in keep))
