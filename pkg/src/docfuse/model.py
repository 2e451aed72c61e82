"""Layout-aware encoder-decoder with per-layer text/vision fusion.

Encoder blocks are pre-norm (RMS) residual self-attention with 1D+2D relative
biases, a ReLU feed-forward, then tensor-product fusion with the token's pooled
visual embedding. Long inputs are split into prefix-replicated chunks that are
encoded independently (as one padded batch) and recombined before the decoder
cross-attends them. Input embeddings are tied to the output head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .chunker import ChunkPlan, plan_chunks, sample_training_chunks
from .errors import ConfigError, DimensionError, ValidationError
from .fusion import FusionParams, fuse
from .layout import (
    FULL_PAGE,
    BiasTables,
    BucketConfig,
    LayoutDocument,
    PageEncoder,
    bias_from_buckets,
    causal_bias,
    relative_buckets,
    roi_weight_matrix,
)
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    matmul,
    no_grad,
    relu,
    rms_norm,
    softmax,
    take,
    transpose,
)

PAD, EOS, BOS = 0, 1, 2
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    d: int = 64
    num_layers_enc: int = 2
    num_layers_dec: int = 2
    num_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 128
    d_vis: int = 4
    c: int = 128
    o: int = 0
    l: int | None = None  # prefix length; None means "length of the question"
    buckets_1d: int = 32
    max_distance_1d: int = 128
    buckets_2d: int = 32
    max_distance_2d: int = 1000
    dropout: float = 0.1
    fusion_dropout: float = 0.1
    fusion_every_layer: bool = True
    fusion_after_ffn: bool = True
    recompute_cross_kv: bool = False
    local_positions: bool = True
    raster_channels: int = 0  # >0 enables the convolutional page encoder
    raster_hidden: int = 8
    eps: float = 1e-6
    dtype: str = "float64"

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.fusion_dropout < 1.0:
            raise ConfigError("dropout rates must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def bucket_1d(self) -> BucketConfig:
        return BucketConfig(self.buckets_1d, self.max_distance_1d)

    @property
    def bucket_2d(self) -> BucketConfig:
        return BucketConfig(self.buckets_2d, self.max_distance_2d)

    def fusion_layers(self) -> list[int]:
        return list(range(self.num_layers_enc)) if self.fusion_every_layer else [0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters under dot-separated names."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d, dff, H = cfg.d, cfg.d_ff, cfg.num_heads
    P: dict[str, Tensor] = {}

    def add_p(name, arr):
        P[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

    def normal(shape, std):
        return rng.normal(0.0, std, shape)

    add_p("embed", normal((cfg.vocab_size, d), 1.0))
    add_p("lm_bias", np.zeros(cfg.vocab_size))
    add_p("vis_proj", normal((cfg.d_vis, d), cfg.d_vis ** -0.5))
    for t in ("1d", "h", "v"):
        nb = cfg.buckets_1d if t == "1d" else cfg.buckets_2d
        add_p(f"enc.bias.{t}", normal((H, nb), 0.1))
    add_p("dec.bias.1d", normal((H, cfg.buckets_1d), 0.1))

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            add_p(f"{prefix}.{m}", normal((d, d), d ** -0.5))

    def ffn(prefix):
        add_p(f"{prefix}.wi", normal((d, dff), d ** -0.5))
        add_p(f"{prefix}.wo", normal((dff, d), dff ** -0.5))

    for i in range(cfg.num_layers_enc):
        attn(f"enc.{i}.attn")
        add_p(f"enc.{i}.ln_attn", np.ones(d))
        ffn(f"enc.{i}.ffn")
        add_p(f"enc.{i}.ln_ffn", np.ones(d))
    for i in cfg.fusion_layers():
        fp = FusionParams.init(d, rng, cfg.fusion_dropout, dt)
        for k, v in fp.named().items():
            add_p(f"fusion.{i}.{k}", v.data)
    add_p("enc.ln_final", np.ones(d))
    for i in range(cfg.num_layers_dec):
        attn(f"dec.{i}.self")
        add_p(f"dec.{i}.ln_self", np.ones(d))
        attn(f"dec.{i}.cross")
        add_p(f"dec.{i}.ln_cross", np.ones(d))
        ffn(f"dec.{i}.ffn")
        add_p(f"dec.{i}.ln_ffn", np.ones(d))
    add_p("dec.ln_final", np.ones(d))
    if cfg.raster_channels > 0:
        enc = PageEncoder(cfg.raster_channels, cfg.raster_hidden, cfg.d_vis, rng, dt)
        for k, v in enc.params().items():
            add_p(f"page_encoder.{k}", v.data)
    return P


def fusion_params(P: dict[str, Tensor], layer: int, cfg: ModelConfig) -> FusionParams:
    return FusionParams(
        P[f"fusion.{layer}.V"], P[f"fusion.{layer}.R"], P[f"fusion.{layer}.O"], P[f"fusion.{layer}.w"],
        cfg.fusion_dropout, cfg.eps,
    )


# -- building blocks -----------------------------------------------------
def _split_heads(x: Tensor, H: int) -> Tensor:
    B, n, d = x.shape
    return transpose(x.reshape(B, n, H, d // H), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, n, dh = x.shape
    return transpose(x, (0, 2, 1, 3)).reshape(B, n, H * dh)


def project_kv(kv_states: Tensor, P: dict, prefix: str, H: int) -> tuple[Tensor, Tensor]:
    return _split_heads(matmul(kv_states, P[f"{prefix}.k"]), H), _split_heads(matmul(kv_states, P[f"{prefix}.v"]), H)


def attention(x_q: Tensor, P: dict, prefix: str, bias, H: int, kv_states: Tensor | None = None,
              kv: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Multi-head attention over ``[B, n, d]`` queries; ``bias`` is added to the
    ``[B, H, n, m]`` logits. Keys/values come from ``kv`` when given
    (precomputed projections), else from ``kv_states`` (or ``x_q``)."""
    q = _split_heads(matmul(x_q, P[f"{prefix}.q"]), H)
    if kv is None:
        kv = project_kv(x_q if kv_states is None else kv_states, P, prefix, H)
    k, v = kv
    dh = q.shape[-1]
    logits = matmul(q, k.swapaxes(-1, -2)) * (dh ** -0.5)
    if bias is not None:
        logits = add(logits, bias)
    return matmul(_merge_heads(matmul(softmax(logits, -1), v)), P[f"{prefix}.o"])


def feed_forward(x: Tensor, P: dict, prefix: str) -> Tensor:
    return matmul(relu(matmul(x, P[f"{prefix}.wi"])), P[f"{prefix}.wo"])


def encoder_block_forward(states: Tensor, image_states: Tensor, bias, P: dict, layer_idx: int, cfg: ModelConfig,
                          training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """One encoder layer on ``[B, n, d]`` states.

    ``bias`` is the ``[B, H, n, n]`` (or ``[H, n, n]``) additive logit bias,
    padding mask included.
    """
    if states.shape != image_states.shape:
        raise DimensionError(f"states {states.shape} and image states {image_states.shape} differ")
    i = layer_idx
    fuse_here = i in cfg.fusion_layers()
    h = states
    if fuse_here and not cfg.fusion_after_ffn:
        h = fuse(h, image_states, fusion_params(P, i, cfg), training, rng)
    a = attention(rms_norm(h, P[f"enc.{i}.ln_attn"], cfg.eps), P, f"enc.{i}.attn", bias, cfg.num_heads)
    h = h + dropout(a, cfg.dropout, rng, training)
    f = feed_forward(rms_norm(h, P[f"enc.{i}.ln_ffn"], cfg.eps), P, f"enc.{i}.ffn")
    h = h + dropout(f, cfg.dropout, rng, training)
    if fuse_here and cfg.fusion_after_ffn:
        h = fuse(h, image_states, fusion_params(P, i, cfg), training, rng)
    return h


# -- encoding --------------------------------------------------------------
@dataclass
class EncodedDocument:
    """Recombined encoder output of one document.

    ``token_origin[r]`` is ``(document token index, chunk index)`` for state row
    ``r``; prefix rows use ``-1 - k`` for the k-th question token.
    """

    states: Tensor
    token_origin: list[tuple[int, int]] = field(default_factory=list)
    plan: ChunkPlan | None = None

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class _Seq:
    """One encoder sequence (a chunk, or a whole masked document)."""

    ids: np.ndarray
    pos: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    vis: np.ndarray
    block: np.ndarray  # block id per row; attention only within equal ids


def _doc_visual(doc: LayoutDocument, d_vis: int) -> np.ndarray:
    """Pooled (unprojected) visual features per document token, ``[n, d_vis]``."""
    if doc.feature_grid is None:
        return np.zeros((len(doc), d_vis))
    g = doc.feature_grid
    if g.d_vis != d_vis:
        raise DimensionError(f"feature grid has d_vis={g.d_vis}, model expects {d_vis}")
    return roi_weight_matrix(doc.boxes, (g.pages, g.H, g.W)) @ g.flat()


def _chunk_seq(doc_arrays, question: np.ndarray, start: int, end: int, cfg: ModelConfig, block: int = 0) -> _Seq:
    ids, cx, cy, vis = doc_arrays
    l = len(question)
    n = l + end - start
    if cfg.local_positions:
        pos = np.arange(n)
    else:
        pos = np.concatenate([np.arange(l), l + np.arange(start, end)])
    fx, fy = FULL_PAGE.centroid
    return _Seq(
        ids=np.concatenate([question, ids[start:end]]),
        pos=pos,
        cx=np.concatenate([np.full(l, fx), cx[start:end]]),
        cy=np.concatenate([np.full(l, fy), cy[start:end]]),
        vis=np.concatenate([np.zeros((l, vis.shape[1])), vis[start:end]]),
        block=np.full(n, block),
    )


def _doc_arrays(doc: LayoutDocument, cfg: ModelConfig, vis_override: np.ndarray | None = None):
    cents = np.array([b.centroid for b in doc.boxes]).reshape(-1, 2)
    vis = _doc_visual(doc, cfg.d_vis) if vis_override is None else vis_override
    return doc.ids, cents[:, 0], cents[:, 1], vis


class DocModel:
    """Parameters plus the forward passes that use them."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    # -- helpers -----------------------------------------------------------
    @property
    def enc_tables(self) -> BiasTables:
        P = self.params
        return BiasTables(P["enc.bias.1d"], P["enc.bias.h"], P["enc.bias.v"])

    def _plan(self, doc: LayoutDocument, question: np.ndarray) -> ChunkPlan:
        cfg = self.cfg
        if len(doc) == 0:
            raise ValidationError("cannot encode an empty document")
        l = len(question)
        if cfg.l is not None and cfg.l != l:
            raise ConfigError(f"question has {l} tokens but the model is configured for prefix length {cfg.l}")
        if l >= cfg.c:
            raise ConfigError(f"prefix length {l} must be shorter than the chunk length {cfg.c}")
        return plan_chunks(len(doc), cfg.c, cfg.o, l)

    def _doc_vis(self, doc: LayoutDocument, zero_image: bool):
        cfg = self.cfg
        if zero_image:
            return np.zeros((len(doc), cfg.d_vis))
        if cfg.raster_channels > 0 and "raster" in doc.meta:
            return None  # computed on the tape in _visual_tensor
        return _doc_visual(doc, cfg.d_vis)

    def _run_encoder(self, seqs: Sequence[_Seq], training: bool, rng, vis_tensors=None) -> Tensor:
        """Encode ``seqs`` as one padded batch; returns ``[N, L, d]``."""
        cfg, P = self.cfg, self.params
        dt = cfg.np_dtype
        N = len(seqs)
        L = max(len(s.ids) for s in seqs)
        ids = np.full((N, L), PAD, dtype=np.int64)
        pos = np.zeros((N, L), dtype=np.int64)
        cx = np.zeros((N, L))
        cy = np.zeros((N, L))
        vis = np.zeros((N, L, cfg.d_vis))
        valid = np.zeros((N, L), dtype=bool)
        block = np.full((N, L), -1)
        for k, s in enumerate(seqs):
            n = len(s.ids)
            ids[k, :n], pos[k, :n], cx[k, :n], cy[k, :n], vis[k, :n] = s.ids, s.pos, s.cx, s.cy, s.vis
            valid[k, :n] = True
            block[k, :n] = s.block
        if ids.max() >= cfg.vocab_size or ids.min() < 0:
            raise ValidationError(f"token id outside vocabulary of size {cfg.vocab_size}")
        x = take(P["embed"], ids, axis=0)
        x = dropout(x, cfg.dropout, rng, training)
        vis_t = Tensor(vis.astype(dt))
        if vis_tensors is not None:
            vis_t = vis_tensors
        img = matmul(vis_t, P["vis_proj"])
        b1, bh, bv = relative_buckets(pos, cx, cy, cfg.bucket_1d, cfg.bucket_2d)
        allowed = (block[:, :, None] == block[:, None, :]) & valid[:, None, :]
        mask = np.where(allowed, 0.0, MASK_VALUE).astype(dt)
        bias = bias_from_buckets(self.enc_tables, b1, bh, bv)
        bias = add(bias, np.broadcast_to(mask[:, None], bias.shape).copy())
        h = x
        for i in range(cfg.num_layers_enc):
            h = encoder_block_forward(h, img, bias, P, i, cfg, training, rng)
        return rms_norm(h, P["enc.ln_final"], cfg.eps)

    # -- public API --------------------------------------------------------
    def encode_batch(self, docs: Sequence[LayoutDocument], questions: Sequence, training: bool = False,
                     rng: np.random.Generator | None = None, max_chunks: int | None = None,
                     zero_image: bool = False, plans: Sequence[ChunkPlan] | None = None) -> list[EncodedDocument]:
        """Encode several documents; all their chunks share one padded batch."""
        cfg = self.cfg
        seqs: list[_Seq] = []
        owners: list[tuple[int, ChunkPlan]] = []
        vis_rows: list = []
        for b, (doc, q) in enumerate(zip(docs, questions)):
            q = np.asarray(q, dtype=np.int64)
            plan = self._plan(doc, q) if plans is None else plans[b]
            if max_chunks is not None:
                if rng is None:
                    raise ValueError("chunk sampling needs an explicit generator")
                plan = sample_training_chunks(plan, max_chunks, rng)
            vis = self._doc_vis(doc, zero_image)
            vis_t = None
            if vis is None:
                vis_t, vis = self._raster_visual(doc), np.zeros((len(doc), cfg.d_vis))
            arrays = _doc_arrays(doc, cfg, vis)
            for ch in plan:
                seqs.append(_chunk_seq(arrays, q, ch.start, ch.end, cfg))
                vis_rows.append((vis_t, vis, len(q), ch.start, ch.end))
            owners.append((b, plan))
        vis_tensors = self._assemble_visual(vis_rows, max(len(s.ids) for s in seqs))
        out = self._run_encoder(seqs, training, rng, vis_tensors)
        return self._recombine(out, owners, [len(np.asarray(q)) for q in questions])

    def _raster_visual(self, doc: LayoutDocument) -> Tensor:
        cfg, P = self.cfg, self.params
        enc = PageEncoder.__new__(PageEncoder)
        enc.w1, enc.w2 = P["page_encoder.w1"], P["page_encoder.w2"]
        pages = np.asarray(doc.meta["raster"], dtype=cfg.np_dtype)
        if pages.ndim == 3:
            pages = pages[None]
        if pages.ndim == 2:
            pages = pages[None, :, :, None]
        grids = [enc(Tensor(p)) for p in pages]
        Hg, Wg, dv = grids[0].shape
        grid = concat([g.reshape(1, Hg * Wg, dv) for g in grids], axis=0).reshape(len(grids) * Hg * Wg, dv)
        W = roi_weight_matrix(doc.boxes, (len(grids), Hg, Wg))
        return matmul(Tensor(W.astype(cfg.np_dtype)), grid)

    def _assemble_visual(self, vis_rows, L: int) -> Tensor | None:
        if all(v[0] is None for v in vis_rows):
            return None
        dt = self.cfg.np_dtype
        parts = []
        for vis_t, vis_np, l, start, end in vis_rows:
            n = l + end - start
            zero_pre = Tensor(np.zeros((l, self.cfg.d_vis), dtype=dt))
            body = vis_t[start:end] if vis_t is not None else Tensor(vis_np[start:end].astype(dt))
            rows = concat([zero_pre, body], axis=0) if l else body
            if n < L:
                rows = concat([rows, Tensor(np.zeros((L - n, self.cfg.d_vis), dtype=dt))], axis=0)
            parts.append(rows.reshape(1, L, self.cfg.d_vis))
        return concat(parts, axis=0)

    def _recombine(self, out: Tensor, owners, qlens) -> list[EncodedDocument]:
        N, L, d = out.shape
        flat = out.reshape(N * L, d)
        encoded = []
        row = 0
        for (b, plan), l in zip(owners, qlens):
            kept = plan.kept_rows()
            idx, origin = [], []
            for ch, rows in zip(plan.chunks, kept):
                for r in rows:
                    idx.append((row) * L + r)
                    origin.append((ch.start + r - l, ch.index) if r >= l else (-1 - r, ch.index))
                row += 1
            states = take(flat, np.asarray(idx), axis=0)
            encoded.append(EncodedDocument(states, origin, plan))
        return encoded

    def encode(self, doc: LayoutDocument, prefix_tokens, training: bool = False, rng=None,
               plan_override: ChunkPlan | None = None, zero_image: bool = False) -> EncodedDocument:
        plans = None if plan_override is None else [plan_override]
        return self.encode_batch([doc], [prefix_tokens], training, rng, zero_image=zero_image, plans=plans)[0]

    def encode_masked_full(self, doc: LayoutDocument, prefix_tokens, zero_image: bool = False) -> EncodedDocument:
        """Reference path: all chunks concatenated into one sequence with a
        block-diagonal attention mask, then recombined. Equals :meth:`encode`."""
        cfg = self.cfg
        q = np.asarray(prefix_tokens, dtype=np.int64)
        plan = self._plan(doc, q)
        vis = np.zeros((len(doc), cfg.d_vis)) if zero_image else _doc_visual(doc, cfg.d_vis)
        arrays = _doc_arrays(doc, cfg, vis)
        parts = [_chunk_seq(arrays, q, ch.start, ch.end, cfg, block=k) for k, ch in enumerate(plan)]
        seq = _Seq(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("ids", "pos", "cx", "cy", "vis", "block")))
        out = self._run_encoder([seq], False, None)[0]
        offsets = np.cumsum([0] + [len(p.ids) for p in parts])
        idx, origin = [], []
        for k, (ch, rows) in enumerate(zip(plan.chunks, plan.kept_rows())):
            for r in rows:
                idx.append(offsets[k] + r)
                origin.append((ch.start + r - len(q), k) if r >= len(q) else (-1 - r, k))
        return EncodedDocument(take(out, np.asarray(idx), axis=0), origin, plan)

    def encode_vanilla(self, doc: LayoutDocument, prefix_tokens, zero_image: bool = False) -> Tensor:
        """Whole input in one sequence, no chunking (only valid if it fits)."""
        cfg = self.cfg
        q = np.asarray(prefix_tokens, dtype=np.int64)
        vis = np.zeros((len(doc), cfg.d_vis)) if zero_image else _doc_visual(doc, cfg.d_vis)
        seq = _chunk_seq(_doc_arrays(doc, cfg, vis), q, 0, len(doc), cfg)
        return self._run_encoder([seq], False, None)[0]

    # -- decoding ----------------------------------------------------------
    def _pad_encoded(self, encs: Sequence[EncodedDocument]) -> tuple[Tensor, np.ndarray]:
        M = max(e.length for e in encs)
        dt = self.cfg.np_dtype
        rows, valid = [], np.zeros((len(encs), M), dtype=bool)
        for b, e in enumerate(encs):
            s = e.states
            if e.length < M:
                s = concat([s, Tensor(np.zeros((M - e.length, s.shape[1]), dtype=dt))], axis=0)
            rows.append(s.reshape(1, M, s.shape[1]))
            valid[b, :e.length] = True
        return (rows[0] if len(rows) == 1 else concat(rows, axis=0)), valid

    def decoder_forward(self, dec_ids: np.ndarray, enc_states: Tensor, enc_valid: np.ndarray,
                        training: bool = False, rng=None, cross_kv=None) -> Tensor:
        """Teacher-forced decoder; returns logits ``[B, T, vocab]``."""
        cfg, P = self.cfg, self.params
        dt = cfg.np_dtype
        B, T = dec_ids.shape
        H = cfg.num_heads
        y = dropout(take(P["embed"], dec_ids, axis=0), cfg.dropout, rng, training)
        causal = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, MASK_VALUE).astype(dt)
        self_bias = add(causal_bias(T, P["dec.bias.1d"], cfg.bucket_1d), causal)
        M = enc_states.shape[1]
        cross_mask = np.broadcast_to(np.where(enc_valid, 0.0, MASK_VALUE).astype(dt)[:, None, None, :],
                                     (B, H, T, M)).copy()
        for i in range(cfg.num_layers_dec):
            a = attention(rms_norm(y, P[f"dec.{i}.ln_self"], cfg.eps), P, f"dec.{i}.self", self_bias, H)
            y = y + dropout(a, cfg.dropout, rng, training)
            kv = None if cross_kv is None else cross_kv[i]
            a = attention(rms_norm(y, P[f"dec.{i}.ln_cross"], cfg.eps), P, f"dec.{i}.cross", cross_mask, H,
                          kv_states=enc_states, kv=kv)
            y = y + dropout(a, cfg.dropout, rng, training)
            f = feed_forward(rms_norm(y, P[f"dec.{i}.ln_ffn"], cfg.eps), P, f"dec.{i}.ffn")
            y = y + dropout(f, cfg.dropout, rng, training)
        y = rms_norm(y, P["dec.ln_final"], cfg.eps)
        logits = matmul(y, transpose(P["embed"], (1, 0))) * (cfg.d ** -0.5)
        return add(logits, P["lm_bias"])

    def loss(self, docs, questions, answers, training: bool = False, rng=None, max_chunks: int | None = None,
             zero_image: bool = False) -> Tensor:
        """Mean token cross-entropy of ``answer + [EOS]`` given ``[BOS] + answer``."""
        encs = self.encode_batch(docs, questions, training, rng, max_chunks=max_chunks, zero_image=zero_image)
        enc_states, enc_valid = self._pad_encoded(encs)
        T = 1 + max(len(a) for a in answers)
        dec_in = np.full((len(answers), T), PAD, dtype=np.int64)
        target = np.full((len(answers), T), PAD, dtype=np.int64)
        mask = np.zeros((len(answers), T), dtype=bool)
        for b, a in enumerate(answers):
            a = list(a)
            dec_in[b, :len(a) + 1] = [BOS] + a
            target[b, :len(a) + 1] = a + [EOS]
            mask[b, :len(a) + 1] = True
        logits = self.decoder_forward(dec_in, enc_states, enc_valid, training, rng)
        return cross_entropy(logits, target, mask)

    def generate_batch(self, encs: Sequence[EncodedDocument], max_out: int,
                       recompute_cross_kv: bool | None = None) -> list[tuple[list[int], list[float]]]:
        """Greedy decoding. Returns ``(tokens, scores)`` per document; tokens
        end with EOS when it was produced, and ``scores[k]`` is the softmax
        probability of ``tokens[k]``."""
        if max_out < 1:
            raise ValueError("max_out must be >= 1")
        cfg, P = self.cfg, self.params
        recompute = cfg.recompute_cross_kv if recompute_cross_kv is None else recompute_cross_kv
        with no_grad():
            enc_states, enc_valid = self._pad_encoded(encs)
            cached = None
            if not recompute:
                cached = [project_kv(enc_states, P, f"dec.{i}.cross", cfg.num_heads) for i in range(cfg.num_layers_dec)]
            B = len(encs)
            seqs = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            out_tokens = [[] for _ in range(B)]
            out_scores = [[] for _ in range(B)]
            for _ in range(max_out):
                kv = cached
                if recompute:
                    kv = [project_kv(enc_states, P, f"dec.{i}.cross", cfg.num_heads) for i in range(cfg.num_layers_dec)]
                logits = self.decoder_forward(seqs, enc_states, enc_valid, cross_kv=kv).data[:, -1]
                z = logits - logits.max(axis=-1, keepdims=True)
                probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
                nxt = probs.argmax(axis=-1)
                for b in range(B):
                    if not done[b]:
                        out_tokens[b].append(int(nxt[b]))
                        out_scores[b].append(float(probs[b, nxt[b]]))
                        done[b] = nxt[b] == EOS
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return list(zip(out_tokens, out_scores))

    def generate(self, enc: EncodedDocument, max_out: int, recompute_cross_kv: bool | None = None):
        return self.generate_batch([enc], max_out, recompute_cross_kv)[0]

    def answer(self, doc: LayoutDocument, question, max_out: int = 8, zero_image: bool = False,
               recompute_cross_kv: bool | None = None):
        """Encode and decode one document; returns ``(answer tokens, scores)``
        with EOS stripped from the tokens but its score kept."""
        with no_grad():
            enc = self.encode(doc, question, zero_image=zero_image)
        toks, scores = self.generate(enc, max_out, recompute_cross_kv)
        return strip_eos(toks), scores


def strip_eos(tokens: Sequence[int]) -> list[int]:
    toks = list(tokens)
    return toks[:-1] if toks and toks[-1] == EOS else toks
