"""Analytical memory and FLOP model of long-context encoder-decoder execution.

Nothing here measures a device. Each term is a closed form in the input length
``C`` and the model dimensions, with toggles for the optimisations a long
context needs: blockwise (sparse) attention, mixed precision, memory-efficient
attention, dropping the cross-attention KV cache, nested checkpointing, CPU
offloading of decoder activations, and random chunk dropping.

Per-term constants (floats unless noted; ``len_k`` are chunk lengths)::

    term                  per unit                             stored for
    --------------------  -----------------------------------  ---------------------------
    inputs                INPUT_BYTES_PER_TOKEN = 24 bytes     every token (id, box, page)
    encoder activations   C * (6d + d_ff)                      1 layer (inference),
                                                               L_enc layers (training)
    encoder output        C * d                                always
    attention scores      ATTN_COPIES * H * C^2   (dense)      1 layer (inference),
                          ATTN_COPIES * H * sum(len_k^2)       L_enc layers (training)
    cross-KV cache        2 * L_dec * C * d                    inference; 2 * C * d when
                                                               projections are recomputed
    decoder (training)    L_dec * (out_len * (8d + d_ff)
                          + ATTN_COPIES * H * out_len * C
                          + 2 * C * d)
    weights               P                                    always
    gradients             P                                    training
    optimizer moments     2 * P                                training

``ATTN_COPIES = 3`` counts the logits, the probabilities and the shared
position-bias tensor. Float terms use 4 bytes, 2 under mixed precision;
``inputs`` is not halved, which keeps every total strictly increasing in C.

Inference runs in two phases that never coexist: encoding (activations +
attention) and decoding (cache + decoder working set). The peak is the larger
phase plus the persistent terms. Training keeps everything for the backward
pass, so its terms add up.

Nested checkpointing keeps the embedded input and the last encoder layer, plus
a recompute buffer holding one layer for one chunk (the whole input when
attention is dense). Random chunks shrink the encoded length to
``max_chunks * (c - l) + l`` while the stored input stays full length.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .chunker import plan_chunks
from .errors import ConfigError, InfeasibleError

INPUT_BYTES_PER_TOKEN = 24
ATTN_COPIES = 3
FLOAT_BYTES = 4
DEFAULT_BUDGET = 24 * 2 ** 30
SEARCH_CAP = 2 ** 40

INFERENCE_TOGGLES = ("sparsity", "mixed_precision", "mem_efficient_attention", "no_cross_kv_cache")
TRAINING_TOGGLES = ("sparsity", "mixed_precision", "mem_efficient_attention", "nested_checkpointing",
                    "cpu_offload", "random_chunks")
ALL_TOGGLES = tuple(dict.fromkeys(INFERENCE_TOGGLES + TRAINING_TOGGLES))


@dataclass(frozen=True)
class MemConfig:
    d: int = 1024
    layers_enc: int = 24
    layers_dec: int = 24
    heads: int = 16
    d_ff: int = 2816
    vocab: int = 32128
    c: int = 1024
    o: int = 0
    l: int = 0
    out_len: int = 128
    mode: str = "inference"
    budget_bytes: int = DEFAULT_BUDGET
    sparsity: bool = False
    mixed_precision: bool = False
    mem_efficient_attention: bool = False
    no_cross_kv_cache: bool = False
    nested_checkpointing: bool = False
    cpu_offload: bool = False
    random_chunks: bool = False
    max_chunks: int = 8

    def __post_init__(self):
        if self.mode not in ("inference", "training"):
            raise ConfigError(f"mode must be inference or training, got {self.mode!r}")
        for name in ("d", "layers_enc", "layers_dec", "heads", "d_ff", "vocab", "c", "out_len", "max_chunks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.l < self.c or not 0 <= self.o < self.c - self.l:
            raise ConfigError("chunking needs 0 <= l < c and 0 <= o < c - l")
        allowed = INFERENCE_TOGGLES if self.mode == "inference" else TRAINING_TOGGLES
        bad = [t for t in ALL_TOGGLES if getattr(self, t) and t not in allowed]
        if bad:
            raise ConfigError(f"toggles {bad} are not valid in {self.mode} mode")

    @property
    def bytes_per_float(self) -> int:
        return FLOAT_BYTES // 2 if self.mixed_precision else FLOAT_BYTES

    @property
    def toggles(self) -> list[str]:
        return [t for t in ALL_TOGGLES if getattr(self, t)]

    def with_toggles(self, *names: str, on: bool = True) -> "MemConfig":
        unknown = [n for n in names if n not in ALL_TOGGLES]
        if unknown:
            raise ConfigError(f"unknown toggles {unknown}")
        return replace(self, **{n: on for n in names})

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: MemConfig) -> int:
    """Weights of the fused encoder-decoder (biases and norms included)."""
    d, f = cfg.d, cfg.d_ff
    enc_layer = 4 * d * d + 2 * d * f + 3 * d * d + 3 * d  # attention, FFN, fusion, norms
    dec_layer = 8 * d * d + 2 * d * f + 3 * d
    bias_tables = 4 * cfg.heads * 32
    return cfg.vocab * d + cfg.vocab + cfg.layers_enc * enc_layer + cfg.layers_dec * dec_layer + 2 * d + bias_tables


def chunk_lengths(C: int, cfg: MemConfig) -> list[int]:
    """Encoded sequence lengths: one chunk of ``C`` when dense, else the chunk plan."""
    if not cfg.sparsity:
        return [C]
    body = cfg.c - cfg.l
    if C <= body:
        return [C + cfg.l]
    # closed form of plan_chunks: full chunks plus a shorter tail
    step = body - cfg.o
    n = 1 + -(-(C - body) // step)
    tail = C - body - (n - 2) * step
    return [cfg.c] * (n - 1) + [tail + cfg.o + cfg.l]


def encoded_length(C: int, cfg: MemConfig) -> int:
    """Tokens entering the encoder after random chunk dropping (training only)."""
    if cfg.random_chunks:
        return min(C, cfg.max_chunks * (cfg.c - cfg.l) + cfg.l)
    return C


def estimate_memory(C: int, cfg: MemConfig) -> dict[str, float]:
    """Peak bytes by term; ``total`` is what must fit in ``budget_bytes``."""
    if C < 1:
        raise ConfigError("C must be >= 1")
    b = cfg.bytes_per_float
    d, H, f = cfg.d, cfg.heads, cfg.d_ff
    P = param_count(cfg)
    E = encoded_length(C, cfg)
    lens = chunk_lengths(E, cfg)
    n_enc = sum(lens)
    per_layer_act = n_enc * (6 * d + f)
    per_layer_attn = 0 if cfg.mem_efficient_attention else ATTN_COPIES * H * sum(n * n for n in lens)
    out = {
        "weights": P * b,
        "inputs": C * INPUT_BYTES_PER_TOKEN,
        "encoder_output": E * d * b,
        "gradients": 0,
        "optimizer": 0,
        "activations": 0,
        "attention": 0,
        "kv_cache": 0,
        "decoder": 0,
    }
    if cfg.mode == "inference":
        kv_layers = 1 if cfg.no_cross_kv_cache else cfg.layers_dec
        kv = 2 * kv_layers * E * d * b
        dec = (cfg.out_len * (8 * d + f) * cfg.layers_dec + H * E) * b
        enc_phase = (per_layer_act + per_layer_attn) * b
        dec_phase = kv + dec
        if enc_phase >= dec_phase:
            out["activations"], out["attention"] = per_layer_act * b, per_layer_attn * b
        else:
            out["kv_cache"], out["decoder"] = kv, dec
    else:
        L = cfg.layers_enc
        out["gradients"] = P * b
        out["optimizer"] = 2 * P * b
        if cfg.nested_checkpointing:
            biggest = max(lens)
            buf_act = biggest * (6 * d + f)
            buf_attn = 0 if cfg.mem_efficient_attention else ATTN_COPIES * H * biggest * biggest
            out["activations"] = (E * d + per_layer_act + buf_act) * b
            out["attention"] = (per_layer_attn + buf_attn) * b
        else:
            out["activations"] = L * per_layer_act * b
            out["attention"] = L * per_layer_attn * b
        if not cfg.cpu_offload:
            attn_copies = 0 if cfg.mem_efficient_attention else ATTN_COPIES
            out["decoder"] = cfg.layers_dec * (cfg.out_len * (8 * d + f) + attn_copies * H * cfg.out_len * E
                                               + 2 * E * d) * b
    out["total"] = sum(out.values())
    return out


def max_context(cfg: MemConfig) -> int:
    """Largest ``C`` whose estimated total fits the budget (capped at 2**40)."""
    fits = lambda n: estimate_memory(n, cfg)["total"] <= cfg.budget_bytes  # noqa: E731
    if not fits(1):
        raise InfeasibleError(
            f"budget {cfg.budget_bytes} B is below the footprint at C=1 ({estimate_memory(1, cfg)['total']:.0f} B)")
    lo = 1
    hi = 2
    while hi <= SEARCH_CAP and fits(hi):
        lo, hi = hi, hi * 2
    if hi > SEARCH_CAP:
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def estimate_flops(C: int, out_len: int, cfg: MemConfig) -> dict[str, float]:
    """Forward FLOPs (multiply-add = 2) for encoding ``C`` tokens and
    greedily generating ``out_len`` tokens."""
    if C < 1 or out_len < 1:
        raise ConfigError("C and out_len must be >= 1")
    d, f, H = cfg.d, cfg.d_ff, cfg.heads
    lens = chunk_lengths(C, cfg)
    n_enc = sum(lens)
    enc_dense = cfg.layers_enc * n_enc * 2 * (4 * d * d + 2 * d * f + 3 * d * d)
    enc_attn = cfg.layers_enc * 4 * d * sum(n * n for n in lens)
    M = n_enc if not cfg.sparsity else C + cfg.l
    kv_proj = cfg.layers_dec * 2 * 2 * M * d * d
    if cfg.no_cross_kv_cache:
        kv_proj *= out_len
    dec_dense = cfg.layers_dec * out_len * 2 * (6 * d * d + 2 * d * f)
    dec_attn = cfg.layers_dec * 4 * d * (out_len * M + out_len * (out_len + 1) // 2)
    head = out_len * 2 * d * cfg.vocab
    out = {
        "encoder_matmul": float(enc_dense),
        "encoder_attention": float(enc_attn),
        "cross_kv_projection": float(kv_proj),
        "decoder": float(dec_dense + dec_attn),
        "head": float(head),
    }
    out["total"] = sum(out.values())
    return out


INFERENCE_ROWS = ("sparsity", "mixed_precision", "mem_efficient_attention", "no_cross_kv_cache")
TRAINING_ROWS = ("sparsity", "mixed_precision", "mem_efficient_attention", "nested_checkpointing",
                 "cpu_offload", "random_chunks")


def sweep(cfg: MemConfig) -> list[tuple[str, int]]:
    """Max context as optimisations are switched on cumulatively, in order."""
    rows = INFERENCE_ROWS if cfg.mode == "inference" else TRAINING_ROWS
    cur = cfg.with_toggles(*ALL_TOGGLES, on=False)
    out = [("vanilla", max_context(cur))]
    for name in rows:
        cur = cur.with_toggles(name)
        out.append((f"+ {name}", max_context(cur)))
    return out


def format_breakdown(C: int, cfg: MemConfig) -> str:
    br = estimate_memory(C, cfg)
    gib = 2 ** 30
    lines = [f"{k:>16s} {v / gib:12.4f} GiB" for k, v in br.items()]
    return "\n".join(lines) + "\n"


def _check_plan(C: int, cfg: MemConfig) -> bool:
    """Debug aid: the closed-form chunk lengths agree with the chunk planner."""
    if not cfg.sparsity:
        return True
    plan = plan_chunks(C, cfg.c, cfg.o, cfg.l)
    return [ch.total_len for ch in plan] == chunk_lengths(C, cfg)
