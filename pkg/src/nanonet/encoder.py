"""Miniature encoder-only transformer on packed (unpadded) token streams.

Layers alternate global and fixed-window local attention, each with its own
rotary-embedding base; feed-forward blocks are gated (GeGLU); the residual
stream adds both sublayer outputs. Classification reads the first (CLS)
token of each sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import tensor as T
from .errors import ConfigError, EmptyBatchError, ShapeError
from .tensor import Tensor

CLS_ID = 256
UNK_ID = 257
VOCAB_SIZE = 258

CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_GLOBAL_THETA = 160_000.0
DEFAULT_LOCAL_THETA = 10_000.0
DEFAULT_LOCAL_WINDOW = 128


@dataclass(frozen=True)
class AttentionKind:
    """Per-layer attention regime: full ("global") or sliding-window ("local").

    Each regime carries its own rotary base; defaults are 160000 for global
    layers and 10000 with a 128-token window for local ones.
    """

    kind: str
    rope_theta: float
    window_size: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("global", "local"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.rope_theta <= 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")
        if self.kind == "local":
            if self.window_size is None or self.window_size < 1:
                raise ConfigError(f"local attention needs window_size >= 1, got {self.window_size}")
        elif self.window_size is not None:
            raise ConfigError("global attention takes no window_size")

    @staticmethod
    def global_attention(rope_theta: float = DEFAULT_GLOBAL_THETA) -> "AttentionKind":
        return AttentionKind("global", rope_theta)

    @staticmethod
    def local_attention(
        window_size: int = DEFAULT_LOCAL_WINDOW,
        rope_theta: float = DEFAULT_LOCAL_THETA,
    ) -> "AttentionKind":
        return AttentionKind("local", rope_theta, window_size)


def default_schedule(
    n_layers: int,
    global_every: int = 3,
    window_size: int = DEFAULT_LOCAL_WINDOW,
    global_theta: float = DEFAULT_GLOBAL_THETA,
    local_theta: float = DEFAULT_LOCAL_THETA,
) -> list[AttentionKind]:
    """Global attention at layer indices divisible by `global_every`,
    sliding-window local attention everywhere else."""
    if global_every < 1:
        raise ConfigError(f"global_every must be >= 1, got {global_every}")
    return [
        AttentionKind.global_attention(global_theta)
        if l % global_every == 0
        else AttentionKind.local_attention(window_size, local_theta)
        for l in range(n_layers)
    ]


@dataclass
class EncoderConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int = VOCAB_SIZE
    n_classes: int = 2
    attention_schedule: list[AttentionKind] | None = None
    global_every: int = 3
    token_dropout: float = 0.2
    hidden_dropout: float = 0.1
    norm_bias: bool = True
    local_window: int = DEFAULT_LOCAL_WINDOW

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_head % 2 != 0:
            raise ConfigError(f"d_head must be even for rotary pairs, got {self.d_head}")
        if self.attention_schedule is None:
            self.attention_schedule = default_schedule(
                self.n_layers, self.global_every, self.local_window
            )
        if len(self.attention_schedule) != self.n_layers:
            raise ConfigError(
                f"attention_schedule has {len(self.attention_schedule)} entries "
                f"for {self.n_layers} layers"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "attention_schedule": [
                {"kind": k.kind, "rope_theta": k.rope_theta, "window_size": k.window_size}
                for k in self.attention_schedule
            ],
            "global_every": self.global_every,
            "token_dropout": self.token_dropout,
            "hidden_dropout": self.hidden_dropout,
            "norm_bias": self.norm_bias,
            "local_window": self.local_window,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        sched = d.get("attention_schedule")
        if sched is not None:
            d["attention_schedule"] = [
                AttentionKind(s["kind"], s["rope_theta"], s.get("window_size"))
                for s in sched
            ]
        return EncoderConfig(**d)


@dataclass
class PackedBatch:
    """Unpadded token stream for one forward pass.

    `cu_seqlens[i]:cu_seqlens[i+1]` delimits sequence i inside `token_ids`;
    `positions` restart at 0 for every sequence.
    """

    token_ids: np.ndarray
    cu_seqlens: np.ndarray
    positions: np.ndarray
    labels: list[int] | None = None

    def __post_init__(self) -> None:
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.cu_seqlens = np.asarray(self.cu_seqlens, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.cu_seqlens[0] != 0 or self.cu_seqlens[-1] != len(self.token_ids):
            raise ShapeError(
                f"cu_seqlens {self.cu_seqlens.tolist()} does not span "
                f"{len(self.token_ids)} tokens"
            )
        if (np.diff(self.cu_seqlens) <= 0).any():
            raise ShapeError("cu_seqlens must be strictly increasing")

    @property
    def n_sequences(self) -> int:
        return len(self.cu_seqlens) - 1

    @property
    def total_tokens(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def seq_ids(self) -> np.ndarray:
        """Sequence index of every token."""
        return np.repeat(np.arange(self.n_sequences), np.diff(self.cu_seqlens))

    @property
    def cls_indices(self) -> np.ndarray:
        return self.cu_seqlens[:-1]


@dataclass
class ForwardTrace:
    """Everything a forward pass exposes for losses and analysis."""

    hidden_states: list[Tensor]
    attention_probs: list[list[Tensor]]
    logits: Tensor
    allowed: list[np.ndarray] = field(default_factory=list)


def tokenize(text: str, max_len: int = 64) -> list[int]:
    """Character-level ids: 256 = CLS (always first), codepoints above 255
    map to 257, everything else is its own byte value. Truncates to max_len."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    ids = [CLS_ID]
    for ch in text:
        cp = ord(ch)
        ids.append(cp if cp < 256 else UNK_ID)
    return ids[:max_len]


def pack_sequences(
    seqs: list[list[int]], labels: list[int] | None = None
) -> PackedBatch:
    """Concatenate sequences into one stream with boundary offsets."""
    if not seqs:
        raise EmptyBatchError("cannot pack an empty list of sequences")
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise EmptyBatchError(f"sequence {i} is empty")
    token_ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
    lengths = [len(s) for s in seqs]
    cu = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=cu[1:])
    positions = np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])
    if labels is not None and len(labels) != len(seqs):
        raise ShapeError(f"{len(labels)} labels for {len(seqs)} sequences")
    return PackedBatch(token_ids, cu, positions, labels)


def unpack_sequences(batch: PackedBatch) -> list[list[int]]:
    cu = batch.cu_seqlens
    return [batch.token_ids[cu[i] : cu[i + 1]].tolist() for i in range(batch.n_sequences)]


def build_mask(batch: PackedBatch, kind: AttentionKind) -> Tensor:
    """Additive attention mask over the packed stream: 0 where attention is
    allowed (same sequence, and within the window for local kinds), else -inf."""
    window = kind.window_size if kind.kind == "local" else 0
    return Tensor(K.build_mask(batch.seq_ids, batch.positions, window or 0))


def rope_angles(positions: np.ndarray, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ConfigError(f"rotary embedding needs even d_head, got {d_head}")
    half = d_head // 2
    inv_freq = theta ** (-2.0 * np.arange(half) / d_head)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions: np.ndarray, theta: float) -> Tensor:
    """Rotate each (even, odd) coordinate pair of row t by
    positions[t] * theta^(-2i/d_head); norms are preserved."""
    cos, sin = rope_angles(positions, x.shape[1], theta)
    return T.rope_rotate(x, cos, sin)


@dataclass
class Param:
    """Named tensor with a role tag; the unit of freezing policy."""

    name: str
    role: str  # weight | bias | embedding | head
    tensor: Tensor

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.tensor.requires_grad = bool(value)


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class FFNParams:
    wf: Tensor
    bf: Tensor
    wp: Tensor
    bp: Tensor


@dataclass
class LayerParams:
    attn: AttentionParams
    ffn: FFNParams
    attn_norm_gain: Tensor
    attn_norm_bias: Tensor | None
    ffn_norm_gain: Tensor
    ffn_norm_bias: Tensor | None


class EncoderModel:
    """Parameter container plus the layer wiring for one encoder."""

    def __init__(self, config: EncoderConfig, params: dict[str, Param]):
        self.config = config
        self.params = params

    @staticmethod
    def init(config: EncoderConfig, seed: int = 0) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff
        params: dict[str, Param] = {}

        def w(name: str, shape: tuple[int, ...], role: str, std: float) -> None:
            t = Tensor(rng.normal(0.0, std, shape), requires_grad=True)
            params[name] = Param(name, role, t)

        def zeros(name: str, shape: tuple[int, ...], role: str) -> None:
            params[name] = Param(name, role, Tensor(np.zeros(shape), requires_grad=True))

        def ones(name: str, shape: tuple[int, ...], role: str) -> None:
            params[name] = Param(name, role, Tensor(np.ones(shape), requires_grad=True))

        w("embedding.table", (config.vocab_size, d), "embedding", 0.02)
        for l in range(config.n_layers):
            p = f"layers.{l}"
            std = (2.0 / (d + d)) ** 0.5
            for m in ("wq", "wk", "wv", "wo"):
                w(f"{p}.attn.{m}", (d, d), "weight", std)
            for m in ("bq", "bk", "bv", "bo"):
                zeros(f"{p}.attn.{m}", (d,), "bias")
            ones(f"{p}.attn.norm_gain", (d,), "weight")
            if config.norm_bias:
                zeros(f"{p}.attn.norm_bias", (d,), "bias")
            w(f"{p}.ffn.wf", (d, 2 * f), "weight", (2.0 / (d + 2 * f)) ** 0.5)
            zeros(f"{p}.ffn.bf", (2 * f,), "bias")
            w(f"{p}.ffn.wp", (f, d), "weight", (2.0 / (f + d)) ** 0.5)
            zeros(f"{p}.ffn.bp", (d,), "bias")
            ones(f"{p}.ffn.norm_gain", (d,), "weight")
            if config.norm_bias:
                zeros(f"{p}.ffn.norm_bias", (d,), "bias")
        w("head.w", (d, config.n_classes), "head", (2.0 / (d + config.n_classes)) ** 0.5)
        zeros("head.b", (config.n_classes,), "head")
        return EncoderModel(config, params)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def layer_params(self, l: int) -> LayerParams:
        p = f"layers.{l}"
        g = self.tensor
        cfg = self.config
        return LayerParams(
            attn=AttentionParams(
                wq=g(f"{p}.attn.wq"), bq=g(f"{p}.attn.bq"),
                wk=g(f"{p}.attn.wk"), bk=g(f"{p}.attn.bk"),
                wv=g(f"{p}.attn.wv"), bv=g(f"{p}.attn.bv"),
                wo=g(f"{p}.attn.wo"), bo=g(f"{p}.attn.bo"),
            ),
            ffn=FFNParams(
                wf=g(f"{p}.ffn.wf"), bf=g(f"{p}.ffn.bf"),
                wp=g(f"{p}.ffn.wp"), bp=g(f"{p}.ffn.bp"),
            ),
            attn_norm_gain=g(f"{p}.attn.norm_gain"),
            attn_norm_bias=g(f"{p}.attn.norm_bias") if cfg.norm_bias else None,
            ffn_norm_gain=g(f"{p}.ffn.norm_gain"),
            ffn_norm_bias=g(f"{p}.ffn.norm_bias") if cfg.norm_bias else None,
        )

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def deep_copy(self) -> "EncoderModel":
        params = {
            name: Param(name, p.role, Tensor(p.tensor.data.copy(), p.tensor.requires_grad))
            for name, p in self.params.items()
        }
        return EncoderModel(EncoderConfig.from_dict(self.config.to_dict()), params)


def _norm(x: Tensor, gain: Tensor, bias: Tensor | None) -> Tensor:
    y = T.multiply(T.layer_norm_rows(x), gain)
    return T.add(y, bias) if bias is not None else y


def attention_layer(
    h: Tensor,
    params: AttentionParams,
    mask: Tensor,
    kind: AttentionKind,
    positions: np.ndarray,
    n_heads: int,
) -> tuple[Tensor, list[Tensor]]:
    """Multi-head scaled dot-product attention over the packed stream.

    Queries and keys get rotary embedding with the layer's theta; the mask is
    added to the scores before the row softmax; per-head probability matrices
    are returned alongside the projected output.
    """
    d_model = h.shape[1]
    if d_model % n_heads:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    inv_scale = 1.0 / np.sqrt(d_head)

    # folding the 1/sqrt(d_k) into Q keeps the score matrix a single product
    q_all = T.scale(T.add(T.matmul(h, params.wq), params.bq), inv_scale)
    k_all = T.add(T.matmul(h, params.wk), params.bk)
    v_all = T.add(T.matmul(h, params.wv), params.bv)

    head_outs: list[Tensor] = []
    probs: list[Tensor] = []
    for a in range(n_heads):
        lo, hi = a * d_head, (a + 1) * d_head
        q = rope_apply(T.slice_last_dim(q_all, lo, hi), positions, kind.rope_theta)
        k = rope_apply(T.slice_last_dim(k_all, lo, hi), positions, kind.rope_theta)
        v = T.slice_last_dim(v_all, lo, hi)
        attn = T.masked_softmax_rows(T.matmul(q, T.transpose(k)), mask.data)
        probs.append(attn)
        head_outs.append(T.matmul(attn, v))
    merged = concat_heads(head_outs)
    out = T.add(T.matmul(merged, params.wo), params.bo)
    return out, probs


def concat_heads(head_outs: list[Tensor]) -> Tensor:
    return head_outs[0] if len(head_outs) == 1 else T.concat_last_dim(head_outs)


def ffn_geglu(x: Tensor, params: FFNParams) -> Tensor:
    """Gated feed-forward: project to 2*d_ff, split into (value, gate) halves,
    multiply value by gelu(gate), project back down."""
    u = T.add(T.matmul(x, params.wf), params.bf)
    d_ff = u.shape[1] // 2
    value = T.slice_last_dim(u, 0, d_ff)
    gate = T.slice_last_dim(u, d_ff, 2 * d_ff)
    return T.add(T.matmul(T.multiply(value, T.gelu(gate)), params.wp), params.bp)


def encoder_layer(
    h_prev: Tensor,
    lp: LayerParams,
    mask: Tensor,
    kind: AttentionKind,
    positions: np.ndarray,
    n_heads: int,
    hidden_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """One residual block: H_next = H_prev + MHA(norm(H_prev)) + FFN(norm(...)),
    with the feed-forward consuming the post-attention residual stream."""
    normed = _norm(h_prev, lp.attn_norm_gain, lp.attn_norm_bias)
    ao, probs = attention_layer(normed, lp.attn, mask, kind, positions, n_heads)
    if rng is not None and hidden_dropout > 0.0:
        ao = T.dropout(ao, hidden_dropout, rng)
    stream = T.add(h_prev, ao)
    m = ffn_geglu(_norm(stream, lp.ffn_norm_gain, lp.ffn_norm_bias), lp.ffn)
    if rng is not None and hidden_dropout > 0.0:
        m = T.dropout(m, hidden_dropout, rng)
    return T.add(stream, m), probs


def forward(
    model: EncoderModel,
    batch: PackedBatch,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the full encoder over a packed batch.

    Dropout fires only in train mode and requires an explicit generator so
    per-step noise is reproducible. Eval mode is fully deterministic.
    """
    cfg = model.config
    ids = batch.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(
            f"token id out of range [0, {cfg.vocab_size}): max {ids.max()}"
        )
    if train_mode and rng is None and (cfg.token_dropout > 0 or cfg.hidden_dropout > 0):
        raise ConfigError("train_mode forward with dropout needs an rng")

    h = T.gather_rows(model.tensor("embedding.table"), ids)
    if train_mode and rng is not None and cfg.token_dropout > 0:
        h = T.dropout(h, cfg.token_dropout, rng, by_row=True)

    masks: dict[tuple, Tensor] = {}
    hidden = [h]
    all_probs: list[list[Tensor]] = []
    allowed: list[np.ndarray] = []
    for l, kind in enumerate(cfg.attention_schedule):
        key = (kind.kind, kind.window_size)
        if key not in masks:
            masks[key] = build_mask(batch, kind)
        mask = masks[key]
        h, probs = encoder_layer(
            h,
            model.layer_params(l),
            mask,
            kind,
            batch.positions,
            cfg.n_heads,
            cfg.hidden_dropout if train_mode else 0.0,
            rng if train_mode else None,
        )
        hidden.append(h)
        all_probs.append(probs)
        allowed.append(np.isfinite(mask.data))

    pooled = T.gather_rows(h, batch.cls_indices)
    logits = T.add(T.matmul(pooled, model.tensor("head.w")), model.tensor("head.b"))
    return ForwardTrace(hidden, all_probs, logits, allowed)


def save_checkpoint(model: EncoderModel, path: str | Path) -> None:
    """Write the versioned flat parameter map plus config as JSON.

    float64 values round-trip exactly (shortest-repr encoding); key order is
    fixed so the same model always serializes to the same bytes.
    """
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            name: {
                "role": p.role,
                "shape": list(p.tensor.shape),
                "data": p.tensor.data.reshape(-1).tolist(),
            }
            for name, p in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> EncoderModel:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version!r}")
    config = EncoderConfig.from_dict(doc["config"])
    params: dict[str, Param] = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Param(name, entry["role"], Tensor(arr, requires_grad=True))
    return EncoderModel(config, params)
