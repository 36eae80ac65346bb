"""Offline teacher-to-student transfer.

Students are built by copying a selected subset of teacher layers (together
with each layer's attention kind and rotary base). Three losses move
knowledge across: attention-distribution matching, hidden-state matching
through a learnable projection, and logit matching with a temperature. The
teacher side of every loss is detached, so no gradient ever reaches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderModel, ForwardTrace, Param
from .errors import ConfigError
from .tensor import Tensor

# Built-in layer-selection policies, keyed by the teacher depth they assume.
POLICIES: dict[str, tuple[int, list[int]]] = {
    "BERT-A6": (12, list(range(0, 6))),
    "BERT-B6": (12, list(range(6, 12))),
    "BERT-A4": (12, list(range(0, 4))),
    "BERT-B4": (12, list(range(8, 12))),
    "BERT-A2": (12, [0, 1]),
    "BERT-B2": (12, [10, 11]),
    "MBERT-A13": (28, list(range(0, 13))),
    "MBERT-B13": (28, [0] + list(range(16, 28))),
    "MBERT-A4": (28, list(range(0, 4))),
    "MBERT-B4": (28, [0, 25, 26, 27]),
}


@dataclass
class LayerSelection:
    """Which teacher layers seed the student, in order."""

    teacher_indices: list[int]
    policy_name: str = "explicit"


@dataclass
class HiddenProjection:
    """Learnable map from student hidden width into teacher hidden width."""

    w: Tensor

    @staticmethod
    def identity(d_student: int, d_teacher: int) -> "HiddenProjection":
        if d_student == d_teacher:
            data = np.eye(d_student)
        else:
            rng = np.random.default_rng(0)
            data = rng.normal(0.0, (2.0 / (d_student + d_teacher)) ** 0.5,
                              (d_student, d_teacher))
        return HiddenProjection(Tensor(data, requires_grad=True))

    def as_param(self, name: str = "distill.hidden_proj") -> Param:
        # Head-role on purpose: it exists only for training, so bias-only
        # policies must keep it trainable or the hidden loss goes dead.
        return Param(name, "head", self.w)


@dataclass
class DistillConfig:
    temperature: float = 1.0
    attn_weight: float = 1.0
    hidden_weight: float = 1.0
    logit_weight: float = 1.0
    attn_distance: str = "mse"  # "kl" matches distributions instead

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.attn_distance not in ("mse", "kl"):
            raise ConfigError(f"unknown attn_distance {self.attn_distance!r}")


def select_layers(policy: str | list[int], teacher_cfg: EncoderConfig) -> LayerSelection:
    """Resolve a policy name (or explicit index list) against a teacher depth."""
    if isinstance(policy, str):
        if policy not in POLICIES:
            raise ConfigError(
                f"unknown layer policy {policy!r}; known: {sorted(POLICIES)}"
            )
        _, indices = POLICIES[policy]
        name = policy
    else:
        indices = list(policy)
        name = "explicit"
    if not indices:
        raise ConfigError("layer selection is empty")
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ConfigError(f"selection must be strictly increasing, got {indices}")
    if indices[0] < 0 or indices[-1] >= teacher_cfg.n_layers:
        raise ConfigError(
            f"selection {indices} out of range for a {teacher_cfg.n_layers}-layer teacher"
        )
    return LayerSelection(indices, name)


def init_student(teacher: EncoderModel, sel: LayerSelection) -> EncoderModel:
    """Deep-copy the selected teacher layers (keeping their attention kinds
    and thetas), embeddings and head into a fresh shallower model."""
    tcfg = teacher.config
    scfg = EncoderConfig(
        n_layers=len(sel.teacher_indices),
        d_model=tcfg.d_model,
        n_heads=tcfg.n_heads,
        d_ff=tcfg.d_ff,
        vocab_size=tcfg.vocab_size,
        n_classes=tcfg.n_classes,
        attention_schedule=[tcfg.attention_schedule[i] for i in sel.teacher_indices],
        global_every=tcfg.global_every,
        token_dropout=tcfg.token_dropout,
        hidden_dropout=tcfg.hidden_dropout,
        norm_bias=tcfg.norm_bias,
        local_window=tcfg.local_window,
    )
    params: dict[str, Param] = {}

    def copy_param(src_name: str, dst_name: str) -> None:
        src = teacher.params[src_name]
        params[dst_name] = Param(dst_name, src.role, Tensor(src.tensor.data.copy(), True))

    copy_param("embedding.table", "embedding.table")
    for s_idx, t_idx in enumerate(sel.teacher_indices):
        prefix_t, prefix_s = f"layers.{t_idx}.", f"layers.{s_idx}."
        for name in teacher.params:
            if name.startswith(prefix_t):
                copy_param(name, prefix_s + name[len(prefix_t):])
    copy_param("head.w", "head.w")
    copy_param("head.b", "head.b")
    return EncoderModel(scfg, params)


def _check_traces(
    teacher_trace: ForwardTrace, student_trace: ForwardTrace, sel: LayerSelection
) -> None:
    if len(sel.teacher_indices) != len(student_trace.attention_probs):
        raise ConfigError(
            f"selection covers {len(sel.teacher_indices)} layers but student "
            f"trace has {len(student_trace.attention_probs)}"
        )
    if sel.teacher_indices[-1] >= len(teacher_trace.attention_probs):
        raise ConfigError("selection exceeds teacher trace depth")


def loss_attn(
    teacher_trace: ForwardTrace,
    student_trace: ForwardTrace,
    sel: LayerSelection,
    cfg: DistillConfig,
) -> Tensor:
    """Distance between student and teacher attention maps, student layer l
    paired with teacher layer sel[l]; masked positions never enter the mean."""
    _check_traces(teacher_trace, student_trace, sel)
    terms: list[Tensor] = []
    n_terms = 0
    for l, t_idx in enumerate(sel.teacher_indices):
        s_heads = student_trace.attention_probs[l]
        t_heads = teacher_trace.attention_probs[t_idx]
        if len(s_heads) != len(t_heads):
            raise ConfigError(
                f"head count mismatch at student layer {l}: "
                f"{len(s_heads)} vs {len(t_heads)}"
            )
        allowed_f = student_trace.allowed[l].astype(np.float64)
        for a, (s_p, t_p) in enumerate(zip(s_heads, t_heads)):
            if s_p.shape != t_p.shape:
                raise ConfigError(
                    f"attention shape mismatch at layer {l} head {a}: "
                    f"{s_p.shape} vs {t_p.shape}"
                )
            if cfg.attn_distance == "mse":
                terms.append(T.masked_sq_mean(s_p, t_p.data, allowed_f))
            else:
                t_const = T.detach(t_p)
                # KL(teacher || student) over rows, zeros clamped away
                eps = 1e-12
                ratio = T.sub(
                    T.log(T.add(t_const, Tensor(np.full(t_p.shape, eps)))),
                    T.log(T.add(s_p, Tensor(np.full(s_p.shape, eps)))),
                )
                masked = T.multiply(T.multiply(t_const, ratio), Tensor(allowed_f))
                terms.append(T.scale(T.sum_all(masked), 1.0 / s_p.shape[0]))
            n_terms += 1
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / n_terms)


def hidden_pairs(sel: LayerSelection) -> list[tuple[int, int]]:
    """(student trace index, teacher trace index) pairs for the hidden loss.

    Trace index 0 is the embedding output; it participates only when the
    student's first layer is the teacher's layer 0.
    """
    pairs: list[tuple[int, int]] = []
    if sel.teacher_indices[0] == 0:
        pairs.append((0, 0))
    pairs.extend((l + 1, t + 1) for l, t in enumerate(sel.teacher_indices))
    return pairs


def loss_hidden(
    teacher_trace: ForwardTrace,
    student_trace: ForwardTrace,
    sel: LayerSelection,
    proj: HiddenProjection,
) -> Tensor:
    """MSE between teacher hidden states and projected student hidden states,
    averaged over the aligned layer pairs. Teacher side is constant; the
    projection itself receives gradient."""
    _check_traces(teacher_trace, student_trace, sel)
    d_student = student_trace.hidden_states[0].shape[1]
    d_teacher = teacher_trace.hidden_states[0].shape[1]
    if proj.w.shape != (d_student, d_teacher):
        raise ConfigError(
            f"hidden projection shape {proj.w.shape} does not map "
            f"{d_student} -> {d_teacher}"
        )
    terms = [
        T.mse(
            T.detach(teacher_trace.hidden_states[t_i]),
            T.matmul(student_trace.hidden_states[s_i], proj.w),
        )
        for s_i, t_i in hidden_pairs(sel)
    ]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def loss_logit(z_teacher: Tensor, z_student: Tensor, temperature: float = 1.0) -> Tensor:
    """MSE(z_T, z_S / t). Only the student side is divided by the
    temperature; at t=1 this is plain MSE. Teacher side is constant."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return T.mse(T.detach(z_teacher), T.scale(z_student, 1.0 / temperature))
