"""Selective fine-tuning: bias-only masks, embedding freezing, and
trainable-parameter accounting.

Policies act on role tags (weight / bias / embedding / head), so the same
mask applies to any model regardless of depth or width.
"""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field
from typing import Iterable, TYPE_CHECKING

from .encoder import EncoderModel, Param
from .errors import ConfigError

if TYPE_CHECKING:
    from .cotrain import ScheduleState

ROLES = ("weight", "bias", "embedding", "head")


@dataclass
class ParamPolicy:
    """Which parameters train.

    Under `bitfit` every weight-role and embedding-role parameter freezes;
    bias-role parameters and (by default) the head stay trainable. Explicit
    name-pattern overrides win over everything else.
    """

    bitfit: bool = False
    freeze_embeddings: bool = False
    train_head: bool = True
    explicit_overrides: dict[str, bool] = field(default_factory=dict)


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    trainable_fraction: float
    per_role_counts: dict[str, tuple[int, int]]

    def rows(self) -> list[tuple[str, int, int, float]]:
        """(role, total, trainable, fraction) rows, roles then the overall line."""
        out = []
        for role in ROLES:
            if role in self.per_role_counts:
                tot, tr = self.per_role_counts[role]
                out.append((role, tot, tr, tr / tot if tot else 0.0))
        out.append(("all", self.total_params, self.trainable_params, self.trainable_fraction))
        return out


def _params_of(model: EncoderModel | Iterable[Param]) -> list[Param]:
    if hasattr(model, "parameters"):
        return list(model.parameters())
    return list(model)


def apply_policy(model: EncoderModel | Iterable[Param], policy: ParamPolicy) -> None:
    """Set the trainable flag of every parameter according to the policy."""
    params = _params_of(model)
    for p in params:
        trainable = True
        if policy.bitfit and p.role in ("weight", "embedding"):
            trainable = False
        if policy.freeze_embeddings and p.role == "embedding":
            trainable = False
        if p.role == "head":
            trainable = policy.train_head
        p.trainable = trainable
    for pattern, flag in policy.explicit_overrides.items():
        matched = [p for p in params if fnmatch.fnmatch(p.name, pattern)]
        if not matched:
            warnings.warn(f"override pattern {pattern!r} matched no parameters")
        for p in matched:
            p.trainable = bool(flag)


def count_params(model: EncoderModel | Iterable[Param], policy: ParamPolicy | None = None) -> ParamReport:
    """Count totals and trainables by role from the current flags.

    Pass a policy to apply it first (convenience for reporting).
    """
    params = _params_of(model)
    if policy is not None:
        apply_policy(params, policy)
    per_role: dict[str, tuple[int, int]] = {}
    total = trainable = 0
    for p in params:
        n = p.tensor.size
        tot, tr = per_role.get(p.role, (0, 0))
        per_role[p.role] = (tot + n, tr + (n if p.trainable else 0))
        total += n
        trainable += n if p.trainable else 0
    return ParamReport(
        total_params=total,
        trainable_params=trainable,
        trainable_fraction=trainable / total if total else 0.0,
        per_role_counts=per_role,
    )


@dataclass(frozen=True)
class LrRegime:
    """Peak learning rate plus warmup and final-decay fractions."""

    name: str
    peak: float
    warmup_fraction: float
    final_fraction: float


BERT_REGIME = LrRegime("bert", 5e-4, 0.20, 0.0)
MBERT_REGIME = LrRegime("mbert", 1e-3, 0.06, 0.02)

_REGIMES = {r.name: r for r in (BERT_REGIME, MBERT_REGIME)}


def get_regime(name: str | LrRegime) -> LrRegime:
    if isinstance(name, LrRegime):
        return name
    if name not in _REGIMES:
        raise ConfigError(f"unknown lr regime {name!r}; known: {sorted(_REGIMES)}")
    return _REGIMES[name]


def lr_schedule(state: "ScheduleState", regime: str | LrRegime) -> float:
    """Linear warmup to the regime peak, then linear decay to the regime's
    final fraction of the peak at the last step."""
    r = get_regime(regime)
    total = state.total_steps
    if total <= 0:
        raise ConfigError(f"total_steps must be positive, got {total}")
    warm = r.warmup_fraction * total
    step = state.step
    if warm > 0 and step < warm:
        return r.peak * step / warm
    floor = r.peak * r.final_fraction
    if total == warm:
        return r.peak
    frac = (step - warm) / (total - warm)
    return r.peak + (floor - r.peak) * min(1.0, frac)
