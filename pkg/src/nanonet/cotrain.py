"""Semi-supervised co-training of distilled student cohorts.

Each step combines cross-entropy on a tiny labeled batch with, per student,
the three transfer losses against the frozen teacher and a mutual-learning
consistency term against its peers, both computed on a larger unlabeled
batch. Consistency ramps in linearly and the whole objective is optimized
with a warmup/decay schedule.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .distill import (
    DistillConfig,
    HiddenProjection,
    LayerSelection,
    init_student,
    loss_attn,
    loss_hidden,
    loss_logit,
)
from .encoder import (
    EncoderModel,
    PackedBatch,
    Param,
    forward,
    load_checkpoint,
    pack_sequences,
    save_checkpoint,
    tokenize,
)
from .errors import ConfigError, NumericError
from .peft import LrRegime, ParamPolicy, apply_policy, get_regime, lr_schedule
from .tensor import Tensor


@dataclass
class SemiBatch:
    """One step's data: a small labeled batch and a larger unlabeled one."""

    labeled: PackedBatch
    unlabeled: PackedBatch

    def __post_init__(self) -> None:
        if self.labeled.labels is None:
            raise ConfigError("labeled half of a SemiBatch needs labels")
        if self.unlabeled.labels is not None:
            raise ConfigError("unlabeled half of a SemiBatch must not carry labels")


@dataclass
class ScheduleState:
    step: int
    total_steps: int
    warmup_fraction: float = 0.2
    lam: float = 1.0
    mu_ramp_fraction: float = 0.2


@dataclass
class LossBreakdown:
    """Per-component losses for one step plus the combined objective.

    Component values are unweighted; `expected_total()` recombines them with
    the stored weights, and must match `total` to within 1e-12.
    """

    ce_students: list[float]
    kd_attn: list[float]
    kd_hidden: list[float]
    kd_logit: list[float]
    dml: list[float]
    total: float
    ce_teacher: float | None = None
    include_teacher_ce: bool = False
    mu: float = 0.0
    lam: float = 1.0
    attn_weight: float = 1.0
    hidden_weight: float = 1.0
    logit_weight: float = 1.0

    def expected_total(self) -> float:
        total = sum(self.ce_students)
        if self.include_teacher_ce and self.ce_teacher is not None:
            total += self.ce_teacher
        for k in range(len(self.ce_students)):
            total += (
                self.attn_weight * self.kd_attn[k]
                + self.hidden_weight * self.kd_hidden[k]
                + self.logit_weight * self.kd_logit[k]
                + self.mu * self.lam * self.dml[k]
            )
        return total

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "ce_teacher": self.ce_teacher,
            "ce_students": self.ce_students,
            "kd_attn": self.kd_attn,
            "kd_hidden": self.kd_hidden,
            "kd_logit": self.kd_logit,
            "dml": self.dml,
            "mu": self.mu,
        }


def loss_dml(z_self: Tensor, z_peer: Tensor) -> Tensor:
    """Directed mutual-learning term: MSE against the peer's logits with the
    peer branch detached, so only the self side receives gradient."""
    return T.mse(z_self, T.detach(z_peer))


def loss_cohort(z_k: Tensor, z_others: list[Tensor]) -> Tensor:
    """Average directed consistency against every other peer; for a cohort of
    two this is exactly loss_dml."""
    if not z_others:
        raise ConfigError("cohort consistency needs at least one peer")
    total = loss_dml(z_k, z_others[0])
    for z in z_others[1:]:
        total = T.add(total, loss_dml(z_k, z))
    return T.scale(total, 1.0 / len(z_others))


def mu_ramp(state: ScheduleState) -> float:
    """Linear ramp of the consistency weight from 0 to 1 over the first
    `mu_ramp_fraction` of training."""
    if state.total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {state.total_steps}")
    ramp = state.mu_ramp_fraction * state.total_steps
    if ramp <= 0:
        return 1.0
    return min(1.0, state.step / ramp)


class Adam:
    """Adam with optional decoupled weight decay.

    Binds only the trainable parameters handed to it; moment buffers exist
    for exactly those.
    """

    def __init__(
        self,
        params: list[Param],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.bound = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay, self.decoupled = weight_decay, decoupled
        self.m = [np.zeros_like(p.tensor.data) for p in self.bound]
        self.v = [np.zeros_like(p.tensor.data) for p in self.bound]
        self.t = 0

    def zero_grads(self) -> None:
        for p in self.bound:
            p.tensor.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.bound):
            g = p.tensor.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.decoupled and self.weight_decay:
                update = update + self.weight_decay * p.tensor.data
            p.tensor.data -= lr * update


def make_optimizer(regime, params: list[Param]) -> Adam:
    """Adam for the bert regime (and any custom one), decoupled weight-decay
    Adam for the mbert regime."""
    if get_regime(regime).name == "mbert":
        return Adam(params, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=1e-6,
                    decoupled=True)
    return Adam(params, beta1=0.9, beta2=0.999, eps=1e-8)


@dataclass
class CotrainSettings:
    distill: DistillConfig = field(default_factory=DistillConfig)
    lam: float = 1.0
    mu_ramp_fraction: float = 0.2
    teacher_finetune: bool = False
    regime: str | LrRegime = "bert"
    seed: int = 0


def step_rng(seed: int, step: int, model_tag: int, stream: int = 0) -> np.random.Generator:
    """Fresh per-(model, step, stream) generator so dropout noise differs
    across students yet replays exactly for a given seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, step, model_tag, stream))))


def train_step(
    teacher: EncoderModel,
    students: list[EncoderModel],
    selections: list[LayerSelection],
    projections: list[HiddenProjection],
    batch: SemiBatch,
    state: ScheduleState,
    settings: CotrainSettings,
    optimizer: Adam,
) -> LossBreakdown:
    """One combined optimization step; returns the loss breakdown.

    The teacher produces targets in eval mode; its cross-entropy joins the
    objective only when teacher fine-tuning is enabled. Kd and consistency
    terms whose effective weight is exactly zero are skipped.
    """
    dc = settings.distill
    mu = mu_ramp(state)
    lr = lr_schedule(state, settings.regime)
    n_students = len(students)

    kd_on = dc.attn_weight != 0 or dc.hidden_weight != 0 or dc.logit_weight != 0
    con_on = settings.lam != 0 and mu != 0 and n_students > 1
    need_unlabeled = kd_on or con_on

    t_lab = forward(
        teacher,
        batch.labeled,
        train_mode=settings.teacher_finetune,
        rng=step_rng(settings.seed, state.step, 0, 0) if settings.teacher_finetune else None,
    )
    ce_teacher = T.cross_entropy(t_lab.logits, batch.labeled.labels)

    ce_terms: list[Tensor] = []
    for k, student in enumerate(students):
        s_lab = forward(
            student, batch.labeled, train_mode=True,
            rng=step_rng(settings.seed, state.step, k + 1, 0),
        )
        ce_terms.append(T.cross_entropy(s_lab.logits, batch.labeled.labels))

    zero = Tensor(0.0)
    attn_terms = [zero] * n_students
    hidden_terms = [zero] * n_students
    logit_terms = [zero] * n_students
    dml_terms = [zero] * n_students
    if need_unlabeled:
        t_unl = forward(teacher, batch.unlabeled, train_mode=False) if kd_on else None
        s_unl = [
            forward(
                student, batch.unlabeled, train_mode=True,
                rng=step_rng(settings.seed, state.step, k + 1, 1),
            )
            for k, student in enumerate(students)
        ]
        for k in range(n_students):
            if kd_on:
                if dc.attn_weight != 0:
                    attn_terms[k] = loss_attn(t_unl, s_unl[k], selections[k], dc)
                if dc.hidden_weight != 0:
                    hidden_terms[k] = loss_hidden(t_unl, s_unl[k], selections[k], projections[k])
                if dc.logit_weight != 0:
                    logit_terms[k] = loss_logit(t_unl.logits, s_unl[k].logits, dc.temperature)
            if con_on:
                peers = [s_unl[j].logits for j in range(n_students) if j != k]
                dml_terms[k] = loss_cohort(s_unl[k].logits, peers)

    total = ce_terms[0]
    for t in ce_terms[1:]:
        total = T.add(total, t)
    if settings.teacher_finetune:
        total = T.add(total, ce_teacher)
    for k in range(n_students):
        if dc.attn_weight != 0:
            total = T.add(total, T.scale(attn_terms[k], dc.attn_weight))
        if dc.hidden_weight != 0:
            total = T.add(total, T.scale(hidden_terms[k], dc.hidden_weight))
        if dc.logit_weight != 0:
            total = T.add(total, T.scale(logit_terms[k], dc.logit_weight))
        if con_on:
            total = T.add(total, T.scale(dml_terms[k], mu * settings.lam))

    if not np.isfinite(total.data):
        raise NumericError(f"non-finite loss at step {state.step}")

    optimizer.zero_grads()
    total.backward()
    optimizer.step(lr)

    breakdown = LossBreakdown(
        ce_students=[t.item() for t in ce_terms],
        kd_attn=[t.item() for t in attn_terms],
        kd_hidden=[t.item() for t in hidden_terms],
        kd_logit=[t.item() for t in logit_terms],
        dml=[t.item() for t in dml_terms],
        total=total.item(),
        ce_teacher=ce_teacher.item(),
        include_teacher_ce=settings.teacher_finetune,
        mu=mu,
        lam=settings.lam,
        attn_weight=dc.attn_weight,
        hidden_weight=dc.hidden_weight,
        logit_weight=dc.logit_weight,
    )
    # recombining the parts must land back on the optimized objective
    assert abs(breakdown.total - breakdown.expected_total()) <= 1e-12
    return breakdown


def predict_labels(
    model: EncoderModel, texts: list[str], max_len: int = 64, batch_size: int = 32
) -> np.ndarray:
    """Eval-mode argmax predictions; ties resolve to the lowest class index."""
    preds: list[np.ndarray] = []
    for i in range(0, len(texts), batch_size):
        chunk = texts[i : i + batch_size]
        batch = pack_sequences([tokenize(t, max_len) for t in chunk])
        trace = forward(model, batch, train_mode=False)
        preds.append(np.argmax(trace.logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _accuracy(model: EncoderModel, examples: list[tuple[str, int]], max_len: int, batch_size: int = 32) -> float:
    if not examples:
        raise ConfigError("cannot evaluate on an empty example list")
    texts = [t for t, _ in examples]
    labels = np.asarray([y for _, y in examples])
    preds = predict_labels(model, texts, max_len, batch_size)
    return float((preds == labels).mean())


def _index_batches(n_items: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffles each epoch, drops ragged
    tails so batch sizes stay constant."""
    size = min(batch_size, n_items)
    while True:
        order = rng.permutation(n_items)
        for i in range(0, n_items - size + 1, size):
            yield order[i : i + size]


@dataclass
class RunSpec:
    """Everything train_loop needs, already materialized."""

    seed: int
    teacher: EncoderModel
    selections: list[LayerSelection]
    settings: CotrainSettings
    policy: ParamPolicy
    total_steps: int
    labeled: list[tuple[str, int]]
    unlabeled: list[str]
    dev: list[tuple[str, int]]
    test: list[tuple[str, int]] | None = None
    labeled_batch: int = 4
    unlabeled_batch: int = 16
    eval_interval: int = 25
    max_len: int = 64
    out_dir: Path | None = None


@dataclass
class TrainResult:
    metrics: list[dict]
    best_student: int
    best_dev_acc: float
    best_step: int
    test_acc: float | None
    students: list[EncoderModel]
    teacher: EncoderModel
    best_checkpoint: Path | None


def train_loop(spec: RunSpec) -> TrainResult:
    """Run the full co-training schedule and persist metrics and the
    best-dev student checkpoint.

    Evaluations happen at step 0, every `eval_interval` steps, and at the
    final step; the checkpoint tracks the best dev accuracy seen (earliest
    step and lowest student index win ties). Identical seeds reproduce the
    metrics files byte for byte.
    """
    if not spec.labeled or not spec.unlabeled or not spec.dev:
        raise ConfigError("train_loop needs labeled, unlabeled and dev data")
    if spec.total_steps < 0:
        raise ConfigError(f"total_steps must be >= 0, got {spec.total_steps}")

    settings = spec.settings
    students = [init_student(spec.teacher, sel) for sel in spec.selections]
    d = spec.teacher.config.d_model
    projections = [HiddenProjection.identity(d, d) for _ in students]

    for k, student in enumerate(students):
        params = student.parameters() + [projections[k].as_param(f"student{k}.hidden_proj")]
        apply_policy(params, spec.policy)
    if settings.teacher_finetune:
        apply_policy(spec.teacher, spec.policy)
    else:
        for p in spec.teacher.parameters():
            p.trainable = False

    bound: list[Param] = []
    for k, student in enumerate(students):
        bound.extend(student.parameters())
        bound.append(projections[k].as_param(f"student{k}.hidden_proj"))
    if settings.teacher_finetune:
        bound.extend(spec.teacher.parameters())
    optimizer = make_optimizer(settings.regime, bound)

    lab_tokens = [tokenize(t, spec.max_len) for t, _ in spec.labeled]
    lab_labels = [y for _, y in spec.labeled]
    unl_tokens = [tokenize(t, spec.max_len) for t in spec.unlabeled]

    data_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xDA7A)))
    lab_stream = _index_batches(len(lab_tokens), spec.labeled_batch, data_rng)
    unl_stream = _index_batches(len(unl_tokens), spec.unlabeled_batch, data_rng)

    out_dir = Path(spec.out_dir) if spec.out_dir is not None else None
    metrics_path = best_path = None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        best_path = out_dir / "best_student.json"
        metrics_file = metrics_path.open("w")

    metrics: list[dict] = []
    best_acc, best_step, best_student = -1.0, -1, -1
    best_snapshot: EncoderModel | None = None
    last_breakdown: LossBreakdown | None = None

    def evaluate_now(step: int) -> None:
        nonlocal best_acc, best_step, best_student, best_snapshot
        dev_accs = [_accuracy(s, spec.dev, spec.max_len) for s in students]
        state = ScheduleState(step, max(spec.total_steps, 1), lam=settings.lam,
                              mu_ramp_fraction=settings.mu_ramp_fraction)
        record = {
            "step": step,
            "dev_acc": dev_accs,
            "lr": lr_schedule(state, settings.regime) if spec.total_steps else 0.0,
            "mu": mu_ramp(state) if spec.total_steps else 0.0,
            "loss": last_breakdown.to_dict() if last_breakdown else None,
        }
        metrics.append(record)
        if metrics_file is not None:
            metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_file.flush()
        for k, acc in enumerate(dev_accs):
            if acc > best_acc:
                best_acc, best_step, best_student = acc, step, k
                best_snapshot = students[k].deep_copy()
                if best_path is not None:
                    save_checkpoint(students[k], best_path)

    try:
        for step in range(spec.total_steps + 1):
            if step % spec.eval_interval == 0 or step == spec.total_steps:
                evaluate_now(step)
            if step == spec.total_steps:
                break
            lab_idx = next(lab_stream)
            unl_idx = next(unl_stream)
            batch = SemiBatch(
                labeled=pack_sequences(
                    [lab_tokens[i] for i in lab_idx], [lab_labels[i] for i in lab_idx]
                ),
                unlabeled=pack_sequences([unl_tokens[i] for i in unl_idx]),
            )
            state = ScheduleState(step, spec.total_steps, lam=settings.lam,
                                  mu_ramp_fraction=settings.mu_ramp_fraction)
            last_breakdown = train_step(
                spec.teacher, students, spec.selections, projections,
                batch, state, settings, optimizer,
            )
    finally:
        if metrics_file is not None:
            metrics_file.close()

    test_acc: float | None = None
    if spec.test:
        scored = (
            load_checkpoint(best_path) if best_path is not None else best_snapshot
        )
        test_acc = _accuracy(scored, spec.test, spec.max_len)

    if out_dir is not None:
        with (out_dir / "summary.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "best_dev_acc", "best_step", "selected", "test_acc"])
            per_student_best: dict[int, tuple[float, int]] = {}
            for rec in metrics:
                for k, acc in enumerate(rec["dev_acc"]):
                    cur = per_student_best.get(k)
                    if cur is None or acc > cur[0]:
                        per_student_best[k] = (acc, rec["step"])
            for k in range(len(students)):
                acc, stp = per_student_best[k]
                selected = int(k == best_student)
                writer.writerow(
                    [f"student_{k}", repr(acc), stp, selected,
                     repr(test_acc) if selected and test_acc is not None else ""]
                )

    return TrainResult(
        metrics=metrics,
        best_student=best_student,
        best_dev_acc=best_acc,
        best_step=best_step,
        test_acc=test_acc,
        students=students,
        teacher=spec.teacher,
        best_checkpoint=best_path,
    )


def train_supervised(
    model: EncoderModel,
    examples: list[tuple[str, int]],
    steps: int,
    regime: str | LrRegime = "bert",
    batch_size: int = 16,
    seed: int = 0,
    max_len: int = 64,
    policy: ParamPolicy | None = None,
) -> None:
    """Plain cross-entropy training, used to consolidate a teacher before
    distillation. Mutates the model in place."""
    if not examples:
        raise ConfigError("train_supervised needs a non-empty example list")
    if policy is not None:
        apply_policy(model, policy)
    optimizer = make_optimizer(regime, model.parameters())
    tokens = [tokenize(t, max_len) for t, _ in examples]
    labels = [y for _, y in examples]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E1F)))
    stream = _index_batches(len(tokens), batch_size, rng)
    for step in range(steps):
        idx = next(stream)
        batch = pack_sequences([tokens[i] for i in idx], [labels[i] for i in idx])
        trace = forward(model, batch, train_mode=True, rng=step_rng(seed, step, 99, 0))
        loss = T.cross_entropy(trace.logits, batch.labels)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {step}")
        state = ScheduleState(step, steps)
        optimizer.zero_grads()
        loss.backward()
        optimizer.step(lr_schedule(state, regime))
