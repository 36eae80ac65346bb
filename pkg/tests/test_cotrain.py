"""Mutual-learning losses, ramp schedule, combined steps, and the loop."""

import json

import numpy as np
import pytest

from nanonet import cotrain as C
from nanonet import distill as D
from nanonet import encoder as E
from nanonet import peft as P
from nanonet import tensor as T
from nanonet.errors import ConfigError
from nanonet.tensor import Tensor


def toy_teacher(seed=0, n_classes=2, dropout=True):
    cfg = E.EncoderConfig(
        n_layers=4, d_model=8, n_heads=2, d_ff=16, n_classes=n_classes,
        token_dropout=0.2 if dropout else 0.0,
        hidden_dropout=0.1 if dropout else 0.0,
        global_every=3, local_window=4,
    )
    return E.EncoderModel.init(cfg, seed=seed)


def toy_spec(teacher, *, lam=1.0, kdw=1.0, steps=4, seed=0, policy=None, **kw):
    labeled = [("aa bb", 0), ("cc dd", 1), ("ee ff", 0), ("gg hh", 1)]
    defaults = dict(
        seed=seed,
        teacher=teacher,
        selections=[D.select_layers([0, 1], teacher.config),
                    D.select_layers([2, 3], teacher.config)],
        settings=C.CotrainSettings(
            distill=D.DistillConfig(attn_weight=kdw, hidden_weight=kdw, logit_weight=kdw),
            lam=lam, seed=seed),
        policy=policy or P.ParamPolicy(),
        total_steps=steps,
        labeled=labeled,
        unlabeled=["xx yy", "zz ww", "qq rr", "ss tt"],
        dev=labeled,
        test=labeled,
        labeled_batch=2,
        unlabeled_batch=2,
        eval_interval=2,
        max_len=8,
    )
    defaults.update(kw)
    return C.RunSpec(**defaults)


# ---------------------------------------------------------------------------
# loss_dml / loss_cohort

def test_dml_zero_at_equal_with_zero_grad_of_right_shape():
    z = np.random.default_rng(0).standard_normal((3, 4))
    a = Tensor(z, requires_grad=True)
    b = Tensor(z.copy(), requires_grad=True)
    loss = C.loss_dml(a, b)
    assert loss.item() == 0.0
    loss.backward()
    assert a.grad is not None and a.grad.shape == (3, 4)
    np.testing.assert_array_equal(a.grad, np.zeros((3, 4)))


def test_dml_peer_gets_no_gradient():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    C.loss_dml(a, b).backward()
    assert a.grad is not None
    assert b.grad is None


def test_directed_pair_sums_to_twice_mse():
    rng = np.random.default_rng(2)
    for _ in range(10):
        za = Tensor(rng.standard_normal((4, 3)))
        zb = Tensor(rng.standard_normal((4, 3)))
        directed = C.loss_dml(za, zb).item() + C.loss_dml(zb, za).item()
        assert abs(directed - 2.0 * T.mse(za, zb).item()) < 1e-12


def test_cohort_of_two_equals_dml():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = Tensor(rng.standard_normal((2, 4)))
        b = Tensor(rng.standard_normal((2, 4)))
        assert abs(C.loss_cohort(a, [b]).item() - C.loss_dml(a, b).item()) <= 1e-12


def test_cohort_identical_peers_zero():
    z = Tensor(np.ones((2, 2)))
    assert C.loss_cohort(z, [z, z]).item() == 0.0


def test_cohort_three_matches_hand_average():
    rng = np.random.default_rng(4)
    zk = Tensor(rng.standard_normal((3, 2)))
    z1 = Tensor(rng.standard_normal((3, 2)))
    z2 = Tensor(rng.standard_normal((3, 2)))
    expected = 0.5 * (T.mse(zk, z1).item() + T.mse(zk, z2).item())
    assert abs(C.loss_cohort(zk, [z1, z2]).item() - expected) < 1e-14


def test_cohort_empty_peers_rejected():
    with pytest.raises(ConfigError):
        C.loss_cohort(Tensor(np.ones((1, 2))), [])


# ---------------------------------------------------------------------------
# mu ramp

def test_mu_ramp_zero_at_start():
    assert C.mu_ramp(C.ScheduleState(step=0, total_steps=100)) == 0.0


def test_mu_ramp_one_after_ramp():
    assert C.mu_ramp(C.ScheduleState(step=20, total_steps=100)) == 1.0
    assert C.mu_ramp(C.ScheduleState(step=95, total_steps=100)) == 1.0


def test_mu_ramp_midpoint():
    assert C.mu_ramp(C.ScheduleState(step=10, total_steps=100)) == 0.5


def test_mu_ramp_rejects_zero_total():
    with pytest.raises(ConfigError):
        C.mu_ramp(C.ScheduleState(step=0, total_steps=0))


# ---------------------------------------------------------------------------
# train_step

def _step_harness(teacher, lam=1.0, kdw=1.0, seed=0, same_dropout=False,
                  selections=None):
    cfg = teacher.config
    selections = selections or [D.select_layers([0, 1], cfg),
                                D.select_layers([2, 3], cfg)]
    students = [D.init_student(teacher, sel) for sel in selections]
    projections = [D.HiddenProjection.identity(cfg.d_model, cfg.d_model)
                   for _ in students]
    for p in teacher.parameters():
        p.trainable = False
    settings = C.CotrainSettings(
        distill=D.DistillConfig(attn_weight=kdw, hidden_weight=kdw, logit_weight=kdw),
        lam=lam, seed=seed)
    bound = [p for s in students for p in s.parameters()]
    bound += [pr.as_param(f"s{k}.proj") for k, pr in enumerate(projections)]
    opt = C.make_optimizer("bert", bound)
    batch = C.SemiBatch(
        labeled=E.pack_sequences([E.tokenize("ab", 8), E.tokenize("cd", 8)], [0, 1]),
        unlabeled=E.pack_sequences([E.tokenize("ef", 8), E.tokenize("gh", 8)]),
    )
    return students, selections, projections, settings, opt, batch


def test_train_step_breakdown_composition_lambda_zero():
    teacher = toy_teacher()
    students, sels, projs, settings, opt, batch = _step_harness(teacher, lam=0.0)
    state = C.ScheduleState(step=1, total_steps=10)
    bd = C.train_step(teacher, students, sels, projs, batch, state, settings, opt)
    expected = sum(bd.ce_students) + sum(bd.kd_attn) + sum(bd.kd_hidden) + sum(bd.kd_logit)
    assert abs(bd.total - expected) < 1e-12
    assert bd.dml == [0.0, 0.0]


def test_train_step_identical_twins_have_zero_dml():
    teacher = toy_teacher()
    # same selection AND same dropout stream tag is impossible through the
    # public api (tags differ per student); disable dropout instead so twin
    # forwards coincide exactly at step 0.
    teacher_nd = toy_teacher(dropout=False)
    sels = [D.select_layers([0, 1], teacher_nd.config)] * 2
    students, sels, projs, settings, opt, batch = _step_harness(
        teacher_nd, selections=sels)
    state = C.ScheduleState(step=0, total_steps=10)
    bd = C.train_step(teacher_nd, students, sels, projs, batch, state, settings, opt)
    assert bd.dml == [0.0, 0.0]


def test_train_step_breakdown_consistency_full_objective():
    teacher = toy_teacher()
    students, sels, projs, settings, opt, batch = _step_harness(teacher)
    state = C.ScheduleState(step=5, total_steps=10)
    bd = C.train_step(teacher, students, sels, projs, batch, state, settings, opt)
    assert abs(bd.total - bd.expected_total()) < 1e-12
    assert bd.mu == C.mu_ramp(state)


def test_train_step_decreases_training_ce_on_separable_toy():
    cfg = E.EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, n_classes=2,
                          token_dropout=0.0, hidden_dropout=0.0)
    model = E.EncoderModel.init(cfg, seed=3)
    examples = [("aaaa", 0), ("bbbb", 1), ("aaab", 0), ("bbba", 1)] * 2
    tokens = [E.tokenize(t, 8) for t, _ in examples]
    labels = [y for _, y in examples]
    batch = E.pack_sequences(tokens, labels)

    def ce_now():
        return T.cross_entropy(E.forward(model, batch).logits, labels).item()

    before = ce_now()
    opt = C.Adam(model.parameters())
    for _ in range(3):
        loss = T.cross_entropy(E.forward(model, batch).logits, labels)
        opt.zero_grads()
        loss.backward()
        opt.step(5e-4)
    assert ce_now() < before


def test_gradient_partitioning_matches_dml_ablation():
    # peer parameters must receive the same gradient with or without the
    # directed dml term of the other student
    teacher = toy_teacher(dropout=False)

    def grads_with(lam):
        students, sels, projs, settings, opt, batch = _step_harness(
            toy_teacher(dropout=False), lam=lam, kdw=0.0)
        state = C.ScheduleState(step=9, total_steps=10)  # mu = 1
        t_unl = E.forward(students[0], batch.unlabeled)  # warm nothing
        s0 = E.forward(students[0], batch.unlabeled, train_mode=False)
        s1 = E.forward(students[1], batch.unlabeled, train_mode=False)
        ce = T.add(
            T.cross_entropy(E.forward(students[0], batch.labeled).logits, batch.labeled.labels),
            T.cross_entropy(E.forward(students[1], batch.labeled).logits, batch.labeled.labels),
        )
        total = ce
        if lam:
            total = T.add(total, T.scale(C.loss_dml(s0.logits, s1.logits), lam))
        total.backward()
        return students[1]

    s1_without = grads_with(0.0)
    s1_with = grads_with(1.0)
    for name, p in s1_with.params.items():
        g_with = p.tensor.grad
        g_without = s1_without.params[name].tensor.grad
        if g_without is None:
            assert g_with is None or not g_with.any()
        else:
            np.testing.assert_array_equal(g_with, g_without)


def test_supervised_reduction_matches_ce_only_implementation():
    # lam = 0 and kd weights 0 must produce exactly the gradients of a plain
    # CE-only training step on the same labeled batch
    teacher = toy_teacher(dropout=False)
    students, sels, projs, settings, opt, batch = _step_harness(
        teacher, lam=0.0, kdw=0.0)
    state = C.ScheduleState(step=0, total_steps=10)
    C.train_step(teacher, students, sels, projs, batch, state, settings, opt)
    # re-derive the expected update by hand on fresh copies
    students2 = [D.init_student(teacher, sel) for sel in sels]
    bound2 = [p for s in students2 for p in s.parameters()]
    opt2 = C.make_optimizer("bert", bound2)
    ce = T.add(
        T.cross_entropy(E.forward(students2[0], batch.labeled).logits, batch.labeled.labels),
        T.cross_entropy(E.forward(students2[1], batch.labeled).logits, batch.labeled.labels),
    )
    opt2.zero_grads()
    ce.backward()
    opt2.step(P.lr_schedule(state, "bert"))
    for s_fast, s_ref in zip(students, students2):
        for name in s_fast.params:
            np.testing.assert_array_equal(
                s_fast.params[name].tensor.data, s_ref.params[name].tensor.data
            )


def test_train_step_teacher_finetune_flag():
    teacher = toy_teacher(dropout=False)
    students, sels, projs, settings, opt, batch = _step_harness(teacher)
    settings.teacher_finetune = True
    for p in teacher.parameters():
        p.trainable = True
    opt_all = C.make_optimizer("bert", [p for s in students for p in s.parameters()]
                               + teacher.parameters())
    state = C.ScheduleState(step=2, total_steps=10)
    bd = C.train_step(teacher, students, sels, projs, batch, state, settings, opt_all)
    assert bd.include_teacher_ce
    assert abs(bd.total - bd.expected_total()) < 1e-12
    # supervised CE (and only it) reaches the teacher when fine-tuning is on
    assert any(p.tensor.grad is not None for p in teacher.parameters())


def test_make_optimizer_regimes():
    teacher = toy_teacher()
    params = teacher.parameters()
    bert_opt = C.make_optimizer("bert", params)
    assert (bert_opt.beta2, bert_opt.eps, bert_opt.decoupled) == (0.999, 1e-8, False)
    mbert_opt = C.make_optimizer("mbert", params)
    assert (mbert_opt.beta2, mbert_opt.eps, mbert_opt.weight_decay) == (0.98, 1e-6, 1e-6)
    assert mbert_opt.decoupled


def test_train_step_nan_aborts_with_step_index():
    teacher = toy_teacher(dropout=False)
    students, sels, projs, settings, opt, batch = _step_harness(teacher)
    students[0].params["head.w"].tensor.data[:] = np.inf
    state = C.ScheduleState(step=7, total_steps=10)
    with np.errstate(invalid="ignore"), pytest.raises(Exception) as exc:
        C.train_step(teacher, students, sels, projs, batch, state, settings, opt)
    assert "7" in str(exc.value)


# ---------------------------------------------------------------------------
# train_loop

def test_train_loop_zero_steps_persists_initial_checkpoint(tmp_path):
    teacher = toy_teacher()
    spec = toy_spec(teacher, steps=0, out_dir=tmp_path / "run")
    result = C.train_loop(spec)
    assert result.best_step == 0
    loaded = E.load_checkpoint(result.best_checkpoint)
    init = D.init_student(teacher, spec.selections[result.best_student])
    for name, p in init.params.items():
        np.testing.assert_array_equal(loaded.params[name].tensor.data, p.tensor.data)


def test_train_loop_metrics_deterministic(tmp_path):
    r1 = C.train_loop(toy_spec(toy_teacher(seed=5), steps=4, seed=9,
                               out_dir=tmp_path / "a"))
    r2 = C.train_loop(toy_spec(toy_teacher(seed=5), steps=4, seed=9,
                               out_dir=tmp_path / "b"))
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "summary.csv").read_bytes() == \
        (tmp_path / "b" / "summary.csv").read_bytes()


def test_train_loop_metrics_parse_back(tmp_path):
    spec = toy_spec(toy_teacher(), steps=4, out_dir=tmp_path / "run")
    result = C.train_loop(spec)
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    parsed = [json.loads(line) for line in lines]
    assert parsed == [
        {k: v for k, v in m.items()} for m in
        json.loads(json.dumps(result.metrics))
    ]
    steps = [m["step"] for m in parsed]
    assert steps == sorted(steps)


def test_train_loop_best_checkpoint_replays_logged_accuracy(tmp_path):
    spec = toy_spec(toy_teacher(seed=2), steps=6, seed=4, out_dir=tmp_path / "run")
    result = C.train_loop(spec)
    model = E.load_checkpoint(result.best_checkpoint)
    acc = C._accuracy(model, spec.dev, spec.max_len)
    logged = max(max(m["dev_acc"]) for m in result.metrics)
    assert acc == logged == result.best_dev_acc
