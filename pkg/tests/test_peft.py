"""Policy masking, parameter census, and learning-rate schedule tests.

The census expectations are computed from a closed-form count written here,
independent of the package's counting code.
"""

import hashlib

import numpy as np
import pytest

from nanonet import cotrain as C
from nanonet import encoder as E
from nanonet import peft as P
from nanonet.cotrain import ScheduleState
from nanonet.errors import ConfigError

NO_DROP = dict(token_dropout=0.0, hidden_dropout=0.0)


def census(n_layers, d, d_ff, vocab, n_classes, norm_bias=True):
    """Closed-form parameter counts by role for the encoder layout."""
    weight = n_layers * (4 * d * d + 3 * d * d_ff + 2 * d)
    bias = n_layers * (4 * d + 2 * d_ff + d + (2 * d if norm_bias else 0))
    embedding = vocab * d
    head = d * n_classes + n_classes
    return {"weight": weight, "bias": bias, "embedding": embedding, "head": head}


CONFIGS = [
    dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=258, n_classes=4),
    dict(n_layers=3, d_model=16, n_heads=4, d_ff=24, vocab_size=258, n_classes=2),
    dict(n_layers=1, d_model=32, n_heads=2, d_ff=64, vocab_size=258, n_classes=10),
]


@pytest.mark.parametrize("kw", CONFIGS)
def test_census_matches_closed_form(kw):
    cfg = E.EncoderConfig(**kw, **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    expected = census(kw["n_layers"], kw["d_model"], kw["d_ff"],
                      kw["vocab_size"], kw["n_classes"])
    report = P.count_params(model)
    for role, n in expected.items():
        assert report.per_role_counts[role][0] == n, role
    assert report.total_params == sum(expected.values())


@pytest.mark.parametrize("kw", CONFIGS)
def test_bitfit_trainable_census(kw):
    cfg = E.EncoderConfig(**kw, **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    report = P.count_params(model, P.ParamPolicy(bitfit=True))
    expected = census(kw["n_layers"], kw["d_model"], kw["d_ff"],
                      kw["vocab_size"], kw["n_classes"])
    assert report.trainable_params == expected["bias"] + expected["head"]
    assert report.per_role_counts["weight"][1] == 0
    assert report.per_role_counts["embedding"][1] == 0


def test_bitfit_fraction_small_when_embeddings_dominate():
    # a word-sized vocab table makes vocab_size * d_model the dominant term
    cfg = E.EncoderConfig(n_layers=2, d_model=64, n_heads=2, d_ff=128,
                          vocab_size=4096, n_classes=4, **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    report = P.count_params(model, P.ParamPolicy(bitfit=True))
    assert report.trainable_fraction < 0.01


def test_no_policy_everything_trainable():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    report = P.count_params(model)
    assert report.trainable_params == report.total_params


def test_bitfit_flag_pattern():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    P.apply_policy(model, P.ParamPolicy(bitfit=True))
    for p in model.parameters():
        if p.role in ("weight", "embedding"):
            assert not p.trainable, p.name
        else:
            assert p.trainable, p.name
    # every attention/ffn/norm bias stays live
    assert model.params["layers.0.attn.bq"].trainable
    assert model.params["layers.1.ffn.bp"].trainable
    assert model.params["layers.0.attn.norm_bias"].trainable
    assert model.params["head.w"].trainable
    assert not model.params["layers.0.attn.wq"].trainable
    assert not model.params["embedding.table"].trainable


def test_freeze_embeddings_only():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    P.apply_policy(model, P.ParamPolicy(freeze_embeddings=True))
    for p in model.parameters():
        assert p.trainable == (p.role != "embedding"), p.name


def test_train_head_false_freezes_head():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    P.apply_policy(model, P.ParamPolicy(bitfit=True, train_head=False))
    assert not model.params["head.w"].trainable
    assert not model.params["head.b"].trainable


def test_override_pattern_and_warning():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    policy = P.ParamPolicy(bitfit=True, explicit_overrides={"layers.0.attn.wq": True})
    P.apply_policy(model, policy)
    assert model.params["layers.0.attn.wq"].trainable
    with pytest.warns(UserWarning):
        P.apply_policy(model, P.ParamPolicy(explicit_overrides={"no.such.*": False}))


def test_policy_idempotent():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    policy = P.ParamPolicy(bitfit=True, freeze_embeddings=True)
    P.apply_policy(model, policy)
    flags = {p.name: p.trainable for p in model.parameters()}
    P.apply_policy(model, policy)
    assert flags == {p.name: p.trainable for p in model.parameters()}


def _checksums(model, roles):
    return {
        p.name: hashlib.sha256(p.tensor.data.tobytes()).hexdigest()
        for p in model.parameters()
        if p.role in roles
    }


def test_frozen_tensors_bit_identical_after_training():
    cfg = E.EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                          n_classes=2, token_dropout=0.1, hidden_dropout=0.1)
    model = E.EncoderModel.init(cfg, seed=1)
    P.apply_policy(model, P.ParamPolicy(bitfit=True))
    before = _checksums(model, ("weight", "embedding"))
    bias_before = _checksums(model, ("bias",))
    examples = [("aa bb", 0), ("cc dd", 1), ("ee ff", 0), ("gg hh", 1)]
    C.train_supervised(model, examples, steps=100, regime="bert",
                       batch_size=2, seed=2, max_len=8)
    assert _checksums(model, ("weight", "embedding")) == before
    assert _checksums(model, ("bias",)) != bias_before  # biases did move


def test_optimizer_buffers_only_for_trainable():
    cfg = E.EncoderConfig(**CONFIGS[0], **NO_DROP)
    model = E.EncoderModel.init(cfg, seed=0)
    P.apply_policy(model, P.ParamPolicy(bitfit=True))
    opt = C.make_optimizer("bert", model.parameters())
    n_trainable = sum(1 for p in model.parameters() if p.trainable)
    assert len(opt.bound) == n_trainable
    assert len(opt.m) == n_trainable
    assert len(opt.v) == n_trainable


# ---------------------------------------------------------------------------
# learning-rate schedule

def test_lr_both_regimes_start_at_zero():
    state = ScheduleState(step=0, total_steps=1000)
    assert P.lr_schedule(state, "bert") == 0.0
    assert P.lr_schedule(state, "mbert") == 0.0


def test_lr_bert_peak_at_warmup_end():
    state = ScheduleState(step=200, total_steps=1000)
    assert P.lr_schedule(state, "bert") == 5e-4


def test_lr_bert_decays_to_zero():
    state = ScheduleState(step=1000, total_steps=1000)
    assert P.lr_schedule(state, "bert") == 0.0


def test_lr_mbert_final_is_two_percent_of_peak():
    state = ScheduleState(step=1000, total_steps=1000)
    assert abs(P.lr_schedule(state, "mbert") - 2e-5) < 1e-18


def test_lr_mbert_warmup_fraction():
    state = ScheduleState(step=60, total_steps=1000)
    assert P.lr_schedule(state, "mbert") == 1e-3


def test_lr_midpoints_linear():
    # halfway through decay, bert sits at half peak
    state = ScheduleState(step=600, total_steps=1000)
    assert abs(P.lr_schedule(state, "bert") - 2.5e-4) < 1e-18


def test_lr_unknown_regime():
    with pytest.raises(ConfigError):
        P.lr_schedule(ScheduleState(step=0, total_steps=10), "sgd")
