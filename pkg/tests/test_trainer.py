"""Training loop mechanics: determinism, frozen-base integrity, grids.

These tests use deliberately tiny datasets and epoch counts; they check
plumbing and invariants, not learning quality.
"""

import numpy as np
import pytest

from mosld import ConfigError, NumericsError, Rng
from mosld.tasks import IN_DOMAIN_TASKS, DatasetSplit
from mosld.trainer import (GridResult, MethodArm, TrainConfig, as_arm,
                           build_task_data, clone_backbone, dataset_ce,
                           finetune, pretrain_base, run_grid, state_hash,
                           training_split)

TINY = TrainConfig(n_train=48, n_test=16, epochs=1, pretrain_slice=16,
                   batch_size=16)

_cache = {}


def tiny_base():
    if "base" not in _cache:
        data = build_task_data(TINY, Rng(0).split(0))
        train = {k: v for k, v in data.train.items() if k != "succ"}
        _cache["base"] = pretrain_base(TINY, train, Rng(7))
    return _cache["base"]


# ------------------------------------------------------------ validation

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(drop_p=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(balance_weight=-0.1)


def test_arm_validation():
    assert MethodArm("mosld", 0.1).site_kind == "shared"
    assert MethodArm("mosl").site_kind == "shared"
    assert MethodArm("mola").site_kind == "unshared"
    with pytest.raises(ConfigError):
        MethodArm("mosl", 0.1)  # dropout belongs to one arm only
    with pytest.raises(ConfigError):
        MethodArm("gpt4")
    cfg = TrainConfig(drop_p=0.25)
    assert as_arm("mosld", cfg).drop_p == 0.25
    assert as_arm("lora", cfg).drop_p == 0.0
    arm = MethodArm("mosld", 0.5)
    assert as_arm(arm, cfg) is arm


def test_training_split_selection():
    data = build_task_data(TINY, Rng(1))
    single = training_split(data, "copy", Rng(2))
    assert single.tasks() == ("copy",)
    mix = training_split(data, "mixture", Rng(2))
    assert set(mix.tasks()) == set(IN_DOMAIN_TASKS)
    assert len(mix) == sum(len(data.train[t]) for t in IN_DOMAIN_TASKS)
    with pytest.raises(ConfigError):
        training_split(data, "riddles", Rng(2))


# -------------------------------------------------------------- pretrain

def test_pretrain_reduces_loss_and_hashes():
    pre = tiny_base()
    assert pre.ce_final < pre.ce_initial
    assert 3.0 < pre.ce_initial < 6.0  # near-uniform over 64 tokens
    assert pre.base_hash == state_hash(pre.base.state())
    assert len(pre.loss_history) >= 1


def test_pretrain_refuses_held_out_task():
    data = build_task_data(TINY, Rng(3))
    with pytest.raises(ConfigError):
        pretrain_base(TINY, data.train, Rng(4))  # includes succ


def test_pretrain_refuses_test_splits():
    data = build_task_data(TINY, Rng(3))
    bad = {"copy": data.test["copy"], "sort": data.train["sort"]}
    with pytest.raises(ConfigError):
        pretrain_base(TINY, bad, Rng(4))


# ----------------------------------------------------------- determinism

def test_finetune_bit_exact_reproducible():
    pre = tiny_base()
    a = finetune("mosld", "copy", TINY, pre.base, Rng(11))
    b = finetune("mosld", "copy", TINY, pre.base, Rng(11))
    assert a.fingerprint() == b.fingerprint()
    c = finetune("mosld", "copy", TINY, pre.base, Rng(12))
    assert a.fingerprint() != c.fingerprint()


def test_finetune_leaves_caller_base_untouched():
    pre = tiny_base()
    before = state_hash(pre.base.state())
    finetune("fp", "copy", TINY, pre.base, Rng(13))
    assert state_hash(pre.base.state()) == before


def test_frozen_base_integrity_per_arm():
    pre = tiny_base()
    for arm in ("lora", "mola", "mosl", "mosld"):
        r = finetune(arm, "copy", TINY, pre.base, Rng(14))
        assert r.base_hash_start == r.base_hash_end == pre.base_hash, arm
    r = finetune("fp", "copy", TINY, pre.base, Rng(14))
    assert r.base_hash_start == pre.base_hash
    assert r.base_hash_end != r.base_hash_start


def test_balance_weight_is_inert_for_router_free_arm():
    pre = tiny_base()
    on = finetune("lora", "copy", TINY, pre.base, Rng(15))
    off_cfg = TrainConfig(n_train=48, n_test=16, epochs=1,
                          pretrain_slice=16, batch_size=16,
                          balance_weight=0.0)
    off = finetune("lora", "copy", off_cfg, pre.base, Rng(15))
    assert on.fingerprint() == off.fingerprint()
    assert on.routing_cv is None
    assert on.expert_fractions == {}


def test_shared_arms_identical_without_dropout():
    pre = tiny_base()
    mosl = finetune(MethodArm("mosl"), "sort", TINY, pre.base, Rng(16))
    nodrop = finetune(MethodArm("mosld", 0.0), "sort", TINY, pre.base,
                      Rng(16))
    assert mosl.loss_history == nodrop.loss_history
    assert set(mosl.trainable_state) == set(nodrop.trainable_state)
    for k, v in mosl.trainable_state.items():
        assert v.tobytes() == nodrop.trainable_state[k].tobytes()
    dropped = finetune(MethodArm("mosld", 0.5), "sort", TINY, pre.base,
                       Rng(16))
    assert dropped.loss_history != mosl.loss_history


def test_optimizers_both_run():
    pre = tiny_base()
    sgd_cfg = TrainConfig(n_train=48, n_test=16, epochs=1,
                          pretrain_slice=16, batch_size=16,
                          optimizer="sgd")
    a = finetune("mosld", "copy", sgd_cfg, pre.base, Rng(17))
    b = finetune("mosld", "copy", TINY, pre.base, Rng(17))
    assert a.loss_history[0] == b.loss_history[0]  # same first batch
    assert a.fingerprint() != b.fingerprint()


# ------------------------------------------------------------ evaluation

def test_succ_setting_evaluates_held_out_task():
    pre = tiny_base()
    r = finetune("mosld", "succ", TINY, pre.base, Rng(18))
    assert "succ" in r.per_task
    in_domain = [r.per_task[t] for t in IN_DOMAIN_TASKS]
    np.testing.assert_allclose(r.macro, np.mean(in_domain), atol=1e-12)
    assert r.own_accuracy == r.per_task["succ"]


def test_dataset_ce_weighs_all_answer_positions():
    pre = tiny_base()
    data = build_task_data(TINY, Rng(19))
    from mosld.backbone import attach_adapters
    model = attach_adapters(clone_backbone(pre.base), None, None, None,
                            kind="fp")
    whole = dataset_ce(model, data.train["copy"])
    small = dataset_ce(model, data.train["copy"], batch_size=7)
    np.testing.assert_allclose(whole, small, rtol=1e-12)


# ------------------------------------------------------------- divergence

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good_state():
    pre = tiny_base()
    bad = TrainConfig(n_train=48, n_test=16, epochs=2, pretrain_slice=16,
                      batch_size=16, optimizer="sgd", lr=1e300)
    with pytest.raises(NumericsError) as exc_info:
        finetune("fp", "copy", bad, pre.base, Rng(20))
    exc = exc_info.value
    assert hasattr(exc, "last_good")
    assert len(exc.last_good) > 0
    assert all(isinstance(v, np.ndarray) for v in exc.last_good.values())
    assert "step" in str(exc)


# ------------------------------------------------------------------ grid

def test_run_grid_shape_and_deltas():
    pre = tiny_base()
    grid = run_grid(["lora", "mosld"], ["copy", "sort", "mixture"],
                    [0, 1], TINY, pre.base)
    assert len(grid.rows) == 2 * 3 * 2
    for arm in ("lora", "mosld"):
        for seed in (0, 1):
            mix = grid.row(arm, "mixture", seed)
            singles = [grid.row(arm, s, seed).own_accuracy
                       for s in ("copy", "sort")]
            want = mix.macro - np.mean(singles)
            np.testing.assert_allclose(grid.deltas[(arm, seed)], want,
                                       atol=1e-12)
    dm = grid.delta_mean("lora")
    np.testing.assert_allclose(
        dm, np.mean([grid.deltas[("lora", 0)], grid.deltas[("lora", 1)]]),
        atol=1e-12)


def test_run_grid_rejects_duplicates():
    pre = tiny_base()
    with pytest.raises(ConfigError):
        run_grid(["lora", "lora"], ["copy"], [0], TINY, pre.base)
    with pytest.raises(ConfigError):
        run_grid(["lora"], ["copy", "copy"], [0], TINY, pre.base)


# --------------------------------------------------------------- helpers

def test_state_hash_properties():
    a = {"x": np.ones(3), "y": np.arange(3.0)}
    b = {"y": np.arange(3.0), "x": np.ones(3)}
    assert state_hash(a) == state_hash(b)
    c = {"x": np.ones(3), "y": np.arange(3.0) + 1e-300}
    assert state_hash(a) != state_hash(c)


def test_clone_backbone_is_independent():
    pre = tiny_base()
    clone = clone_backbone(pre.base)
    name = next(iter(clone.params))
    clone.params[name].value = clone.params[name].value + 1.0
    assert state_hash(pre.base.state()) == pre.base_hash
    assert state_hash(clone.state()) != pre.base_hash
