import math

import numpy as np
import pytest

from oodseg.splits import make_folds, restrict_segmentor
from oodseg.synthgen import EnvSpec, generate_suite
from oodseg.trainer import (
    EnvBatchStream,
    FoldInputs,
    SampleBank,
    TrainConfig,
    TrainingDiverged,
    env_batch_sizes,
    make_env_batches,
    train,
    train_domain_prediction,
    train_erm,
)
from oodseg.volumes import AugmentationConfig

SHAPE = (16, 16, 8)


def tiny_suite(n_labeled=(8, 8, 8), n_unlabeled=(2, 2, 2)):
    specs = [
        EnvSpec(env_id=i, name=f"s{i}", n_labeled=nl, n_unlabeled=nu, volume_shape=SHAPE,
                radius_range=(0.2, 0.25), deformation=0.1, foreground_mean=1.0 - 0.1 * i,
                background_mean=0.3 + 0.05 * i, noise_std=0.05 * (i + 1), spurious_corr=0.5 - 0.5 * i,
                stripe_amplitude=0.05, stripe_axis=i, seed=3)
        for i, (nl, nu) in enumerate(zip(n_labeled, n_unlabeled))
    ]
    return generate_suite(specs)


def tiny_cfg(**kw):
    base = dict(method="erm", learning_rate=1e-3, max_epochs=3, patience=5, warmup_epochs=1,
                joint_epochs=1, base_channels=4, levels=2, batch_budget=4, dp_batch_budget=4,
                augmentation=AugmentationConfig(), seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def suite():
    return tiny_suite()


@pytest.fixture(scope="module")
def plan(suite):
    return make_folds(suite, k=2, val_fraction=0.15, ood_env=2, seed=0)


# -- configuration --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="unknown method"):
        TrainConfig(method="dro")
    with pytest.raises(ValueError, match="experimental"):
        TrainConfig(method="irmv1")
    with pytest.raises(ValueError):
        TrainConfig(lambda_vrex=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="unknown training keys"):
        TrainConfig.from_dict({"method": "erm", "lamda_vrex": 1.0})


def test_config_round_trip():
    cfg = tiny_cfg(method="combined", lambda_vrex=3.0, per_env_batch_sizes={0: 2})
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.reduction == "sum" and TrainConfig().reduction == "mean"
    assert TrainConfig(risk_reduction="mean", method="domain_prediction").reduction == "mean"


# -- batching -----------------------------------------------------------------


def test_env_batch_sizes_proportional():
    assert env_batch_sizes({0: 36, 1: 18}, 6) == {0: 4, 1: 2}
    # every environment gets at least one sample, never more than it has
    assert env_batch_sizes({0: 100, 1: 1}, 4) == {0: 4, 1: 1}
    assert env_batch_sizes({0: 2, 1: 2}, 10) == {0: 2, 1: 2}
    assert env_batch_sizes({0: 10, 1: 10}, 6, override={1: 5}) == {0: 3, 1: 5}


def test_stream_covers_each_environment_each_epoch():
    ids = {0: [f"a{i}" for i in range(10)], 1: [f"b{i}" for i in range(4)]}
    stream = EnvBatchStream(ids, budget=4, seed=1, tag=1)
    steps = stream.epoch(0)
    assert len(steps) == stream.steps_per_epoch
    seen0 = [s for step in steps for s in step[0]]
    assert sorted(seen0) == sorted(ids[0])
    assert set(s for step in steps for s in step[1]) == set(ids[1])
    assert stream.epoch(0) == steps and stream.epoch(1) != steps


def test_unlabeled_only_in_domain_stream(suite, plan):
    cfg = tiny_cfg(method="domain_prediction")
    seg, dp = make_env_batches(plan, 1, cfg)
    labeled = {s.sample_id for ds in suite for s in ds.samples if s.labeled}
    seg_ids = {i for step in seg.epoch(0) for ids in step.values() for i in ids}
    dp_ids = {i for step in dp.epoch(0) for ids in step.values() for i in ids}
    assert seg_ids <= labeled
    assert dp_ids - labeled  # unlabeled samples reach the domain predictor
    assert len(dp.epoch(0)) == len(seg.epoch(0))


# -- training -------------------------------------------------------------------


def test_erm_smoke(suite, plan):
    state = train_erm(suite, plan, 1, tiny_cfg())
    assert [h["stage"] for h in state.history] == ["seg"] * 3
    h = state.history[-1]
    assert set(h["train_risks"]) == {0, 1}
    assert 0 <= h["val_dice"] <= 100 and h["val_domain_accuracy"] is None
    assert set(state.final_risks) == {0, 1}
    assert state.final_risk_variance >= 0
    assert 0 <= state.best_epoch < 3


def test_method_wrapper_checks_method(suite, plan):
    with pytest.raises(ValueError, match="expected 'erm'"):
        train_erm(suite, plan, 1, tiny_cfg(method="vrex"))


def test_vrex_needs_two_environments(suite):
    plan1 = make_folds(suite[:1], k=2, seed=0)
    with pytest.raises(ValueError, match="two training environments"):
        train(suite[:1], plan1, 1, tiny_cfg(method="vrex", lambda_vrex=1.0))


def test_domain_prediction_stages(suite, plan):
    state = train_domain_prediction(suite, plan, 1, tiny_cfg(method="domain_prediction", max_epochs=4))
    assert [h["stage"] for h in state.history] == ["warmup", "joint", "adversarial", "adversarial"]
    assert state.history[0]["domain_loss"] is None
    assert state.history[1]["domain_loss"] is not None and state.history[1]["confusion_loss"] is None
    assert state.history[2]["confusion_loss"] is not None
    assert state.history[2]["val_domain_accuracy"] is not None
    assert "adversarial_start" in state.snapshots
    # model selection only considers adversarial epochs
    assert state.best_epoch >= 2


def test_runs_are_deterministic(suite, plan):
    cfg = tiny_cfg(method="combined", lambda_vrex=2.0, max_epochs=3)
    a = train(suite, plan, 1, cfg)
    b = train(suite, plan, 1, cfg)
    assert a.history == b.history
    for (n, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert np.array_equal(x.numpy(), y.numpy()), n


def test_lambda_zero_reductions_are_exact(suite, plan):
    erm = train(suite, plan, 1, tiny_cfg(method="erm", instrument=True))
    vrex = train(suite, plan, 1, tiny_cfg(method="vrex", lambda_vrex=0.0, instrument=True))
    assert erm.history == vrex.history and erm.step_log == vrex.step_log
    dp = train(suite, plan, 1, tiny_cfg(method="domain_prediction", max_epochs=3, instrument=True))
    comb = train(suite, plan, 1, tiny_cfg(method="combined", lambda_vrex=0.0, max_epochs=3,
                                          instrument=True))
    assert dp.history == comb.history and dp.step_log == comb.step_log


def test_semi_supervised_routing():
    suite = tiny_suite(n_labeled=(0, 8, 8), n_unlabeled=(8, 0, 0))
    plan = make_folds(suite, k=2, val_fraction=0.15, seed=0)
    state = train(suite, plan, 1, tiny_cfg(method="domain_prediction", max_epochs=3, instrument=True))
    dp_steps = [r for r in state.step_log if "dp_counts" in r]
    assert dp_steps
    for rec in state.step_log:
        assert rec["seg_counts"][0] == 0
        assert rec["seg_grad_norm"][0] == 0.0
        assert rec["seg_grad_norm"][1] > 0.0
    assert all(r["dp_counts"][0] > 0 for r in dp_steps)
    assert all(r["dp_grad_norm"] > 0 for r in dp_steps)


def test_budgeted_plan_trains(suite):
    plan = restrict_segmentor(make_folds(suite, k=2, val_fraction=0.2, seed=0), {0: (2, 1)})
    inputs = FoldInputs.from_plan(plan, 1)
    assert len(inputs.seg_train[0]) == 2
    state = train(suite, plan, 1, tiny_cfg(method="combined", lambda_vrex=1.0, max_epochs=2))
    assert len(state.history) == 2


def test_irmv1_is_experimental(suite, plan):
    state = train(suite, plan, 1, tiny_cfg(method="irmv1", irm_weight=1.0, experimental=True,
                                           max_epochs=1))
    assert math.isfinite(state.history[0]["train_objective"])


def test_divergence_raises(suite, plan):
    bank = SampleBank.from_datasets(suite)
    for sid in bank.images:
        bank.images[sid] = np.full_like(bank.images[sid], np.nan)
    with pytest.raises(TrainingDiverged):
        train(suite, plan, 1, tiny_cfg(), bank=bank)


def test_early_stopping_respects_patience(suite, plan):
    state = train(suite, plan, 1, tiny_cfg(max_epochs=30, patience=1, learning_rate=1e-7))
    assert len(state.history) < 30
