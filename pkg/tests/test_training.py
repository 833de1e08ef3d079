"""The loss (closed forms and a finite-difference oracle), run
configuration, deterministic logging, checkpointing, and bit-exact
resumption."""

import math

import numpy as np
import pytest

from somnoscore import autodiff as ad
from somnoscore.errors import (
    BadLabel,
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    DivergedLoss,
    EmptySplit,
)
from somnoscore.model import ModelConfig, load_params, save_params, init_params
from somnoscore.training import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    LossWeights,
    RunConfig,
    TrainLog,
    evaluate_split,
    resume,
    train,
    weighted_cross_entropy,
)


def loss_of(logits, labels, weights=None):
    t = ad.as_tensor(np.asarray(logits, dtype=np.float64))
    return float(weighted_cross_entropy(t, np.asarray(labels), weights).data)


class TestLossClosedForms:
    def test_uniform_logits_unit_weights_is_ln5(self):
        value = loss_of(np.zeros((1, 5)), [2], LossWeights((1.0,) * 5))
        assert value == pytest.approx(math.log(5.0), abs=1e-9)

    def test_uniform_logits_n1_default_weights_is_5ln5(self):
        # N1 carries weight 5.0 in the default table
        value = loss_of(np.zeros((1, 5)), [1], LossWeights())
        assert value == pytest.approx(5.0 * math.log(5.0), abs=1e-9)

    def test_unit_weights_equal_no_weights(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        assert loss_of(logits, labels, LossWeights((1.0,) * 5)) == \
            pytest.approx(loss_of(logits, labels, None), abs=1e-12)

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 1, 3, 4])
        shifted = logits + rng.normal(size=(4, 1)) * 7.0
        assert loss_of(shifted, labels, LossWeights()) == \
            pytest.approx(loss_of(logits, labels, LossWeights()), abs=1e-9)

    def test_weight_scaling_scales_loss(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 5))
        labels = rng.integers(0, 5, size=5)
        one = loss_of(logits, labels, LossWeights((0.9, 5.0, 0.9, 0.9, 0.9)))
        two = loss_of(logits, labels, LossWeights((1.8, 10.0, 1.8, 1.8, 1.8)))
        assert two == pytest.approx(2.0 * one, rel=1e-12)

    def test_mean_reduction_over_batch(self):
        logits = np.array([[2.0, 0.0, -1.0, 0.5, 0.3]])
        single = loss_of(logits, [0], LossWeights())
        stacked = loss_of(np.repeat(logits, 8, axis=0), [0] * 8, LossWeights())
        assert stacked == pytest.approx(single, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 5))
        labels = np.array([1, 4, 0])
        t = ad.Tensor(logits.copy(), requires_grad=True)
        loss = weighted_cross_entropy(t, labels, LossWeights())
        ad.backward(loss)
        eps = 1e-6
        for i in range(3):
            for j in range(5):
                bumped = logits.copy()
                bumped[i, j] += eps
                up = loss_of(bumped, labels, LossWeights())
                bumped[i, j] -= 2 * eps
                down = loss_of(bumped, labels, LossWeights())
                assert t.grad[i, j] == pytest.approx((up - down) / (2 * eps),
                                                     abs=1e-6)

    def test_label_validation(self):
        logits = np.zeros((2, 5))
        with pytest.raises(BadLabel):
            loss_of(logits, np.array([0.5, 1.0]))
        with pytest.raises(BadLabel):
            loss_of(logits, [0, 5])

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights((1.0, 0.0, 1.0, 1.0, 1.0))
        with pytest.raises(ConfigError):
            LossWeights((1.0, 1.0, 1.0, 1.0))
        with pytest.raises(ConfigError):
            loss_of(np.zeros((1, 5)), [0], np.array([1, 1, -1, 1, 1.0]))


class TestRunConfig:
    def test_json_roundtrip(self, tmp_path):
        config = RunConfig(model=ModelConfig(model_dim=16, head_dim=16),
                           lr=0.01, batch_size=4, seed=3,
                           loss_weights=LossWeights((1, 1, 2, 1, 1)))
        path = tmp_path / "run.json"
        config.to_json(path)
        assert RunConfig.from_json(path) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"learning_rate": 0.1})

    def test_value_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(lr=0.0)
        with pytest.raises(ConfigError):
            RunConfig(eval_every=0)
        with pytest.raises(ConfigError):
            RunConfig(metric_for_checkpoint="loss")

    def test_overrides(self):
        base = RunConfig()
        out = base.apply_overrides({"lr": 0.5, "model.blocks": 2,
                                    "model": {"model_dim": 32, "head_dim": 32}})
        assert out.lr == 0.5
        assert out.model.blocks == 2
        assert out.model.model_dim == 32
        assert out.batch_size == base.batch_size

    def test_override_unknown_keys(self):
        with pytest.raises(ConfigError):
            RunConfig().apply_overrides({"momentum": 0.9})
        with pytest.raises(ConfigError):
            RunConfig().apply_overrides({"model.n_layers": 2})
        with pytest.raises(ConfigError):
            RunConfig().apply_overrides({"model": {"n_layers": 2}})


class TestTrainLog:
    def test_jsonl_roundtrip(self, tmp_path):
        log = TrainLog(records=[
            {"iteration": 2, "train_loss": 1.5, "val_accuracy": 0.5,
             "val_weighted_f1": 0.4, "val_kappa": 0.3, "wall_time": 1.0},
        ], best_iteration=2, best_metric=0.5, best_path="x/best.ssck")
        path = tmp_path / "log.jsonl"
        log.to_jsonl(path)
        back = TrainLog.from_jsonl(path)
        assert back.records == log.records
        assert back.best_iteration == 2
        assert back.best_path == "x/best.ssck"

    def test_canonical_strips_wall_time(self):
        log = TrainLog(records=[{"iteration": 1, "train_loss": 2.0,
                                 "wall_time": 123.0}])
        assert log.canonical()["records"] == [{"iteration": 1, "train_loss": 2.0}]


def run_config(tiny_config, tmp_path, name, **kw):
    kw.setdefault("lr", 0.003)
    kw.setdefault("batch_size", 8)
    kw.setdefault("max_iterations", 4)
    kw.setdefault("eval_every", 2)
    kw.setdefault("seed", 7)
    return RunConfig(model=tiny_config, checkpoint_dir=str(tmp_path / name), **kw)


def params_bytes(path):
    _, params, _, state = load_params(path, dtype="float32")
    blob = b"".join(params[k].data.tobytes() for k in sorted(params))
    blob += b"".join(state[k].tobytes() for k in sorted(state))
    return blob


class TestTrainingLoop:
    def test_loss_descends_and_checkpoints_appear(self, tiny_config,
                                                  small_store, tmp_path):
        config = run_config(tiny_config, tmp_path, "descent",
                            max_iterations=60, eval_every=15)
        log = train(config, small_store)
        assert [r["iteration"] for r in log.records] == [15, 30, 45, 60]
        assert log.records[-1]["train_loss"] < log.records[0]["train_loss"]
        assert (tmp_path / "descent" / BEST_CHECKPOINT).exists()
        assert (tmp_path / "descent" / LAST_CHECKPOINT).exists()
        # the best pointer follows the argmax of the checkpoint metric
        metrics = [r["val_accuracy"] for r in log.records]
        assert log.best_metric == max(metrics)
        assert log.best_iteration == log.records[
            metrics.index(max(metrics))]["iteration"]
        # best checkpoint reloads and predicts over the val split
        _, params, extra, _ = load_params(tmp_path / "descent" / BEST_CHECKPOINT,
                                          dtype="float32")
        preds, truth = evaluate_split(params, tiny_config, small_store, "val")
        assert preds.shape == truth.shape

    def test_same_seed_is_bitwise_reproducible(self, tiny_config, small_store,
                                               tmp_path):
        a = train(run_config(tiny_config, tmp_path, "rep-a"), small_store)
        b = train(run_config(tiny_config, tmp_path, "rep-b"), small_store)
        assert a.canonical() == b.canonical()
        assert params_bytes(tmp_path / "rep-a" / LAST_CHECKPOINT) == \
            params_bytes(tmp_path / "rep-b" / LAST_CHECKPOINT)

    def test_different_seed_changes_the_run(self, tiny_config, small_store,
                                            tmp_path):
        a = train(run_config(tiny_config, tmp_path, "seed-a"), small_store)
        b = train(run_config(tiny_config, tmp_path, "seed-b", seed=8),
                  small_store)
        assert a.canonical() != b.canonical()

    def test_resume_is_bitwise_identical_to_straight_run(self, tiny_config,
                                                         small_store, tmp_path):
        straight = run_config(tiny_config, tmp_path, "straight",
                              max_iterations=6, eval_every=3)
        full_log = train(straight, small_store)

        half = run_config(tiny_config, tmp_path, "halved",
                          max_iterations=3, eval_every=3)
        train(half, small_store)
        extended = run_config(tiny_config, tmp_path, "halved",
                              max_iterations=6, eval_every=3)
        resumed_log = resume(tmp_path / "halved" / LAST_CHECKPOINT,
                             extended, small_store)

        assert resumed_log.canonical() == full_log.canonical()
        assert params_bytes(tmp_path / "straight" / LAST_CHECKPOINT) == \
            params_bytes(tmp_path / "halved" / LAST_CHECKPOINT)

    def test_resume_rejects_drifted_config(self, tiny_config, small_store,
                                           tmp_path):
        config = run_config(tiny_config, tmp_path, "drift")
        train(config, small_store)
        changed = run_config(tiny_config, tmp_path, "drift",
                             max_iterations=8, lr=0.01)
        with pytest.raises(ConfigMismatch) as info:
            resume(tmp_path / "drift" / LAST_CHECKPOINT, changed, small_store)
        assert "lr" in str(info.value)

    def test_resume_rejects_exhausted_horizon(self, tiny_config, small_store,
                                              tmp_path):
        config = run_config(tiny_config, tmp_path, "done")
        train(config, small_store)
        with pytest.raises(ConfigMismatch):
            resume(tmp_path / "done" / LAST_CHECKPOINT, config, small_store)

    def test_resume_rejects_non_training_checkpoint(self, tiny_config,
                                                    small_store, tmp_path):
        path = tmp_path / "plain.ssck"
        save_params(path, tiny_config, init_params(tiny_config, 0))
        config = run_config(tiny_config, tmp_path, "nope")
        with pytest.raises(ConfigMismatch):
            resume(path, config, small_store)

    def test_resume_missing_file(self, tiny_config, small_store, tmp_path):
        config = run_config(tiny_config, tmp_path, "gone")
        with pytest.raises(CorruptCheckpoint):
            resume(tmp_path / "gone" / LAST_CHECKPOINT, config, small_store)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_loss_dumps_state(self, tiny_config, small_store,
                                       tmp_path):
        config = run_config(tiny_config, tmp_path, "boom", lr=1e30,
                            max_iterations=20, eval_every=20)
        with pytest.raises(DivergedLoss):
            train(config, small_store)
        assert (tmp_path / "boom" / "diverged.ssck").exists()

    def test_train_requires_both_splits(self, tiny_config, small_store):
        config = RunConfig(model=tiny_config, max_iterations=2, eval_every=1)
        unsplit = small_store.with_splits({})
        with pytest.raises(EmptySplit):
            train(config, unsplit)

    def test_evaluate_split_empty(self, tiny_config, small_store):
        params = init_params(tiny_config, 0)
        with pytest.raises(EmptySplit):
            evaluate_split(params, tiny_config, small_store.with_splits({}),
                           "test")

    def test_single_column_evaluation_shape(self, tiny_config, small_store):
        from somnoscore.model import single_channel_config

        narrow = single_channel_config(tiny_config)
        params = init_params(narrow, 0)
        preds, truth = evaluate_split(params, narrow, small_store, "val",
                                      column=2)
        assert preds.shape == truth.shape
