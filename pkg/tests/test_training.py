import json

import numpy as np
import pytest

from models.config import LossConfig, Stage1Config, Stage2Config, TrainConfig
from models.errors import ArchitectureMismatchError, ConfigError, ShapeError, TrainingDivergedError
from storage.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from synth.dataset import PatchSet
from training.optim import OptimizerState, adam_step, lr_schedule, sgd_momentum_step
from training.trainer import (
    build_model,
    finetune_joint,
    load_model,
    pretrain_generators,
    restore_generators,
    save_model,
    transfer_finetune,
)


@pytest.fixture
def patches(rng):
    labels = np.array([0] * 8 + [1] * 4)
    images = rng.uniform(0, 1, (12, 3, 16, 16)).astype(np.float32)
    # class 1 gets a dark centre so the task is learnable
    images[labels == 1, :, 6:10, 6:10] *= 0.3
    return PatchSet(images=images, labels=labels, class_names=["gs", "ss"])


def _train_config(**stage2):
    defaults = {"epochs": 2, "freeze_generator_epochs": 1, "decay_every": 1, "batch_size": 4, "augment": False}
    defaults.update(stage2)
    return TrainConfig(stage2=Stage2Config(**defaults), target_stains=[1], seed=0)


# =============================================================================
# Optimizers and schedule
# =============================================================================

class TestSchedule:

    def test_step_decay(self):
        cfg = Stage2Config()
        assert lr_schedule(0, cfg) == pytest.approx(0.01)
        assert lr_schedule(4, cfg) == pytest.approx(0.01)
        assert lr_schedule(5, cfg) == pytest.approx(0.001)
        assert lr_schedule(29, cfg) == pytest.approx(1e-7)

    def test_epoch_out_of_range(self):
        with pytest.raises(ConfigError):
            lr_schedule(30, Stage2Config())

    def test_freeze_longer_than_run_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(stage2=Stage2Config(epochs=3, freeze_generator_epochs=4))


class TestOptimizers:

    def test_sgd_momentum_two_steps(self):
        params = {"w": np.array([1.0], dtype=np.float32)}
        state = OptimizerState("sgd")
        grad = {"w": np.array([0.5], dtype=np.float32)}
        sgd_momentum_step(params, grad, state, lr=0.1, momentum=0.5)
        assert params["w"][0] == pytest.approx(0.95)
        sgd_momentum_step(params, grad, state, lr=0.1, momentum=0.5)
        assert params["w"][0] == pytest.approx(0.875)
        assert state.step == 2

    def test_sgd_leaves_absent_parameters(self):
        params = {"a": np.ones(2, dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
        sgd_momentum_step(params, {"a": np.ones(2, dtype=np.float32)}, OptimizerState("sgd"), lr=0.1, momentum=0.0)
        np.testing.assert_array_equal(params["b"], [1.0, 1.0])
        np.testing.assert_allclose(params["a"], [0.9, 0.9])

    def test_adam_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -1.0], dtype=np.float32)}
        adam_step(params, {"w": np.array([2.0, -0.01], dtype=np.float32)}, OptimizerState("adam"), lr=0.1)
        np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-5)

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimizerState("sgd"), 0.1, 0.5)

    def test_state_round_trip(self):
        state = OptimizerState("adam", step=3, buffers={"m:w": np.ones(2, dtype=np.float32)})
        restored = OptimizerState.from_dict(state.as_dict())
        assert restored.step == 3 and restored.kind == "adam"
        np.testing.assert_array_equal(restored.buffers["m:w"], np.ones(2))


# =============================================================================
# Stage 2
# =============================================================================

class TestFinetune:

    def test_generators_frozen_then_trained(self, patches, tiny_model_config, tmp_path):
        cfg = _train_config(epochs=6, freeze_generator_epochs=5, decay_every=5)
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        before = model.generator_hash()
        metrics = tmp_path / "metrics.jsonl"

        model, history = finetune_joint(model, patches, cfg, LossConfig(), metrics_path=str(metrics))

        frozen = history.epochs[:5]
        assert all(not e.generators_trainable for e in frozen)
        assert all(e.generator_hash == before for e in frozen)
        assert history.epochs[5].generators_trainable
        assert history.epochs[5].generator_hash != before
        lines = metrics.read_text().splitlines()
        assert len(lines) == 6
        assert json.loads(lines[0])["epoch"] == 0

    def test_frozen_mode_never_updates_generators(self, patches, tiny_model_config):
        cfg = _train_config(epochs=2, freeze_generator_epochs=0).model_copy(update={"joint": False})
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        before = model.generator_hash()
        model, history = finetune_joint(model, patches, cfg)
        assert model.generator_hash() == before
        assert not any(e.generators_trainable for e in history.epochs)

    def test_single_stain_baseline(self, patches, tiny_model_config):
        cfg = _train_config().model_copy(update={"target_stains": []})
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[])
        model, history = finetune_joint(model, patches, cfg, test=patches)
        assert model.M == 0 and model.classifier.num_stains == 1
        assert model.generator_hash() is None
        assert history.epochs[-1].test_balanced_accuracy is not None
        assert model.predict(patches.images).shape == (12,)

    def test_accumulated_steps_follow_schedule(self, patches, tiny_model_config):
        cfg = _train_config(epochs=2, decay_every=1, batch_size=2, accumulate_steps=3)
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        _, history = finetune_joint(model, patches, cfg)
        # 12 patches, batches of 2, 3 batches per update -> 2 updates per epoch
        assert history.step_lrs == pytest.approx([0.01, 0.01, 0.001, 0.001])

    def test_stain_mismatch(self, patches, tiny_model_config):
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[2])
        with pytest.raises(ConfigError):
            finetune_joint(model, patches, _train_config())

    def test_divergence_is_reported(self, patches, tiny_model_config):
        cfg = _train_config(lr0=1e30, batch_size=2)
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        with pytest.raises(TrainingDivergedError):
            finetune_joint(model, patches, cfg)


# =============================================================================
# Checkpointed models and transfer
# =============================================================================

class TestModelCheckpoints:

    def test_saved_model_predicts_identically(self, patches, tiny_model_config, tmp_path):
        model = build_model(tiny_model_config, 2, seed=4, target_stains=[1], class_names=["gs", "ss"])
        path = tmp_path / "model.g2c"
        save_checkpoint(model, path, meta={"class_names": model.class_names})
        loaded = load_model(load_checkpoint(path), tiny_model_config)
        assert loaded.class_names == ["gs", "ss"]
        assert loaded.generator_hash() == model.generator_hash()
        np.testing.assert_array_equal(loaded.logits(patches.images), model.logits(patches.images))

    def test_optimizer_state_is_saved_with_the_model(self, patches, tiny_model_config, tmp_path):
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        model, history = finetune_joint(model, patches, _train_config(epochs=2, freeze_generator_epochs=1))
        path = tmp_path / "model.g2c"
        save_model(model, path, meta={"seed": 0})

        checkpoint = load_checkpoint(path)
        assert checkpoint.meta["class_names"] == ["gs", "ss"]
        assert checkpoint.state["kind"] == "sgd"
        assert checkpoint.state["step"] == len(history.step_lrs)
        assert "v:classifier/head.w" in checkpoint.state["buffers"]
        assert "v:generator.1/exit.w" in checkpoint.state["buffers"]

        loaded = load_model(checkpoint, tiny_model_config)
        np.testing.assert_array_equal(loaded.optimizer_state.buffers["v:classifier/head.w"],
                                      model.optimizer_state.buffers["v:classifier/head.w"])

    def test_transfer_rejects_wrong_image_size(self, patches, tiny_model_config):
        model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
        checkpoint = decode_checkpoint(encode_checkpoint(model))
        other = tiny_model_config.model_copy(update={"image_size": 32})
        with pytest.raises(ArchitectureMismatchError, match="image_size"):
            transfer_finetune(checkpoint, patches, _train_config(), other)

    def test_transfer_keeps_generators_and_resets_classifier(self, patches, tiny_model_config):
        source = build_model(tiny_model_config, 3, seed=0, target_stains=[1])
        checkpoint = decode_checkpoint(encode_checkpoint(source))
        assert restore_generators(checkpoint, [1], tiny_model_config)[1].digest() == source.generators[1].digest()

        model, history = transfer_finetune(checkpoint, patches, _train_config(epochs=1), tiny_model_config)
        assert model.classifier.num_classes == 2
        assert len(history.epochs) == 1


# =============================================================================
# Stage 1
# =============================================================================

class TestPretrain:

    def test_one_epoch_per_stain(self, rng, tiny_model_config, tmp_path):
        references = {s: rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32) for s in (0, 1, 2)}
        metrics = tmp_path / "pretrain.jsonl"
        generators, history = pretrain_generators(
            references, tiny_model_config, Stage1Config(epochs=1, batch_size=2), [1, 2],
            metrics_path=str(metrics),
        )
        assert sorted(generators) == [1, 2]
        assert generators[2].stain_pair == (0, 2)
        assert len(history.for_stain(1)) == 1
        assert all(np.isfinite([e.g_adv, e.cycle, e.d_loss]).all() for e in history.epochs)
        assert len(metrics.read_text().splitlines()) == 2

    def test_missing_reference_set(self, rng, tiny_model_config):
        references = {0: rng.uniform(0, 1, (4, 3, 16, 16))}
        with pytest.raises(ConfigError):
            pretrain_generators(references, tiny_model_config, Stage1Config(epochs=1), [1])


# =============================================================================
# Determinism
# =============================================================================

class TestDeterminism:

    def test_pretraining_repeats_bitwise(self, rng, tiny_model_config):
        references = {s: rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32) for s in (0, 1)}
        runs = [
            pretrain_generators(references, tiny_model_config, Stage1Config(epochs=1, batch_size=2), [1], seed=7)
            for _ in range(2)
        ]
        (first, first_history), (second, second_history) = runs
        assert first[1].digest() == second[1].digest()
        assert first_history == second_history

    def test_finetuning_repeats_bitwise(self, patches, tiny_model_config):
        cfg = _train_config(epochs=2, freeze_generator_epochs=1, augment=True)
        models = []
        for _ in range(2):
            model = build_model(tiny_model_config, 2, seed=0, target_stains=[1])
            models.append(finetune_joint(model, patches, cfg)[0])
        assert models[0].classifier.digest() == models[1].classifier.digest()
        assert models[0].generator_hash() == models[1].generator_hash()
        np.testing.assert_array_equal(models[0].logits(patches.images), models[1].logits(patches.images))
