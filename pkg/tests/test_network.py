"""Tests for the CNN stack, checkpoints, and the training loop."""

import os

import numpy as np
import pytest

from despeckle import autodiff as ad
from despeckle.autodiff import Tape, Tensor
from despeckle.errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    ShapeError,
    StateError,
)
from despeckle.losses import LossWeights, l2_loss
from despeckle.network import (
    CHECKPOINT_MAGIC,
    PRESETS,
    Model,
    NetworkConfig,
    build,
    despeckle,
    grid_audit,
    load_checkpoint,
    param_count,
    resolve_preset,
    save_checkpoint,
)
from despeckle.optim import Adam
from despeckle.training import evaluate_validation, train

AUDITED_COUNTS = {
    "m1t": 75_105,
    "m1l": 297_665,
    "m2t": 93_729,
    "m2l": 371_777,
    "m3t": 121_665,
    "m3l": 482_945,
    "m4t": 140_289,
    "m4l": 557_057,
}


def tiny_model(seed=0, depth=3, width=4, dtype=np.float32):
    return build(NetworkConfig(depth=depth, width=width, seed=seed), dtype=dtype)


def tiny_patches(n, size=12, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 1.0, size=(n, 1, size, size)).astype(np.float32)


class TestNetworkConfig:
    def test_model_id(self):
        assert NetworkConfig(depth=10, width=32).model_id == "d10w32k3"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"depth": 2, "width": 32},
            {"depth": 65, "width": 32},
            {"depth": 10.5, "width": 32},
            {"depth": 10, "width": 0},
            {"depth": 10, "width": -4},
            {"depth": 10, "width": 32, "kernel": 2},
            {"depth": 10, "width": 32, "kernel": -3},
        ],
    )
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            NetworkConfig(**kwargs)


class TestParamCount:
    def test_minimal_network(self):
        # d=3, n_f=1, K=3: head 9+1, one inner 9+1+2, tail 9+1.
        assert param_count(NetworkConfig(depth=3, width=1)) == 32

    @pytest.mark.parametrize("name,expected", sorted(AUDITED_COUNTS.items()))
    def test_preset_counts(self, name, expected):
        p = PRESETS[name]
        assert param_count(NetworkConfig(depth=p.depth, width=p.width)) == expected

    @pytest.mark.parametrize(
        "depth,width,kernel",
        [(3, 1, 3), (3, 4, 3), (5, 7, 5), (10, 32, 3), (4, 2, 1)],
    )
    def test_matches_enumeration(self, depth, width, kernel):
        config = NetworkConfig(depth=depth, width=width, kernel=kernel)
        model = Model(config)
        assert param_count(config) == sum(p.size for p in model.parameters())


class TestPresets:
    @pytest.mark.parametrize("spelling", ["m1t", "M1T", "m1_t", "M1-t", " m1t "])
    def test_resolve_spellings(self, spelling):
        assert resolve_preset(spelling).name == "m1t"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            resolve_preset("m9x")

    def test_grid_audit(self):
        records = grid_audit()
        assert len(records) == 8
        for rec in records:
            assert rec["param_count"] == AUDITED_COUNTS[rec["preset"]]
            assert rec["enumerated_params"] == rec["param_count"]
            # published counts undershoot direct counting by a wide margin
            assert rec["published_to_audited_ratio"] < 0.1
        assert {r["table_name"] for r in records} == {
            "M1_t", "M1_l", "M2_t", "M2_l", "M3_t", "M3_l", "M4_t", "M4_l",
        }


class TestModelForward:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_shape_preserved_all_presets(self, name):
        p = PRESETS[name]
        model = build(NetworkConfig(depth=p.depth, width=p.width))
        x = Tensor(np.random.default_rng(0).uniform(0.1, 1, (1, 1, 16, 16)).astype(np.float32))
        out = model.forward(x, training=True)
        assert out.shape == (1, 1, 16, 16)

    def test_nonsquare_input(self):
        model = tiny_model()
        x = Tensor(np.random.default_rng(1).uniform(0.1, 1, (2, 1, 9, 13)).astype(np.float32))
        assert model.forward(x, training=True).shape == (2, 1, 9, 13)

    @pytest.mark.parametrize("shape", [(4, 12, 12), (2, 3, 12, 12), (12, 12)])
    def test_bad_input_shape(self, shape):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros(shape, dtype=np.float32)))

    def test_fresh_init_produces_gradient_everywhere(self):
        model = tiny_model(depth=4, width=4)
        x = Tensor(tiny_patches(2, seed=2))
        ref = Tensor(tiny_patches(2, seed=3))
        with Tape() as tape:
            loss = l2_loss(model.forward(x, training=True), ref)
            tape.backward(loss)
        for p in model.parameters():
            assert p.grad is not None
            assert float(np.abs(p.grad).max()) > 1e-12

    def test_eval_before_any_training_update(self):
        model = tiny_model().eval()
        with pytest.raises(StateError):
            model.forward(Tensor(tiny_patches(1)))

    def test_eval_output_independent_of_batch_composition(self):
        model = tiny_model(depth=4, width=8)
        warmup = Tensor(tiny_patches(4, seed=4))
        model.forward(warmup, training=True)  # populate BN running stats

        batch = tiny_patches(5, seed=5)
        alone = model.forward(Tensor(batch[2:3]), training=False).data
        together = model.forward(Tensor(batch), training=False).data[2:3]
        np.testing.assert_allclose(alone, together, rtol=1e-5, atol=1e-6)

    def test_train_eval_toggle(self):
        model = tiny_model()
        assert model.training
        assert model.eval() is model
        assert not model.training
        assert model.train() is model
        assert model.training


class TestDespeckle:
    def make_ready_model(self, seed=0):
        model = tiny_model(seed=seed, depth=4, width=8)
        model.forward(Tensor(tiny_patches(4, seed=6)), training=True)
        return model

    def test_output_clamped_nonnegative(self):
        model = self.make_ready_model()
        noisy = tiny_patches(3, seed=7)
        raw = model.forward(Tensor(noisy), training=False).data
        assert raw.min() < 0  # fresh init does emit negatives pre-clamp
        out = despeckle(model, noisy)
        assert np.all(out.data >= 0)
        np.testing.assert_array_equal(out.data, np.maximum(raw, 0))

    def test_deterministic(self):
        model = self.make_ready_model()
        noisy = tiny_patches(2, seed=8)
        a = despeckle(model, noisy).data
        b = despeckle(model, noisy).data
        assert np.array_equal(a, b)

    def test_all_zero_input_finite(self):
        model = self.make_ready_model()
        out = despeckle(model, np.zeros((1, 1, 12, 12), dtype=np.float32))
        assert np.all(np.isfinite(out.data))

    def test_accepts_tensor_and_ignores_training_flag(self):
        model = self.make_ready_model()
        model.train()
        noisy = Tensor(tiny_patches(1, seed=9))
        out = despeckle(model, noisy)
        assert out.shape == noisy.shape
        assert model.training  # flag untouched


class TestCheckpoint:
    def trained_model_and_adam(self, dtype=np.float32):
        model = tiny_model(depth=4, width=4, dtype=dtype)
        adam = Adam(model.parameters(), lr=1e-3)
        clean = tiny_patches(4, seed=10).astype(dtype)
        noisy = tiny_patches(4, seed=11).astype(dtype)
        with Tape() as tape:
            loss = l2_loss(model.forward(Tensor(noisy), training=True), Tensor(clean))
            tape.backward(loss)
        adam.step()
        return model, adam

    def assert_models_bitwise_equal(self, a, b):
        for (name_a, arr_a), (name_b, arr_b) in zip(a.state_blocks(), b.state_blocks()):
            assert name_a == name_b
            assert np.array_equal(arr_a, arr_b), name_a

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_bitwise(self, tmp_path, dtype):
        model, adam = self.trained_model_and_adam(dtype)
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model, epoch=7, adam=adam, meta={"divisor": 210.0})
        loaded = load_checkpoint(path)

        assert loaded.epoch == 7
        assert loaded.meta == {"divisor": 210.0}
        assert loaded.model.dtype == np.dtype(dtype)
        assert loaded.model.config == model.config
        self.assert_models_bitwise_equal(model, loaded.model)

        x = tiny_patches(2, seed=12).astype(dtype)
        a = loaded.model.forward(Tensor(x), training=False).data
        b = model.forward(Tensor(x), training=False).data
        assert np.array_equal(a, b)

    def test_adam_state_round_trip(self, tmp_path):
        model, adam = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model, epoch=1, adam=adam)
        loaded = load_checkpoint(path)
        assert loaded.adam is not None
        assert loaded.adam.hp.lr == adam.hp.lr
        for s_in, s_out in zip(adam.states, loaded.adam.states):
            assert s_out.t == s_in.t
            assert np.array_equal(s_in.m, s_out.m)
            assert np.array_equal(s_in.v, s_out.v)

    def test_no_adam_state(self, tmp_path):
        model, _ = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.adam is None
        assert loaded.epoch == 0

    def test_bad_magic(self, tmp_path):
        model, _ = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        model, _ = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model, _ = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(FormatError, match="truncated|incomplete"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        model, _ = self.trained_model_and_adam()
        path = tmp_path / "model.dspk"
        save_checkpoint(path, model)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "model.dspk"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"DSPK"


class TestTrainingLoop:
    def small_sets(self):
        return tiny_patches(8, seed=13), tiny_patches(4, seed=14)

    def test_log_structure_and_determinism(self):
        weights = LossWeights()
        logs = []
        for _ in range(2):
            model = tiny_model(seed=1)
            log = train(
                model,
                *self.small_sets(),
                weights=weights,
                epochs=2,
                batch_size=4,
                seed=5,
            )
            logs.append(log)
        assert [r["epoch"] for r in logs[0]] == [1, 2]
        for a, b in zip(*logs):
            for key in ("train_total", "val_mse", "val_kl", "val_edge"):
                assert a[key] == b[key]
            assert a["wall_seconds"] > 0

    def test_checkpoint_files_written(self, tmp_path):
        model = tiny_model()
        train(
            model,
            *self.small_sets(),
            weights=LossWeights(),
            epochs=2,
            batch_size=4,
            out_dir=str(tmp_path),
        )
        names = sorted(os.listdir(tmp_path))
        assert names == ["best.dspk", "epoch_001.dspk", "epoch_002.dspk", "final.dspk"]
        final = load_checkpoint(tmp_path / "final.dspk")
        assert final.epoch == 2
        assert final.meta["seed"] == 0
        assert final.meta["looks"] == 1

    def test_zero_epochs_writes_final_only(self, tmp_path):
        model = tiny_model()
        log = train(
            model,
            *self.small_sets(),
            weights=LossWeights(),
            epochs=0,
            out_dir=str(tmp_path),
        )
        assert log == []
        assert sorted(os.listdir(tmp_path)) == ["final.dspk"]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        weights = LossWeights()
        full_dir = tmp_path / "full"
        part_dir = tmp_path / "part"
        kwargs = dict(weights=weights, epochs=4, batch_size=4, seed=9)

        model_full = tiny_model(seed=2)
        train(model_full, *self.small_sets(), out_dir=str(full_dir), **(kwargs | {"epochs": 4}))

        model_part = tiny_model(seed=2)
        train(model_part, *self.small_sets(), out_dir=str(part_dir), **(kwargs | {"epochs": 2}))
        ckpt = load_checkpoint(part_dir / "epoch_002.dspk")
        train(
            ckpt.model,
            *self.small_sets(),
            weights=weights,
            epochs=2,
            batch_size=4,
            seed=9,
            out_dir=str(part_dir),
            start_epoch=ckpt.epoch,
            adam=ckpt.adam,
        )

        a = (full_dir / "epoch_004.dspk").read_bytes()
        b = (part_dir / "epoch_004.dspk").read_bytes()
        assert a == b

    def test_divergence_raises_and_keeps_artifacts(self, tmp_path):
        weights = LossWeights()
        model = tiny_model()
        clean, val = self.small_sets()
        train(model, clean, val, weights=weights, epochs=1, batch_size=4, out_dir=str(tmp_path))

        poisoned = clean.copy()
        poisoned[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as excinfo:
            train(
                model,
                poisoned,
                val,
                weights=weights,
                epochs=1,
                batch_size=4,
                out_dir=str(tmp_path),
                start_epoch=1,
            )
        err = excinfo.value
        assert err.log[-1]["diverged"] is True
        assert (tmp_path / "epoch_001.dspk").exists()  # earlier progress retained
        assert (tmp_path / "diverged.json").exists()

    def test_empty_train_set_rejected(self):
        with pytest.raises(ShapeError):
            train(
                tiny_model(),
                np.zeros((0, 1, 12, 12), dtype=np.float32),
                tiny_patches(2),
                weights=LossWeights(),
                epochs=1,
            )

    def test_mismatched_patch_sizes_rejected(self):
        with pytest.raises(ShapeError):
            train(
                tiny_model(),
                tiny_patches(4, size=12),
                tiny_patches(2, size=16),
                weights=LossWeights(),
                epochs=1,
            )

    def test_evaluate_validation_keys(self):
        model = tiny_model()
        clean, _ = self.small_sets()
        model.forward(Tensor(clean[:2]), training=True)
        out = evaluate_validation(model, clean, clean, LossWeights(), looks=1, batch_size=4)
        assert set(out) == {"val_mse", "val_edge", "val_kl"}
        assert all(np.isfinite(v) for v in out.values())
