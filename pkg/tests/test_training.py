import json
import math

import numpy as np
import pytest
import torch

from dinobold.data import Subject
from dinobold.encoder import StructuralEncoder, parameter_digest, tiny_config
from dinobold.losses import LossWeights
from dinobold.synth_data import PhantomSpec, generate_pair
from dinobold.training import (
    AblationConfig,
    CheckpointMismatch,
    TrainConfig,
    TrainingDivergence,
    apply_ablation,
    build_model,
    config_digest,
    config_from_dict,
    config_to_dict,
    cosine_lr,
    load_checkpoint,
    load_config_file,
    make_encoder,
    restore_model,
    split_subjects,
    train,
)
from dinobold.volume_io import Volume3D, compute_mean_bold, normalize_volume


@pytest.fixture(scope="module")
def encoder():
    return StructuralEncoder(tiny_config(seed=0))


@pytest.fixture(scope="module")
def subjects():
    out = []
    for i in range(4):
        t1, bold = generate_pair(PhantomSpec(shape=(16, 16, 6), t=12, seed=100 + i))
        out.append(Subject(f"s{i}", t1, normalize_volume(compute_mean_bold(bold))))
    return out


def _tiny_train_config(**kwargs):
    base = dict(
        lr=1e-3,
        epochs=2,
        batch_size=8,
        window_size=3,
        encoder_backend="tiny",
        decoder_base_channels=32,
        dropout=0.1,
        seed=1,
    )
    base.update(kwargs)
    return TrainConfig(**base)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 2e-4, 1e-6) == pytest.approx(2e-4, abs=1e-12)
        assert cosine_lr(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6, abs=1e-12)
        assert cosine_lr(50, 100, 2e-4, 1e-6) == pytest.approx((2e-4 + 1e-6) / 2, abs=1e-12)

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 50, 1e-3, 1e-6) for s in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            cosine_lr(-1, 10, 1e-3, 1e-6)
        with pytest.raises(ValueError, match="outside"):
            cosine_lr(11, 10, 1e-3, 1e-6)


class TestSplitSubjects:
    def _subjects(self, n):
        vol = Volume3D(np.zeros((4, 4, 4), dtype=np.float32))
        return [Subject(f"s{i}", vol, vol) for i in range(n)]

    def test_ten_subjects_80_20(self):
        train_s, val_s = split_subjects(self._subjects(10), 0.8, seed=0)
        assert len(train_s) == 8 and len(val_s) == 2

    def test_five_subjects_floor(self):
        train_s, val_s = split_subjects(self._subjects(5), 0.8, seed=0)
        assert len(train_s) == 4 and len(val_s) == 1

    def test_same_seed_identical(self):
        subs = self._subjects(10)
        a = split_subjects(subs, 0.8, seed=3)
        b = split_subjects(subs, 0.8, seed=3)
        assert [s.subject_id for s in a[0]] == [s.subject_id for s in b[0]]

    def test_subject_level_disjoint(self):
        subs = self._subjects(7)
        train_s, val_s = split_subjects(subs, 0.5, seed=1)
        train_ids = {s.subject_id for s in train_s}
        val_ids = {s.subject_id for s in val_s}
        assert not train_ids & val_ids
        assert train_ids | val_ids == {s.subject_id for s in subs}

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least 2"):
            split_subjects(self._subjects(1), 0.8, seed=0)


class TestApplyAblation:
    def test_slice_attention_off_is_identity(self, encoder):
        cfg = _tiny_train_config(ablation=AblationConfig(slice_attention=False))
        model, wiring = build_model(cfg, encoder)
        assert wiring.fusion is None
        assert model.fusion is None and model.skip_fusion is None
        tokens = torch.randn(1, 3, 16, 32)
        skips = {l: torch.randn(1, 3, 16, 32) for l in (1, 2, 3)}
        # tokens flow to the decoder unchanged: the center row of the main
        # tensor is what the decoder's first reshape consumes
        out = model(tokens, skips)
        assert out.shape == (1, 32, 32)

    def test_skip_connections_off(self, encoder):
        cfg = _tiny_train_config(ablation=AblationConfig(skip_connections=False))
        model, wiring = build_model(cfg, encoder)
        assert wiring.skip_layers == ()
        out = model(torch.randn(1, 3, 16, 32), {})
        assert out.shape == (1, 32, 32)

    def test_skip_layers_pair_deep_to_coarse(self, encoder):
        cfg = _tiny_train_config()
        _, wiring = apply_ablation(cfg, encoder), None
        wiring = apply_ablation(cfg, encoder)
        assert wiring.skip_layers == (3, 2, 1)

    @pytest.mark.parametrize(
        "loss_set,expected",
        [
            ("l1", (1.0, 0.0, 0.0, 0.0)),
            ("l1_ssim", (1.0, 0.5, 0.0, 0.0)),
            ("l1_ssim_grad", (1.0, 0.5, 0.1, 0.0)),
            ("full", (1.0, 0.5, 0.1, 0.05)),
        ],
    )
    def test_loss_sets(self, encoder, loss_set, expected):
        cfg = _tiny_train_config(ablation=AblationConfig(loss_set=loss_set))
        wiring = apply_ablation(cfg, encoder)
        w = wiring.loss_weights
        assert (w.lambda_l1, w.lambda_ssim, w.lambda_grad, w.lambda_perc) == expected

    def test_bad_loss_set(self):
        with pytest.raises(ValueError, match="loss_set"):
            AblationConfig(loss_set="l2")


class TestConfigSerialization:
    def test_round_trip(self):
        cfg = _tiny_train_config(lr=3e-4, ablation=AblationConfig(loss_set="l1_ssim"))
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_digest_stable_and_sensitive(self):
        a = _tiny_train_config()
        b = _tiny_train_config(lr=2e-3)
        assert config_digest(a) == config_digest(a)
        assert config_digest(a) != config_digest(b)

    def test_yaml_file_with_overrides(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("training:\n  lr: 0.001\n  epochs: 5\nmodel:\n  encoder_backend: tiny\n")
        cfg = load_config_file(path, overrides={"training.lr": "2e-3", "input.window_size": "3"})
        assert cfg.lr == 2e-3  # override wins
        assert cfg.epochs == 5
        assert cfg.window_size == 3

    def test_defaults_without_file(self):
        cfg = load_config_file(None)
        assert cfg.lr == 2e-4
        assert cfg.weight_decay == 1e-4
        assert cfg.min_lr == 1e-6
        assert cfg.batch_size == 32
        assert cfg.epochs == 100
        assert cfg.train_split == 0.8
        assert cfg.window_size == 5
        assert cfg.attention_heads == 4
        assert cfg.attention_layers == 2
        assert cfg.dropout == 0.1
        assert cfg.decoder_base_channels == 512
        assert cfg.loss_weights == LossWeights(1.0, 0.5, 0.1, 0.05)

    def test_unsupported_optimizer(self):
        with pytest.raises(ValueError, match="adamw"):
            config_from_dict({"training": {"optimizer": "sgd"}})

    def test_config_validation(self):
        with pytest.raises(ValueError, match="split"):
            TrainConfig(train_split=1.0)
        with pytest.raises(ValueError, match="odd"):
            TrainConfig(window_size=4)
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)


class TestTrainLoop:
    def test_smoke_run_bookkeeping(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=1)
        result = train(cfg, subjects, encoder, tmp_path)
        assert len(result.history) == 1
        assert result.best_path.exists() and result.last_path.exists()
        rows = [json.loads(l) for l in (tmp_path / "history.jsonl").read_text().splitlines()]
        assert rows[0]["epoch"] == 0
        assert {"train_losses", "val_losses", "val_psnr", "val_msssim", "lr"} <= rows[0].keys()
        assert rows[0]["lr"] == pytest.approx(cfg.lr)

    def test_encoder_untouched_and_absent_from_checkpoint(self, tmp_path, encoder, subjects):
        digest_before = parameter_digest(encoder)
        cfg = _tiny_train_config(epochs=1)
        result = train(cfg, subjects, encoder, tmp_path)
        assert parameter_digest(encoder) == digest_before
        ckpt = load_checkpoint(result.last_path)
        assert all(not k.startswith("encoder") for k in ckpt["model_state"])
        assert ckpt["encoder_digest"] == digest_before

    def test_reproducible_loss_curves(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=2)
        a = train(cfg, subjects, encoder, tmp_path / "a")
        b = train(cfg, subjects, encoder, tmp_path / "b")
        np.testing.assert_allclose(a.step_losses, b.step_losses, atol=1e-6)
        assert a.history[-1]["val_msssim"] == pytest.approx(
            b.history[-1]["val_msssim"], abs=1e-6
        )

    def test_resume_bitwise_identical(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=3)
        full = train(cfg, subjects, encoder, tmp_path / "full")

        steps_per_epoch = math.ceil(3 * 6 / cfg.batch_size)  # 3 train subjects x 6 slices
        part = train(
            cfg, subjects, encoder, tmp_path / "part", max_steps=2 * steps_per_epoch
        )
        assert len(part.history) == 2
        resumed = train(
            cfg, subjects, encoder, tmp_path / "part", resume_from=part.last_path
        )
        assert resumed.step_losses == full.step_losses[2 * steps_per_epoch :]
        assert resumed.history[-1] == full.history[-1]

    def test_resume_config_mismatch(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=1)
        result = train(cfg, subjects, encoder, tmp_path)
        other = _tiny_train_config(epochs=1, lr=5e-4)
        with pytest.raises(CheckpointMismatch, match="different configuration"):
            train(other, subjects, encoder, tmp_path, resume_from=result.last_path)

    def test_divergence_detected(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=1, lr=1e37, ablation=AblationConfig(loss_set="l1"))
        with pytest.raises(TrainingDivergence, match="non-finite"):
            train(cfg, subjects, encoder, tmp_path)

    def test_restore_model_round_trip(self, tmp_path, encoder, subjects):
        cfg = _tiny_train_config(epochs=1)
        result = train(cfg, subjects, encoder, tmp_path)
        model, restored_cfg = restore_model(load_checkpoint(result.best_path), encoder)
        assert restored_cfg == cfg
        out = model(torch.randn(1, 3, 16, 32), {l: torch.randn(1, 3, 16, 32) for l in (1, 2, 3)})
        assert out.shape == (1, 32, 32)


class TestMakeEncoder:
    def test_tiny_backend(self):
        enc = make_encoder(_tiny_train_config())
        assert enc.cfg.image_size == 32

    def test_pretrained_needs_weights(self):
        cfg = _tiny_train_config(encoder_backend="pretrained")
        with pytest.raises(Exception, match="weight"):
            make_encoder(cfg)
