import csv
import math

import numpy as np
import pytest
import torch

from dinobold.data import Subject
from dinobold.losses import ms_ssim_index, ms_ssim_loss
from dinobold.metrics import (
    PSNR_IDENTICAL,
    evaluate_dataset,
    ms_ssim_metric,
    psnr,
    write_metrics_csv,
)
from dinobold.volume_io import Volume3D


def _vol(data):
    return Volume3D(np.asarray(data, dtype=np.float32))


def _random_vol(seed, shape=(64, 64, 4)):
    rng = np.random.default_rng(seed)
    return Volume3D(rng.random(shape, dtype=np.float32))


class TestPsnr:
    def test_unit_mse_is_zero_db(self):
        target = _vol(np.zeros((4, 4, 2)))
        pred = _vol(np.ones((4, 4, 2)))
        assert psnr(pred, target) == pytest.approx(0.0, abs=1e-12)

    def test_mse_001_is_20_db(self):
        target = _random_vol(0)
        pred = _vol(target.data + 0.1)
        assert psnr(pred, target) == pytest.approx(20.0, abs=1e-5)

    def test_identical_sentinel(self):
        v = _random_vol(1)
        assert psnr(v, v) == PSNR_IDENTICAL
        assert math.isinf(PSNR_IDENTICAL)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            psnr(_vol(np.zeros((2, 2, 2))), _vol(np.zeros((2, 2, 3))))

    def test_bad_data_range(self):
        v = _random_vol(2)
        with pytest.raises(ValueError, match="positive"):
            psnr(v, v, data_range=0.0)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(3)
        target = _random_vol(4)
        noise = rng.standard_normal(target.shape).astype(np.float32)
        values = [
            psnr(Volume3D(target.data + amp * noise), target) for amp in (0.01, 0.05, 0.2)
        ]
        assert values[0] > values[1] > values[2]


class TestMsSsimMetric:
    def test_identical_is_one(self):
        v = _random_vol(5)
        assert ms_ssim_metric(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_consistent_with_loss(self):
        a, b = _random_vol(6, (64, 64, 1)), _random_vol(7, (64, 64, 1))
        metric = ms_ssim_metric(a, b, scales=2)
        loss = float(
            ms_ssim_loss(
                torch.from_numpy(a.data[:, :, 0].copy()),
                torch.from_numpy(b.data[:, :, 0].copy()),
                scales=2,
            )
        )
        assert metric == pytest.approx(1.0 - loss, abs=1e-6)

    def test_mean_of_per_slice_scores(self):
        a, b = _random_vol(8), _random_vol(9)
        expected = np.mean(
            [
                float(
                    ms_ssim_index(
                        torch.from_numpy(a.data[:, :, z].copy()),
                        torch.from_numpy(b.data[:, :, z].copy()),
                        scales=2,
                    )
                )
                for z in range(4)
            ]
        )
        assert ms_ssim_metric(a, b, scales=2) == pytest.approx(expected, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ms_ssim_metric(_random_vol(10), _random_vol(11, (64, 64, 5)))


class TestEvaluateDataset:
    def _subjects(self, n=2, shape=(64, 64, 3)):
        return [
            Subject(f"sub-{i:02d}", _random_vol(20 + i, shape), _random_vol(40 + i, shape))
            for i in range(n)
        ]

    def test_identity_oracle(self):
        subjects = [Subject("s0", _random_vol(12), _random_vol(12))]
        result = evaluate_dataset(lambda v: v, subjects)
        assert result.psnr_db == PSNR_IDENTICAL
        assert result.ms_ssim == pytest.approx(1.0, abs=1e-6)

    def test_deterministic_repeat(self):
        subjects = self._subjects()
        r1 = evaluate_dataset(lambda v: Volume3D(v.data * 0.5), subjects)
        r2 = evaluate_dataset(lambda v: Volume3D(v.data * 0.5), subjects)
        assert r1 == r2

    def test_error_names_subject(self):
        subjects = self._subjects(1)

        def broken(v):
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="sub-00"):
            evaluate_dataset(broken, subjects)

    def test_mean_over_subjects(self):
        subjects = self._subjects(3)
        result = evaluate_dataset(lambda v: Volume3D(v.data + 0.1), subjects)
        assert result.psnr_db == pytest.approx(
            np.mean([s.psnr_db for s in result.per_subject])
        )
        assert len(result.per_subject) == 3

    def test_region_mask_applied(self):
        subjects = self._subjects(1)
        full = evaluate_dataset(lambda v: Volume3D(v.data + 0.1), subjects)
        region = np.zeros((64, 64, 3), dtype=np.float32)
        region[:32] = 1.0
        masked = evaluate_dataset(
            lambda v: Volume3D(v.data + 0.1), subjects, mask_fn=lambda s: region
        )
        assert masked.psnr_db != full.psnr_db

    def test_empty_subjects_rejected(self):
        with pytest.raises(ValueError, match="no subjects"):
            evaluate_dataset(lambda v: v, [])


class TestCsvOutput:
    def test_rows_and_mean(self, tmp_path):
        subjects = [
            Subject("a", _random_vol(30), _random_vol(31)),
            Subject("b", _random_vol(32), _random_vol(33)),
        ]
        result = evaluate_dataset(lambda v: Volume3D(v.data * 0.9), subjects)
        out = tmp_path / "metrics.csv"
        write_metrics_csv(result, out)
        rows = list(csv.DictReader(out.open()))
        assert [r["subject_id"] for r in rows] == ["a", "b", "mean"]
        assert float(rows[-1]["ms_ssim"]) == pytest.approx(result.ms_ssim, abs=1e-6)
        assert result.summary().startswith("2 subject(s):")
