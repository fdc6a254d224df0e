"""Benchmark harness on synthetic stand-in files, plus the synthetic
experiment helpers."""

import numpy as np
import pytest

from gpar.benchmarks import (functional_structure_experiment,
                             locate_benchmark_file,
                             noise_structure_experiment, run_benchmark)
from gpar.data import checksum_file
from gpar.errors import DataError
from gpar.model import TrainOptions

from conftest import canonical_file


def tiny_options(seed=0):
    return TrainOptions(restarts=1, budget=25, seed=seed)


class TestLocate:
    def test_missing_file_explains_how_to_get_it(self, tmp_path):
        with pytest.raises(DataError, match="canonical layout"):
            locate_benchmark_file("jura", str(tmp_path))

    def test_checksum_sidecar_verified(self, tmp_path):
        path, _ = canonical_file("jura", tmp_path)
        sidecar = tmp_path / "jura.csv.sha256"
        sidecar.write_text(checksum_file(path) + "\n")
        assert locate_benchmark_file("jura", str(tmp_path)) == str(path)
        sidecar.write_text("0" * 64 + "\n")
        with pytest.raises(DataError, match="checksum mismatch"):
            locate_benchmark_file("jura", str(tmp_path))


class TestRunBenchmark:
    def test_jura_report_schema_and_baseline(self, tmp_path):
        canonical_file("jura", tmp_path)
        report = run_benchmark("jura", str(tmp_path),
                               options=tiny_options(), mc_samples=20)
        assert set(report["models"]) == {"igp", "gpar-nl"}
        for scores in report["models"].values():
            assert "mae" in scores["aggregate"]
            assert "cadmium" in scores["per_output"]
            assert scores["train_seconds"] > 0
        assert report["task"] == "jura"

    def test_eeg_report_has_smse_and_mll_rows(self, tmp_path):
        canonical_file("eeg", tmp_path)
        report = run_benchmark("eeg", str(tmp_path), options=tiny_options(),
                               mc_samples=10)
        for label in ("igp", "gpar-nl"):
            agg = report["models"][label]["aggregate"]
            assert set(agg) == {"smse", "mll"}
            assert set(report["models"][label]["per_output"]) == \
                {"FZ", "F1", "F2"}

    def test_denoising_and_log_transform_pipeline(self, tmp_path):
        canonical_file("jura", tmp_path)
        report = run_benchmark("jura", str(tmp_path), denoising=True,
                               log_transform=True, options=tiny_options(),
                               mc_samples=10)
        assert "d-gpar-nl" in report["models"]
        assert report["log_transform"]
        mae = report["models"]["d-gpar-nl"]["aggregate"]["mae"]
        assert np.isfinite(mae) and mae >= 0


class TestSyntheticExperiments:
    def test_functional_experiment_reports_both_models(self):
        result = functional_structure_experiment(
            seed=0, n_train=30, n_test=30,
            options=TrainOptions(restarts=1, budget=40, seed=0))
        assert set(result) == {"igp", "gpar"}
        for scores in result.values():
            assert scores["y2"] > 0 and scores["y3"] > 0

    def test_noise_experiment_profiles(self):
        result = noise_structure_experiment(
            scheme=3, seed=0, n=60, n_grid=9, mc_samples=100,
            options=TrainOptions(restarts=1, budget=30, seed=0))
        assert result["grid"].shape == (9,)
        assert result["variance_y2"].shape == (9,)
        assert np.all(result["variance_y2"] > 0)
        assert np.all(np.abs(result["residual_correlation"]) <= 1.0)
