"""
Unit tests for the experiment drivers and the results store.
"""
import csv
import os
import shutil
import tempfile
import unittest
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
import torch
from PIL import Image

from carrier import AudioStream, Manifest, select_frames
from config import config
from corpora import synthetic_audio, synthetic_images, toy_fixture
from experiments import (FAILED, NOT_APPLICABLE, PASSED, SweepRecord, SweepResult, ablate_variants,
                         baseline_single_shot, check_stage_independence, dump_intermediates, evaluate,
                         flag_saturation, residual_norms, robustness_drop, sweep_stages)
from networks import init_models
from pipeline import SecretImage, embed, extract, hide_all
from results_store import ResultsStore, StoredResult, config_hash
from tests.gradient_utils import randomize_heads
from training import TrainingConfig, toy_sweep_config, toy_training_config, train

SLOW = os.getenv('STAGEHIDE_SLOW_TESTS') == '1'


def _tiny_config(**overrides) -> TrainingConfig:
    values = dict(stages=2, blocks=1, features=8, batch_size=2, patch=8, epochs=1, steps_per_epoch=2,
                  seed=0, device="cpu", progress=False)
    values.update(overrides)
    return TrainingConfig(**values)


def _record(label: str, psnr: float) -> SweepRecord:
    return SweepRecord(label=label, stages=1, variant="M", config_hash=label, audio_mse=0.0,
                       psnr=psnr, ssim=0.0, ms_ssim=0.0)


class TestStageIndependence(unittest.TestCase):
    """Test cases for the stage independence check."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(0)
        self.secret = SecretImage(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32))
        self.frames = select_frames(AudioStream(rng.uniform(-0.5, 0.5, 256).astype(np.float32)), 3, 8, 8)

    def _check(self, variant: str) -> str:
        models = randomize_heads(init_models(stages=3, blocks=1, variant=variant, features=8))
        containers, _ = hide_all(self.secret, self.frames, models)
        return check_stage_independence(models, containers, trials=20, rng=np.random.default_rng(1))

    def test_unconnected_variants_pass(self):
        """Test M, M-E and S keep every other revealed residual bit-identical."""
        for variant in ("M", "M-E", "S"):
            self.assertEqual(self._check(variant), PASSED, variant)

    def test_connected_revealing_not_applicable(self):
        """Test M-D and M-ED are reported as not-applicable."""
        self.assertEqual(self._check("M-D"), NOT_APPLICABLE)
        self.assertEqual(self._check("M-ED"), NOT_APPLICABLE)

    def test_detects_coupling(self):
        """Test a reveal path that mixes containers fails the check."""
        models = randomize_heads(init_models(stages=3, blocks=1, features=8))
        containers, _ = hide_all(self.secret, self.frames, models)

        def coupled_reveal(frames, m, mask=None):
            total = torch.tensor(float(sum(np.abs(frame.flat).sum() for frame in frames)))
            return SimpleNamespace(residuals=[total.clone() for _ in frames])

        with patch('experiments.reveal_all', side_effect=coupled_reveal):
            result = check_stage_independence(models, containers, trials=5, rng=np.random.default_rng(2))
        self.assertEqual(result, FAILED)


class TestSweepResult(unittest.TestCase):
    """Test cases for sweep records, saturation flags and file output."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_saturation_flag(self):
        """Test the first record gaining less than 0.2 dB is flagged."""
        records = [_record("t=1", 10.0), _record("t=2", 12.0), _record("t=3", 12.1), _record("t=4", 12.15)]
        flag_saturation(records)
        self.assertEqual([r.saturated for r in records], [False, False, True, False])
        self.assertEqual(SweepResult("sweep_stages", records).saturation, "t=3")

    def test_no_saturation(self):
        """Test steadily improving sweeps are not flagged."""
        records = [_record("t=1", 10.0), _record("t=2", 11.0)]
        flag_saturation(records)
        self.assertIsNone(SweepResult("sweep_stages", records).saturation)

    def test_csv_and_plot_files(self):
        """Test CSV rows and two-column plot data."""
        record = _record("t=1", 10.5)
        record.per_stage_psnr = [9.0, 10.5]
        result = SweepResult("sweep_stages", [record])
        csv_path = os.path.join(self.temp_dir, "sweep.csv")
        plot_path = os.path.join(self.temp_dir, "sweep.dat")

        result.write_csv(csv_path)
        result.write_plot_data(plot_path)

        with open(csv_path, newline='') as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], list(SweepRecord.CSV_FIELDS))
        self.assertEqual(rows[1][0], "t=1")
        with open(plot_path) as f:
            self.assertEqual(f.read().splitlines()[1], "1 10.5")

    def test_digest_ignores_wall_clock(self):
        """Test record digests depend on results, not timing."""
        a, b = _record("t=1", 10.0), _record("t=1", 10.0)
        b.wall_clock = 99.0
        self.assertEqual(a.digest(), b.digest())
        b.psnr = 10.1
        self.assertNotEqual(a.digest(), b.digest())


class TestResultsStore(unittest.TestCase):
    """Test cases for the append-only results store."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.results_file = os.path.join(self.temp_dir, "results.json")

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_config_hash_is_order_independent(self):
        """Test equal configs hash equally regardless of key order."""
        self.assertEqual(config_hash({'a': 1, 'b': 2}), config_hash({'b': 2, 'a': 1}))
        self.assertNotEqual(config_hash({'a': 1}), config_hash({'a': 2}))

    def test_append_and_reload(self):
        """Test entries persist and the newest entry per key wins."""
        store = ResultsStore(self.results_file)
        store.append(StoredResult.create("sweep", "t=1", {'stages': 1}, {'psnr': 10.0}))
        store.append(StoredResult.create("sweep", "t=1", {'stages': 1}, {'psnr': 11.0}))
        store.append(StoredResult.create("ablate", "M", {'variant': 'M'}, {'psnr': 9.0}))

        reloaded = ResultsStore(self.results_file)

        self.assertEqual(len(reloaded.entries()), 3)
        self.assertEqual(len(reloaded.entries("sweep")), 2)
        self.assertEqual(reloaded.latest(config_hash({'stages': 1})).record['psnr'], 11.0)
        self.assertIsNone(reloaded.latest("unknown"))


class TestStudies(unittest.TestCase):
    """Test cases for evaluation, sweeps, ablation, drops and dumps on tiny runs."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.images = synthetic_images(4, 16, seed=4)
        self.audio = synthetic_audio(2, 2048, seed=4)

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def test_untrained_evaluation(self):
        """Test zero-head models give zero audio error and the zero-image PSNR."""
        cfg = _tiny_config()
        models = init_models(2, 1, features=8)
        report = evaluate(models, self.images, self.audio, cfg, samples=4)

        self.assertEqual(report.audio_mse, 0.0)
        self.assertEqual(len(report.per_stage_psnr), 2)
        self.assertAlmostEqual(report.per_stage_psnr[0], report.psnr, delta=1e-9)

    def test_single_stage_sweep(self):
        """Test t_values=[1] gives one record with a one-point stage curve."""
        store = ResultsStore(os.path.join(self.temp_dir, "results.json"))
        result = sweep_stages([1], _tiny_config(), self.images, self.audio, store)

        self.assertEqual(len(result.records), 1)
        self.assertEqual(len(result.records[0].per_stage_psnr), 1)
        self.assertEqual(result.records[0].label, "t=1")
        self.assertEqual(len(store.entries("sweep_stages")), 1)

    def test_repeated_sweep_reports_previous_run(self):
        """Test a rerun of a stored config logs the earlier PSNR and appends a second entry."""
        store = ResultsStore(os.path.join(self.temp_dir, "results.json"))
        sweep_stages([1], _tiny_config(), self.images, self.audio, store)

        with self.assertLogs(level='INFO') as logs:
            sweep_stages([1], _tiny_config(), self.images, self.audio, store)

        self.assertTrue(any("previous run of this config" in line for line in logs.output))
        self.assertEqual(len(store.entries("sweep_stages")), 2)

    def test_sweep_warns_on_per_stage_lambdas(self):
        """Test non-uniform lambdas are collapsed to the first value with a warning."""
        with self.assertLogs(level='WARNING') as logs:
            result = sweep_stages([1], _tiny_config(lambdas=(0.5, 0.9)), self.images, self.audio)

        self.assertTrue(any("lambda" in line for line in logs.output))
        self.assertEqual(len(result.records), 1)

    def test_sweep_is_reproducible(self):
        """Test repeated sweeps with identical seeds give identical record digests."""
        first = sweep_stages([1, 2], _tiny_config(), self.images, self.audio)
        second = sweep_stages([1, 2], _tiny_config(), self.images, self.audio)
        self.assertEqual([r.digest() for r in first.records], [r.digest() for r in second.records])

    def test_ablation_records(self):
        """Test all variants complete and report parameter counts and independence."""
        t = 2
        result = ablate_variants(list(config.VARIANTS), _tiny_config(stages=t), self.images, self.audio)

        self.assertEqual([r.label for r in result.records], list(config.VARIANTS))
        self.assertEqual(result.record("M").parameters, t * result.record("S").parameters)
        self.assertEqual(result.record("M").independence, PASSED)
        self.assertEqual(result.record("M-D").independence, NOT_APPLICABLE)
        for record in result.records:
            self.assertTrue(np.isfinite(record.final_loss), record.label)

    def test_single_shot_baseline(self):
        """Test the baseline record is evaluated with the same metrics."""
        record = baseline_single_shot(_tiny_config(), self.images, self.audio)
        self.assertEqual(record.variant, config.SINGLE_SHOT_VARIANT)
        self.assertEqual(record.independence, NOT_APPLICABLE)
        self.assertTrue(np.isfinite(record.psnr))

    def test_robustness_extremes(self):
        """Test no-drop equals standard evaluation and all-drop gives the zero-image PSNR."""
        cfg = _tiny_config(stages=3)
        models = randomize_heads(init_models(3, 1, features=8))
        rows = robustness_drop(models, self.images, self.audio, cfg,
                               [[True] * 3, [True, True, False], [False] * 3], samples=4)

        standard = evaluate(models, self.images, self.audio, cfg, samples=4)
        zero_models = init_models(3, 1, features=8)
        zero_image = evaluate(zero_models, self.images, self.audio, cfg, samples=4)

        self.assertEqual(rows[0].psnr, standard.psnr)
        self.assertAlmostEqual(rows[2].psnr, zero_image.psnr, delta=1e-9)
        self.assertEqual([row.available for row in rows], [3, 2, 0])
        with self.assertRaises(ValueError):
            robustness_drop(models, self.images, self.audio, cfg, [[True, False]])

    def test_dump_untrained_is_gray(self):
        """Test zero residuals encode as uniform mid-gray and ranges.tsv lists every image."""
        models = init_models(2, 1, features=8)
        secret = SecretImage(self.images[0][:, :8, :8])
        frames = select_frames(self.audio[0], 2, 8, 8)

        dump = dump_intermediates(models, secret, frames, self.temp_dir)

        for name in ("R1", "R2"):
            with Image.open(os.path.join(self.temp_dir, f"{name}.png")) as img:
                pixels = np.asarray(img)
            self.assertTrue(np.all(pixels == 128), name)
        with open(os.path.join(self.temp_dir, "ranges.tsv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 1 + 3 * 2)
        self.assertEqual(len(dump.residual_l1), 2)

    def test_dump_final_matches_extract(self):
        """Test the dumped final reconstruction equals extract() on the embedded bundle."""
        models = randomize_heads(init_models(2, 1, features=8))
        secret = SecretImage(self.images[1][:, :8, :8])
        cover = self.audio[1]
        frames = select_frames(cover, 2, 8, 8)

        dump = dump_intermediates(models, secret, frames, self.temp_dir)
        bundle = embed(secret, cover, models, Manifest(w=8, h=8, t=2))

        np.testing.assert_array_equal(dump.revealed, extract(bundle, models).pixels)


@unittest.skipUnless(SLOW, "set STAGEHIDE_SLOW_TESTS=1 to run the toy-fixture studies")
class TestToyFixtureStudies(unittest.TestCase):
    """Acceptance workloads on the canonical toy fixture."""

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_training_config()
        cls.images, cls.audio = toy_fixture(cls.cfg.seed)
        cls.models = train(cls.cfg, cls.images, cls.audio).models

    def test_stage_sweep_trend(self):
        """Test PSNR does not drop with more stages and gains flatten once each t has plateaued."""
        result = sweep_stages([1, 2, 3], toy_sweep_config(), self.images, self.audio)
        p1, p2, p3 = (r.psnr for r in result.records)
        self.assertGreaterEqual(p3, p1 - 0.1)
        self.assertLessEqual(p3 - p2, (p2 - p1) + 0.5)

    def test_drop_last_stage_is_between_extremes(self):
        """Test dropping stage t lands strictly between the zero image and full reconstruction."""
        rows = robustness_drop(self.models, self.images, self.audio, self.cfg,
                               [[True] * 3, [True, True, False], [False] * 3])
        self.assertLess(rows[2].psnr, rows[1].psnr)
        self.assertLess(rows[1].psnr, rows[0].psnr)

    def test_residuals_become_sparser(self):
        """Test mean ||S_3||_1 <= 0.9 * mean ||S_1||_1."""
        norms = residual_norms(self.models, self.images, self.audio, self.cfg)
        self.assertLessEqual(norms[2], 0.9 * norms[0])

    def test_all_variants_complete(self):
        """Test every wiring variant trains on the fixture without divergence."""
        result = ablate_variants(list(config.VARIANTS), self.cfg, self.images, self.audio)
        for record in result.records:
            self.assertTrue(np.isfinite(record.final_loss), record.label)


if __name__ == '__main__':
    unittest.main()
