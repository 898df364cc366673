from __future__ import annotations

import dataclasses
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import torch

from targetsound import trainer
from targetsound.archive import load_bundle
from targetsound.cli import cmd_synth
from targetsound.config import load_config
from targetsound.errors import EXIT_MISSING, EmptyManifest, StageOrderError, TrainingDiverged
from targetsound.losses import RegionMask
from targetsound.manifest import Manifest, load_manifest
from targetsound.metrics import evaluate
from targetsound.models import DetectionTrack, parameter_hash
from targetsound.synth import EventAnnotation
from targetsound.trainer import (
    TSD_NETWORKS,
    TSE_NETWORKS,
    MixtureDataset,
    RunLog,
    TrainingData,
    checkpoint_path,
    frame_labels,
    fuse_embeddings,
    new_bundle,
    pipeline_schedule,
    resample_track,
    run_pipeline,
    stage3_conditioning,
    train_single_stage,
    train_stage1,
    train_stage2,
    train_stage3,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def tiny_config(stage1_epochs: int = 1):
    cfg = load_config(CONFIGS / "tiny.json")
    stages = tuple(dataclasses.replace(p, epochs=stage1_epochs) if p.stage_id == 1 else p for p in cfg.stages)
    return dataclasses.replace(cfg, stages=stages)


def same_state(a, b) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


class HelperTests(unittest.TestCase):
    def test_frame_labels_use_half_open_intervals(self) -> None:
        centers = np.array([0.1, 0.3, 0.5, 0.7])
        labels = frame_labels([EventAnnotation(0.2, 0.5)], centers)
        np.testing.assert_array_equal(labels, [0.0, 1.0, 0.0, 0.0])

    def test_resample_track_keeps_duration(self) -> None:
        track = resample_track(DetectionTrack(np.array([0.0, 1.0]), 2.0), 5)
        np.testing.assert_allclose(track.scores, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-12)
        self.assertEqual(track.frame_rate, 5.0)

    def test_fuse_embeddings_is_the_mean(self) -> None:
        np.testing.assert_array_equal(fuse_embeddings(np.array([1.0, 3.0]), np.array([3.0, -1.0])), [2.0, 1.0])

    def test_schedule(self) -> None:
        self.assertEqual(pipeline_schedule(1), [(0, 1), (0, 2), (0, 3)])
        self.assertEqual(pipeline_schedule(3)[3:], [(1, 2), (1, 3), (2, 2), (2, 3)])

    def test_runlog_round_trip(self) -> None:
        runlog = RunLog(3, "abc", steps=[{"step": 1, "cycle": 0, "stage": 1, "epoch": 1, "loss_total": 0.5}])
        with tempfile.TemporaryDirectory() as tmp_dir:
            csv_path, _ = runlog.write(Path(tmp_dir))
            self.assertEqual(RunLog.read(Path(tmp_dir)), runlog)
            header = csv_path.read_text(encoding="utf-8").splitlines()[0]
        self.assertTrue(header.startswith("step,cycle,stage,epoch,loss_total"))


class TinyDataCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        cls.cfg = tiny_config()
        train_path, test_path = cmd_synth(cls.cfg, cls.root / "data")
        cls.data = TrainingData(load_manifest(train_path), load_manifest(test_path))

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()


class StageTests(TinyDataCase):
    def test_dataset_items(self) -> None:
        bundle = new_bundle(self.cfg)
        item = MixtureDataset(self.data.train, bundle)[0]
        n = self.cfg.data.synth.clip_samples
        self.assertEqual(tuple(item["mixture"].shape), (n,))
        self.assertEqual(tuple(item["labels"].shape), (bundle.tsd.sound_encoder.n_frames(n),))
        self.assertEqual(float(item["onehot"].sum()), 1.0)
        self.assertGreater(float(item["labels"].sum()), 0.0)

    def test_stage_order_is_enforced(self) -> None:
        bundle = new_bundle(self.cfg)
        with self.assertRaises(StageOrderError):
            train_stage2(self.data, bundle, self.cfg)
        with self.assertRaises(StageOrderError):
            train_stage3(self.data, bundle, self.cfg)
        with tempfile.TemporaryDirectory() as tmp_dir:
            with self.assertRaises(StageOrderError):
                train_single_stage(self.data, self.cfg, 3, Path(tmp_dir))

    def test_frozen_branch_is_untouched(self) -> None:
        bundle = train_stage1(self.data, new_bundle(self.cfg), self.cfg)
        nets = bundle.networks()
        detector = {name: parameter_hash(nets[name]) for name in TSD_NETWORKS}
        extractor = {name: parameter_hash(nets[name]) for name in TSE_NETWORKS}

        runlog = RunLog(self.cfg.seed, "")
        train_stage2(self.data, bundle, self.cfg, runlog)
        self.assertEqual({name: parameter_hash(nets[name]) for name in TSD_NETWORKS}, detector)
        self.assertNotEqual(parameter_hash(nets["tse.extractor"]), extractor["tse.extractor"])
        self.assertEqual(runlog.stages[-1]["frozen_hashes"], detector)
        self.assertTrue(all(p.requires_grad for net in nets.values() for p in net.parameters()))
        self.assertEqual(bundle.stage, 2)
        self.assertIn("valid_si_sdri", runlog.stages[-1]["metrics"])
        self.assertIn("train_si_sdri", runlog.stages[-1]["metrics"])

        e, e_prime, fused = stage3_conditioning(bundle.eval(), torch.randn(2, 8000), torch.randn(2, 8000), self.cfg)
        self.assertEqual(e.shape, e_prime.shape)
        self.assertTrue(torch.allclose(fused, (e + e_prime) / 2))
        self.assertFalse(torch.equal(e, e_prime))

    def test_non_finite_loss_stops_training(self) -> None:
        def diverging(bundle, batch, cfg, parts):
            return torch.tensor(float("nan"), requires_grad=True)

        with mock.patch.dict(trainer.STEP_FUNCTIONS, {1: diverging}):
            with self.assertRaises(TrainingDiverged) as ctx:
                train_stage1(self.data, new_bundle(self.cfg), self.cfg)
        self.assertIsNone(ctx.exception.last_good_checkpoint)

    def test_target_shorter_than_a_hop_falls_back_to_unweighted_loss(self) -> None:
        bundle = new_bundle(self.cfg)
        n, sr = self.cfg.data.synth.clip_samples, self.cfg.data.synth.sample_rate
        gen = torch.Generator().manual_seed(0)
        # 8 samples between two spectral frame centres
        mask = RegionMask.from_events([EventAnnotation(10 / sr, 18 / sr)], n, sr)
        batch = {
            "index": [0],
            "mixture": torch.randn(1, n, generator=gen),
            "target": torch.randn(1, n, generator=gen),
            "reference": torch.randn(1, n, generator=gen),
            "onehot": torch.eye(self.cfg.model.n_classes)[:1],
            "masks": [mask],
        }
        parts = {}
        with self.assertLogs("targetsound.trainer", level="WARNING"):
            loss = trainer.STEP_FUNCTIONS[2](bundle, batch, self.cfg, parts)
        self.assertTrue(torch.isfinite(loss))
        self.assertEqual(parts["target"], 0.0)
        loss.backward()

    def test_evaluate_reports_means(self) -> None:
        bundle = new_bundle(self.cfg)
        report = evaluate(self.data.valid, bundle, self.cfg)
        self.assertEqual(len(report.examples), len(self.data.valid))
        self.assertAlmostEqual(report.aggregate["si_sdri"], float(np.mean([e.si_sdri for e in report.examples])))
        self.assertTrue(0.0 <= report.aggregate["segment_f1"] <= 1.0)
        with self.assertRaises(EmptyManifest) as ctx:
            evaluate(Manifest(self.data.valid.path, ()), bundle, self.cfg)
        self.assertEqual(ctx.exception.exit_code, EXIT_MISSING)


class PipelineTests(TinyDataCase):
    @classmethod
    def setUpClass(cls) -> None:
        super().setUpClass()
        cls.cfg = tiny_config(stage1_epochs=2)
        cls.runlog = run_pipeline(cls.data, cls.cfg, cls.root / "run_a")

    def test_outputs(self) -> None:
        out = self.root / "run_a"
        for stage in (1, 2, 3):
            self.assertTrue(checkpoint_path(out, 0, stage).exists())
        self.assertEqual(list(out.glob("checkpoints/*.resume.pt")), [])
        self.assertTrue((out / "runlog.csv").exists())
        self.assertEqual(RunLog.read(out), self.runlog)
        self.assertEqual([s["stage"] for s in self.runlog.stages], [1, 2, 3])
        self.assertEqual(len(self.runlog.steps), 8)
        self.assertEqual(load_bundle(checkpoint_path(out, 0, 3)).stage, 3)

    def test_same_seed_same_losses(self) -> None:
        again = run_pipeline(self.data, self.cfg, self.root / "run_b")
        self.assertEqual([s["loss_total"] for s in again.steps], [s["loss_total"] for s in self.runlog.steps])

    def test_interrupted_stage_resumes_to_same_parameters(self) -> None:
        out = self.root / "run_c"
        calls = {"n": 0}
        original = trainer.STEP_FUNCTIONS[1]

        def interrupted(bundle, batch, cfg, parts):
            calls["n"] += 1
            if calls["n"] == 3:
                raise KeyboardInterrupt
            return original(bundle, batch, cfg, parts)

        with mock.patch.dict(trainer.STEP_FUNCTIONS, {1: interrupted}):
            with self.assertRaises(KeyboardInterrupt):
                run_pipeline(self.data, self.cfg, out)
        self.assertTrue((out / "checkpoints" / "cycle0_stage1.resume.pt").exists())

        resumed = run_pipeline(self.data, self.cfg, out, resume=True)
        expected = load_bundle(checkpoint_path(self.root / "run_a", 0, 3))
        self.assertTrue(same_state(load_bundle(checkpoint_path(out, 0, 3)), expected))
        self.assertEqual([s["loss_total"] for s in resumed.steps], [s["loss_total"] for s in self.runlog.steps])

    def test_finished_stages_are_skipped_on_resume(self) -> None:
        out = self.root / "run_a"
        before = checkpoint_path(out, 0, 3).stat().st_mtime_ns
        with mock.patch.dict(trainer.STAGE_TRAINERS, {}, clear=True):
            run_pipeline(self.data, self.cfg, out, resume=True)
        self.assertEqual(checkpoint_path(out, 0, 3).stat().st_mtime_ns, before)

    def test_fresh_stage3_detector_survives_resume(self) -> None:
        cfg = dataclasses.replace(self.cfg, training=dataclasses.replace(self.cfg.training, stage3_from_scratch=True))
        expected = run_pipeline(self.data, cfg, self.root / "scratch_a")

        out = self.root / "scratch_b"

        def interrupted(bundle, batch, cfg, parts):
            raise KeyboardInterrupt

        with mock.patch.dict(trainer.STEP_FUNCTIONS, {2: interrupted}):
            with self.assertRaises(KeyboardInterrupt):
                run_pipeline(self.data, cfg, out)
        self.assertTrue(checkpoint_path(out, 0, 1).exists())
        self.assertFalse(checkpoint_path(out, 0, 3).exists())

        resumed = run_pipeline(self.data, cfg, out, resume=True)
        self.assertTrue(
            same_state(load_bundle(checkpoint_path(out, 0, 3)), load_bundle(checkpoint_path(self.root / "scratch_a", 0, 3)))
        )
        stage3 = [s["loss_total"] for s in resumed.steps if s["stage"] == 3]
        self.assertEqual(stage3, [s["loss_total"] for s in expected.steps if s["stage"] == 3])

    def test_two_cycles(self) -> None:
        cfg = dataclasses.replace(self.cfg, training=dataclasses.replace(self.cfg.training, cycles=2))
        out = self.root / "two_cycles"
        runlog = run_pipeline(self.data, cfg, out)
        self.assertEqual([s["stage"] for s in runlog.stages], [1, 2, 3, 2, 3])
        self.assertEqual(len(runlog.steps), 12)
        self.assertEqual(sorted({s["cycle"] for s in runlog.steps}), [0, 1])
        for cycle, stage in pipeline_schedule(2):
            self.assertTrue(checkpoint_path(out, cycle, stage).exists())
        self.assertFalse(same_state(load_bundle(checkpoint_path(out, 1, 3)), load_bundle(checkpoint_path(out, 0, 3))))


if __name__ == "__main__":
    unittest.main()
