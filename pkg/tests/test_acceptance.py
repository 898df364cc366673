"""Toy-scale end-to-end gates. Slow: set TARGETSOUND_TOY_ACCEPTANCE=1 to run."""

from __future__ import annotations

import os
import tempfile
import unittest
from pathlib import Path

from targetsound.cli import resolve_data
from targetsound.config import load_config
from targetsound.trainer import run_pipeline

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@unittest.skipUnless(os.environ.get("TARGETSOUND_TOY_ACCEPTANCE") == "1", "toy acceptance run is opt-in")
class ToyPipelineTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        out = Path(cls._tmp.name)
        cfg = load_config(CONFIGS / "toy.json")
        cls.runlog = run_pipeline(resolve_data(cfg, out), cfg, out)
        cls.metrics = {s["stage"]: s["metrics"] for s in cls.runlog.stages}

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def test_detector_loss_halves(self) -> None:
        bce = [e["loss_bce"] for e in self.runlog.epochs if e["stage"] == 1]
        self.assertLessEqual(bce[-1], 0.5 * bce[0])

    def test_extractor_improves_mixtures(self) -> None:
        self.assertGreater(self.metrics[2]["train_si_sdri"], 0.0)
        self.assertGreater(self.metrics[2]["valid_si_sdri"], 0.0)

    def test_fine_tuning_keeps_detection(self) -> None:
        self.assertGreaterEqual(self.metrics[3]["valid_segment_f1"], self.metrics[1]["valid_segment_f1"] - 0.02)

    def test_every_stage_audited_its_frozen_branch(self) -> None:
        self.assertEqual([len(s["frozen_hashes"]) for s in self.runlog.stages], [4, 4, 4])


if __name__ == "__main__":
    unittest.main()
