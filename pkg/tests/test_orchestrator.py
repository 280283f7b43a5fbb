import csv
import struct
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest

from app.adapters.artifact_store import (
    CHECKPOINT_FILE,
    CHECKPOINT_MAGIC,
    ArtifactStore,
    export_center_bank,
    import_center_bank,
    load_checkpoint,
    run_id_for,
)
from app.adapters.idx_reader import IMAGE_MAGIC, LABEL_MAGIC
from app.config import Settings, parse_train_config
from app.errors import BadMagic, ConfigError
from app.models import TrainConfig
from app.orchestrator import LabOrchestrator, config_variant, for_loss, mnist2d_config


def build_config(**changes) -> TrainConfig:
    payload = {
        "loss": "ccl",
        "s": 16.0,
        "m": 0.1,
        "lambda": 1.0,
        "encoder": {"layer_dims": [8, 16, 4]},
        "dataset": {"kind": "sphere", "num_classes": 4, "test_classes": 3, "dim": 8, "samples_per_class": 10},
        "epochs": 1,
        "batch_size": 16,
        "seed": 0,
    }
    payload.update(changes)
    return parse_train_config(payload)


def _rows(path: Path) -> list[list[str]]:
    with path.open(newline="") as handle:
        return list(csv.reader(handle))


def _write_idx(directory: Path, images: np.ndarray, labels: np.ndarray) -> tuple[Path, Path]:
    count, rows, cols = images.shape
    image_path = directory / "images-idx3-ubyte"
    label_path = directory / "labels-idx1-ubyte"
    image_path.write_bytes(struct.pack(">4I", IMAGE_MAGIC, count, rows, cols) + images.astype(np.uint8).tobytes())
    label_path.write_bytes(struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes())
    return image_path, label_path


class TrainArtifactsTest(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.store = ArtifactStore(self.root)
        self.orchestrator = LabOrchestrator(Settings(runs_dir=str(self.root), sweep_workers=1), self.store)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_train_writes_every_artifact(self) -> None:
        config = build_config(epochs=2)
        report = self.orchestrator.train(config, export_dataset=True)
        run_dir = self.root / report.run_id
        self.assertEqual(report.run_id, run_id_for(config))
        for name in ("report.json", "metrics.csv", "eval.csv", "eval.json", "centers.csv", CHECKPOINT_FILE, "dataset.csv"):
            self.assertTrue((run_dir / name).is_file(), name)
        metrics = _rows(run_dir / "metrics.csv")
        self.assertEqual(metrics[0], ["epoch", "loss", "recall@1", "recall@2", "recall@4"])
        self.assertEqual(len(metrics), 3)
        self.assertEqual(import_center_bank(run_dir / "centers.csv").shape, (4, 4))

    def test_reports_are_listed_and_read_back(self) -> None:
        report = self.orchestrator.train(build_config())
        summaries = self.store.list_runs()
        self.assertEqual([summary.run_id for summary in summaries], [report.run_id])
        self.assertEqual(summaries[0].loss, "ccl")
        self.assertEqual(self.store.read_report(report.run_id).final_recall, report.final_recall)
        self.assertIsNone(self.store.read_report("../elsewhere"))
        self.assertIsNone(self.store.read_report("missing"))

    def test_checkpoint_round_trip(self) -> None:
        report = self.orchestrator.train(build_config(epochs=2))
        path = self.root / report.run_id / CHECKPOINT_FILE
        self.assertTrue(path.read_bytes().startswith(CHECKPOINT_MAGIC))
        encoder, optimizer, rng_counter, extras = load_checkpoint(path)
        self.assertEqual(encoder.layer_dims, [8, 16, 4])
        self.assertEqual(optimizer.step_count, rng_counter)
        # 40 training records in batches of 16: three steps per epoch
        self.assertEqual(rng_counter, 2 * 3)
        self.assertEqual(len(optimizer.velocity), 4)
        self.assertEqual(extras["centers"].shape, (4, 4))
        self.assertEqual(extras["label_classes"].tolist(), [0, 1, 2, 3])

    def test_center_bank_csv_round_trips_exactly(self) -> None:
        report = self.orchestrator.train(build_config(epochs=2))
        run_dir = self.root / report.run_id
        *_, extras = load_checkpoint(run_dir / CHECKPOINT_FILE)
        np.testing.assert_array_equal(import_center_bank(run_dir / "centers.csv"), extras["centers"])
        again = export_center_bank(extras["centers"], self.root / "copy.csv")
        self.assertEqual(again.read_bytes(), (run_dir / "centers.csv").read_bytes())

    def test_classifier_checkpoint_keeps_weights(self) -> None:
        report = self.orchestrator.train(build_config(loss="cross_entropy", m=0.0, **{"lambda": 0.0}))
        _, _, _, extras = load_checkpoint(self.root / report.run_id / CHECKPOINT_FILE)
        self.assertEqual(extras["classifier.W"].shape, (4, 4))
        self.assertFalse((self.root / report.run_id / "centers.csv").exists())

    def test_damaged_checkpoint(self) -> None:
        path = self.root / "bad.cclb"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with self.assertRaises(BadMagic):
            load_checkpoint(path)


class StudiesTest(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.orchestrator = LabOrchestrator(Settings(runs_dir=str(self.root), sweep_workers=1), ArtifactStore(self.root))

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_sweep_writes_grid(self) -> None:
        cells = self.orchestrator.sweep(build_config(), [0.0, 1.0], [0.0, 0.2])
        self.assertEqual([(cell.lambda_, cell.m) for cell in cells], [(0.0, 0.0), (0.0, 0.2), (1.0, 0.0), (1.0, 0.2)])
        (table,) = list(self.root.glob("sweep-*/sweep.csv"))
        rows = _rows(table)
        self.assertEqual(rows[0], ["lambda", "m", "recall@1"])
        self.assertEqual(len(rows), 5)
        self.assertTrue((table.parent / "sweep.svg").is_file())

    def test_zero_cell_reproduces_nsoftmax(self) -> None:
        config = build_config(epsilon=0.0)
        (cell,) = self.orchestrator.sweep(config, [0.0], [0.0])
        direct = self.orchestrator.train(config_variant(config, **{"lambda": 0.0, "m": 0.0}))
        baseline = self.orchestrator.train(for_loss(config, "nsoftmax"))
        self.assertEqual(cell.run_id, direct.run_id)
        self.assertEqual(cell.recall_at_1, baseline.final_recall[1])

    def test_sweep_runs_in_parallel_with_same_results(self) -> None:
        serial = self.orchestrator.sweep(build_config(), [0.0, 1.0], [0.1])
        parallel = LabOrchestrator(
            Settings(runs_dir=str(self.root / "parallel"), sweep_workers=2), ArtifactStore(self.root / "parallel")
        ).sweep(build_config(), [0.0, 1.0], [0.1])
        self.assertEqual([cell.recall_at_1 for cell in serial], [cell.recall_at_1 for cell in parallel])

    def test_noise_study_rows(self) -> None:
        rows = self.orchestrator.noise_study(build_config(), [0.2], ["symmetric", "longtail"], ["ccl", "nsoftmax"])
        self.assertEqual(len(rows), 6)
        self.assertEqual([row.kind for row in rows[:3]], ["clean", "symmetric", "longtail"])
        ccl_report = self.orchestrator.store.read_report(rows[1].run_id)
        self.assertEqual(ccl_report.config["lambda"], 2.0)
        self.assertEqual(ccl_report.config["m"], 0.0)
        self.assertEqual(ccl_report.config["noise"]["rate"], 0.2)
        self.assertEqual(len(list(self.root.glob("noise-*/noise_study.csv"))), 1)

    def test_noise_free_rows_match_the_clean_runs(self) -> None:
        rows = self.orchestrator.noise_study(build_config(), [0.0], ["symmetric", "longtail"], ["ccl", "nsoftmax"])
        for start in (0, 3):
            clean, symmetric, longtail = rows[start : start + 3]
            self.assertEqual(clean.kind, "clean")
            self.assertEqual(symmetric.recall_at_1, clean.recall_at_1)
            self.assertEqual(longtail.recall_at_1, clean.recall_at_1)

    def test_dim_sweep_and_center_mode_study(self) -> None:
        dims = self.orchestrator.dim_sweep(build_config(), [2, 4])
        self.assertEqual([row.value for row in dims], ["2", "4"])
        modes = self.orchestrator.stopgrad_study(build_config())
        self.assertEqual([row.value for row in modes], ["gradient", "stopgrad", "momentum"])
        (table,) = list(self.root.glob("center-mode-*/center_mode_study.csv"))
        self.assertEqual(_rows(table)[0], ["center_mode", "recall@1"])

    def test_gradcheck_needs_a_trial(self) -> None:
        with self.assertRaises(ConfigError):
            self.orchestrator.gradcheck(trials=0)


def test_for_loss_drops_foreign_hyperparameters() -> None:
    config = for_loss(build_config(center_mode="momentum", mu=0.9), "cross_entropy")
    assert config.loss == "cross_entropy"
    assert (config.m, config.lambda_, config.mu, config.center_mode) == (0.0, 0.0, None, "gradient")


def test_config_variant_revalidates() -> None:
    with pytest.raises(ConfigError):
        config_variant(build_config(), loss="nsoftmax")


def test_mnist2d_config_shape() -> None:
    config = mnist2d_config("images", "labels", "center_loss", epochs=3, seed=1, max_records=200)
    assert config.encoder.layer_dims == [784, 256, 2]
    assert config.optimizer.kind == "adamw"
    assert config.lambda_ == 0.01
    assert config.dataset.max_records == 200


def test_mnist2d_exports_scatter(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 30)
    images = rng.integers(0, 256, size=(120, 28, 28))
    image_path, label_path = _write_idx(tmp_path, images, labels)
    orchestrator = LabOrchestrator(Settings(runs_dir=str(tmp_path / "runs"), sweep_workers=1), ArtifactStore(tmp_path / "runs"))
    report, svg_path = orchestrator.mnist2d(image_path, label_path, "ccl", epochs=1, seed=0)
    assert svg_path.is_file()
    assert svg_path.with_suffix(".csv").is_file()
    assert report.config["encoder"]["layer_dims"] == [784, 256, 2]
