from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.errors import BadMagic, ExportError, ShapeMismatch, TruncatedFile
from app.models import GeometryReport, RunReport, RunSummary, TrainConfig
from app.services.datasets import LabeledDataset
from app.services.encoder import MlpEncoder
from app.services.numkernel import DenseMatrix, as_matrix
from app.services.optimizers import OptimizerState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CCLLAB1\n"
CHECKPOINT_VERSION = 1
REPORT_FILE = "report.json"
METRICS_FILE = "metrics.csv"
EVAL_CSV_FILE = "eval.csv"
EVAL_JSON_FILE = "eval.json"
CENTERS_FILE = "centers.csv"
CHECKPOINT_FILE = "checkpoint.cclb"


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.echo(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run_id_for(config: TrainConfig) -> str:
    return f"{config_hash(config)[:12]}-seed{config.seed}"


def _number(value: float) -> str:
    return repr(float(value))


class ArtifactStore:
    """Per-run artifact directories under one runs root."""

    def __init__(self, runs_dir: str | Path) -> None:
        self.root = Path(runs_dir)

    def run_dir(self, run_id: str) -> Path:
        path = self.root / run_id
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ExportError(f"could not create run directory {path}: {exc}") from exc
        return path

    def write_report(self, report: RunReport) -> Path:
        path = self.run_dir(report.run_id) / REPORT_FILE
        self._write_text(path, report.model_dump_json(indent=2) + "\n")
        return path

    def read_report(self, run_id: str) -> RunReport | None:
        if run_id in {"", ".", ".."} or Path(run_id).name != run_id:
            return None
        path = self.root / run_id / REPORT_FILE
        if not path.is_file():
            return None
        return RunReport.model_validate_json(path.read_text(encoding="utf-8"))

    def list_runs(self) -> list[RunSummary]:
        if not self.root.is_dir():
            return []
        summaries: list[RunSummary] = []
        for report_path in sorted(self.root.glob(f"*/{REPORT_FILE}")):
            try:
                report = RunReport.model_validate_json(report_path.read_text(encoding="utf-8"))
            except (OSError, ValidationError):
                logger.warning("Skipping unreadable run report %s", report_path)
                continue
            summaries.append(
                RunSummary(
                    run_id=report.run_id,
                    loss=str(report.config.get("loss", "")),
                    epochs=len(report.epochs),
                    recall_at_1=report.final_recall.get(1),
                )
            )
        return summaries

    def write_metrics_csv(self, report: RunReport, ks: list[int]) -> Path:
        rows = [["epoch", "loss", *[f"recall@{k}" for k in ks]]]
        for record in report.epochs:
            rows.append([str(record.epoch), _number(record.loss), *[_number(record.recall[k]) for k in ks]])
        return self._write_csv(self.run_dir(report.run_id) / METRICS_FILE, rows)

    def write_eval(self, run_id: str, recall: dict[int, float], geometry: GeometryReport | None) -> tuple[Path, Path]:
        rows = [["metric", "k", "value"]]
        rows.extend(["recall", str(k), _number(value)] for k, value in sorted(recall.items()))
        summary: dict[str, Any] = {"recall": {str(k): value for k, value in sorted(recall.items())}}
        if geometry is not None:
            for name in ("global_mean_intra_class_cosine", "min_center_cosine_distance", "radius_mean", "radius_std"):
                value = getattr(geometry, name)
                if value is not None:
                    rows.append([name, "", _number(value)])
            summary["geometry"] = geometry.model_dump(mode="json")
        directory = self.run_dir(run_id)
        csv_path = self._write_csv(directory / EVAL_CSV_FILE, rows)
        json_path = self._write_text(directory / EVAL_JSON_FILE, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    def _write_csv(self, path: Path, rows: list[list[str]]) -> Path:
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerows(rows)
        return self._write_text(path, buffer.getvalue())

    def _write_text(self, path: Path, text: str) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ExportError(f"could not write {path}: {exc}") from exc
        logger.info("Wrote %s", path)
        return path


def export_center_bank(raw_centers, path: str | Path) -> Path:
    """One row per class: `class_id,c0..c{d-1}` with raw (stored) coordinates."""
    centers = as_matrix(raw_centers, "raw_centers")
    header = ["class_id", *[f"c{index}" for index in range(centers.shape[1])]]
    rows = [header] + [[str(class_id), *[_number(value) for value in row]] for class_id, row in enumerate(centers)]
    return _write_rows(Path(path), rows)


def import_center_bank(path: str | Path) -> DenseMatrix:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or header[0] != "class_id":
            raise ShapeMismatch(f"{path} is not a center-bank CSV")
        rows = {int(record[0]): [float(value) for value in record[1:]] for record in reader if record}
    if sorted(rows) != list(range(len(rows))):
        raise ShapeMismatch(f"{path} must list class ids 0..N-1 exactly once")
    return np.array([rows[class_id] for class_id in range(len(rows))], dtype=np.float64)


def export_dataset_csv(ds: LabeledDataset, path: str | Path) -> Path:
    header = ["id", "true_label", "train_label", "split", *[f"f{index}" for index in range(ds.features.shape[1])]]
    rows = [header]
    for index in range(len(ds)):
        rows.append(
            [
                str(index),
                str(int(ds.true_labels[index])),
                str(int(ds.train_labels[index])),
                str(ds.split_tags[index]),
                *[_number(value) for value in ds.features[index]],
            ]
        )
    return _write_rows(Path(path), rows)


def _write_rows(path: Path, rows: list[list[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            csv.writer(handle, lineterminator="\n").writerows(rows)
    except OSError as exc:
        raise ExportError(f"could not write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path


def save_checkpoint(
    path: str | Path,
    encoder: MlpEncoder,
    optimizer: OptimizerState,
    rng_counter: int,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> Path:
    """Magic line followed by an npz archive of parameters, optimizer buffers and JSON metadata."""
    arrays: dict[str, np.ndarray] = dict(zip(encoder.param_names, encoder.params))
    for buffer_name, buffers in optimizer.buffers().items():
        for index, buffer in enumerate(buffers):
            arrays[f"optimizer.{buffer_name}.{index}"] = buffer
    for name, value in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = np.asarray(value)
    metadata = {
        "format_version": CHECKPOINT_VERSION,
        "layer_dims": encoder.layer_dims,
        "dropout_rate": encoder.dropout_rate,
        "rng_counter": rng_counter,
        "optimizer": {
            "kind": optimizer.kind.value,
            "learning_rate": optimizer.learning_rate,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
        },
    }
    arrays["metadata"] = np.frombuffer(json.dumps(metadata, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    checkpoint_path = Path(path)
    try:
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint_path.write_bytes(CHECKPOINT_MAGIC + buffer.getvalue())
    except OSError as exc:
        raise ExportError(f"could not write checkpoint {checkpoint_path}: {exc}") from exc
    logger.info("Wrote checkpoint %s", checkpoint_path)
    return checkpoint_path


def load_checkpoint(path: str | Path) -> tuple[MlpEncoder, OptimizerState, int, dict[str, np.ndarray]]:
    payload = Path(path).read_bytes()
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise BadMagic(f"{path} is not a CCLLAB1 checkpoint")
    try:
        archive = np.load(io.BytesIO(payload[len(CHECKPOINT_MAGIC):]), allow_pickle=False)
        arrays = {name: archive[name] for name in archive.files}
    except (ValueError, OSError, EOFError) as exc:
        raise TruncatedFile(f"{path} holds a damaged checkpoint archive") from exc

    metadata = json.loads(arrays.pop("metadata").tobytes().decode("utf-8"))
    layer_dims = list(metadata["layer_dims"])
    names = [f"layer{index}.{part}" for index in range(len(layer_dims) - 1) for part in ("weight", "bias")]
    params = [arrays[name] for name in names]
    encoder = MlpEncoder(
        layer_dims=layer_dims,
        weights=params[0::2],
        biases=params[1::2],
        dropout_rate=float(metadata["dropout_rate"]),
    )

    settings = metadata["optimizer"]
    optimizer = OptimizerState(
        kind=settings["kind"],
        learning_rate=settings["learning_rate"],
        momentum=settings["momentum"],
        weight_decay=settings["weight_decay"],
        beta1=settings["beta1"],
        beta2=settings["beta2"],
        eps=settings["eps"],
        step_count=settings["step_count"],
    )
    for buffer_name, buffers in optimizer.buffers().items():
        index = 0
        while f"optimizer.{buffer_name}.{index}" in arrays:
            buffers.append(arrays[f"optimizer.{buffer_name}.{index}"])
            index += 1
    extras = {name.removeprefix("extra."): value for name, value in arrays.items() if name.startswith("extra.")}
    return encoder, optimizer, int(metadata["rng_counter"]), extras
