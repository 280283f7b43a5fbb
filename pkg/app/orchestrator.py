from __future__ import annotations

import copy
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from app.adapters.artifact_store import (
    CENTERS_FILE,
    CHECKPOINT_FILE,
    ArtifactStore,
    config_hash,
    export_center_bank,
    export_dataset_csv,
    run_id_for,
    save_checkpoint,
)
from app.adapters.svg_renderer import export_scatter_2d, render_heat_grid
from app.config import Settings, parse_train_config
from app.errors import ConfigError, ExportError
from app.models import GradcheckResponse, NoiseStudyRow, RunReport, StudyRow, SweepCell, TrainConfig
from app.services.encoder import embed
from app.services.gradcheck import run_gradcheck
from app.services.trainer import TrainingResult, train

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = [0.0, 0.5, 1.0, 1.5, 2.0]
DEFAULT_M_GRID = [0.0, 0.1, 0.2, 0.3, 0.4]
DEFAULT_NOISE_RATES = [0.1, 0.2]
DEFAULT_NOISE_KINDS = ["symmetric"]
DEFAULT_NOISE_LOSSES = ["ccl", "nsoftmax"]
ROBUST_CCL_LAMBDA = 2.0
DEFAULT_MOMENTUM_MU = 0.9
MNIST2D_LOSSES = ("cross_entropy", "nsoftmax", "center_loss", "ccl")
MNIST2D_CENTER_LOSS_LAMBDA = 0.01
MNIST2D_LEARNING_RATE = 0.001


def config_variant(config: TrainConfig, **changes) -> TrainConfig:
    """Re-validated copy of `config`; keys use the JSON (alias) names."""
    payload = copy.deepcopy(config.echo())
    payload.update(changes)
    return parse_train_config(payload)


def for_loss(config: TrainConfig, loss: str, **changes) -> TrainConfig:
    """Switch the loss and drop the hyperparameters the new loss does not accept."""
    defaults = {"loss": loss, "m": 0.0, "lambda": 0.0, "epsilon": None}
    if loss not in {"ccl", "nsoftmax", "proxynca", "margin_contrastive"}:
        defaults.update({"center_mode": "gradient", "mu": None})
    defaults.update(changes)
    return config_variant(config, **defaults)


class LabOrchestrator:
    def __init__(self, settings: Settings, store: ArtifactStore) -> None:
        self.settings = settings
        self.store = store

    def train(self, config: TrainConfig, export_dataset: bool = False) -> RunReport:
        run_id = run_id_for(config)
        result = train(config, run_id)
        self._write_run(config, result)
        if export_dataset:
            export_dataset_csv(result.dataset, self.store.run_dir(run_id) / "dataset.csv")
        return result.report

    def _write_run(self, config: TrainConfig, result: TrainingResult) -> None:
        report = result.report
        run_dir = self.store.run_dir(report.run_id)
        self.store.write_report(report)
        self.store.write_metrics_csv(report, config.eval_ks)
        self.store.write_eval(report.run_id, report.final_recall, report.geometry)

        state = result.state
        extras = {"label_classes": result.label_classes}
        if state.bank is not None:
            extras["centers"] = state.bank.snapshot()
            export_center_bank(extras["centers"], run_dir / CENTERS_FILE)
        if state.loose_centers is not None:
            extras["centers"] = state.loose_centers
            export_center_bank(state.loose_centers, run_dir / CENTERS_FILE)
        if state.classifier is not None:
            extras["classifier.W"] = state.classifier.W
            extras["classifier.b"] = state.classifier.b
        save_checkpoint(run_dir / CHECKPOINT_FILE, state.encoder, state.optimizer, state.step, extras)

    def gradcheck(self, seed: int = 0, trials: int = 20, export: bool = False) -> GradcheckResponse:
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        result = run_gradcheck(seed=seed, trials=trials)
        if export:
            _write_table(
                self.store.run_dir(f"gradcheck-seed{seed}") / "gradcheck.csv",
                ["loss", "trial", "group", "relative_error", "redraws", "passed"],
                [
                    [row.loss, str(row.trial), row.group, repr(row.relative_error), str(row.redraws), str(row.passed).lower()]
                    for row in result.rows
                ],
            )
        return result

    def _run_cells(self, configs: list[TrainConfig]) -> list[RunReport]:
        """Train independent cells, in parallel when configured; results keep the input order."""
        workers = max(1, min(self.settings.sweep_workers, len(configs)))
        if workers == 1:
            return [self.train(config) for config in configs]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(self.train, configs))

    def _study_dir(self, prefix: str, config: TrainConfig) -> Path:
        return self.store.run_dir(f"{prefix}-{config_hash(config)[:12]}-seed{config.seed}")

    def sweep(self, config: TrainConfig, lambda_grid: list[float], m_grid: list[float]) -> list[SweepCell]:
        if not lambda_grid or not m_grid:
            raise ConfigError("sweep grids must be non-empty")
        pairs = [(lambda_, m) for lambda_ in lambda_grid for m in m_grid]
        configs = [config_variant(config, **{"lambda": lambda_, "m": m}) for lambda_, m in pairs]
        reports = self._run_cells(configs)
        cells: list[SweepCell] = []
        for (lambda_, m), report in zip(pairs, reports):
            cell = SweepCell(lambda_=lambda_, m=m, recall_at_1=_recall_at_1(report), run_id=report.run_id)
            logger.info("Sweep cell lambda=%g m=%g recall@1=%.4f", lambda_, m, cell.recall_at_1)
            cells.append(cell)

        study_dir = self._study_dir("sweep", config)
        _write_table(
            study_dir / "sweep.csv",
            ["lambda", "m", "recall@1"],
            [[repr(cell.lambda_), repr(cell.m), repr(cell.recall_at_1)] for cell in cells],
        )
        render_heat_grid(
            lambda_grid,
            m_grid,
            {(cell.lambda_, cell.m): cell.recall_at_1 for cell in cells},
            study_dir / "sweep.svg",
        )
        return cells

    def noise_study(
        self,
        config: TrainConfig,
        rates: list[float],
        kinds: list[str],
        losses: list[str] | None = None,
    ) -> list[NoiseStudyRow]:
        """One clean baseline per loss, then one run per (kind, rate); CCL runs with lambda=2, m=0."""
        if any(not 0.0 <= rate <= 1.0 for rate in rates):
            raise ConfigError("noise rates must lie in [0, 1]")
        loss_names = losses or DEFAULT_NOISE_LOSSES
        settings: list[tuple[str, str, float, TrainConfig]] = []
        for loss in loss_names:
            changes = {"lambda": ROBUST_CCL_LAMBDA, "m": 0.0} if loss == "ccl" else {}
            base = for_loss(config, loss, noise=None, **changes)
            settings.append((loss, "clean", 0.0, base))
            for kind in kinds:
                for rate in rates:
                    noisy = config_variant(base, noise={"kind": kind, "rate": rate, "seed": config.seed})
                    settings.append((loss, kind, rate, noisy))

        reports = self._run_cells([entry[3] for entry in settings])
        rows: list[NoiseStudyRow] = []
        for (loss, kind, rate, _), report in zip(settings, reports):
            row = NoiseStudyRow(loss=loss, kind=kind, rate=rate, recall_at_1=_recall_at_1(report), run_id=report.run_id)
            logger.info("Noise study %s %s rate=%g recall@1=%.4f", loss, kind, rate, row.recall_at_1)
            rows.append(row)

        _write_table(
            self._study_dir("noise", config) / "noise_study.csv",
            ["loss", "kind", "rate", "recall@1"],
            [[row.loss, row.kind, repr(row.rate), repr(row.recall_at_1)] for row in rows],
        )
        return rows

    def dim_sweep(self, config: TrainConfig, dims: list[int]) -> list[StudyRow]:
        if not dims:
            raise ConfigError("dimension list must be non-empty")
        layer_dims = list(config.encoder.layer_dims)
        configs = [
            config_variant(config, encoder={**config.encoder.model_dump(), "layer_dims": layer_dims[:-1] + [dim]})
            for dim in dims
        ]
        return self._study(config, "dim", [str(dim) for dim in dims], configs)

    def stopgrad_study(self, config: TrainConfig) -> list[StudyRow]:
        modes = ["gradient", "stopgrad", "momentum"]
        mu = config.mu if config.mu is not None else DEFAULT_MOMENTUM_MU
        configs = [
            config_variant(config, center_mode=mode, mu=mu if mode == "momentum" else None) for mode in modes
        ]
        return self._study(config, "center_mode", modes, configs)

    def _study(self, config: TrainConfig, setting: str, values: list[str], configs: list[TrainConfig]) -> list[StudyRow]:
        reports = self._run_cells(configs)
        rows = [
            StudyRow(setting=setting, value=value, recall_at_1=_recall_at_1(report), run_id=report.run_id)
            for value, report in zip(values, reports)
        ]
        for row in rows:
            logger.info("Study %s=%s recall@1=%.4f", row.setting, row.value, row.recall_at_1)
        _write_table(
            self._study_dir(setting.replace("_", "-"), config) / f"{setting}_study.csv",
            [setting, "recall@1"],
            [[row.value, repr(row.recall_at_1)] for row in rows],
        )
        return rows

    def mnist2d(
        self,
        images_path: str | Path | None,
        labels_path: str | Path | None,
        loss: str,
        epochs: int = 10,
        seed: int = 0,
        max_records: int | None = None,
        base: TrainConfig | None = None,
    ) -> tuple[RunReport, Path]:
        """784 -> 256 -> 2 embedding trained with AdamW; exports the held-out 2-D scatter."""
        if loss not in MNIST2D_LOSSES:
            raise ConfigError(f"mnist2d loss must be one of {list(MNIST2D_LOSSES)}, got {loss}")
        config = mnist2d_config(
            images_path or self.settings.mnist_images_path,
            labels_path or self.settings.mnist_labels_path,
            loss,
            epochs,
            seed,
            max_records,
            base,
        )
        run_id = run_id_for(config)
        result = train(config, run_id)
        self._write_run(config, result)

        ds = result.dataset
        records = ds.test_indices
        embeddings = embed(result.state.encoder, ds.features[records])
        svg_path, _ = export_scatter_2d(
            embeddings,
            ds.true_labels[records],
            self.store.run_dir(run_id) / "scatter.svg",
            title=f"{loss} embeddings after {epochs} epochs",
        )
        return result.report, svg_path


def mnist2d_config(
    images_path: str | Path,
    labels_path: str | Path,
    loss: str,
    epochs: int,
    seed: int,
    max_records: int | None = None,
    base: TrainConfig | None = None,
) -> TrainConfig:
    payload = copy.deepcopy(base.echo()) if base is not None else {}
    dataset = payload.get("dataset", {})
    optimizer = payload.get("optimizer", {})
    if optimizer.get("kind") != "adamw":
        optimizer = {"kind": "adamw", "learning_rate": MNIST2D_LEARNING_RATE}
    payload.update(
        {
            "loss": loss,
            "m": 0.0,
            "lambda": {"ccl": ROBUST_CCL_LAMBDA, "center_loss": MNIST2D_CENTER_LOSS_LAMBDA}.get(loss, 0.0),
            "epsilon": None,
            "center_mode": "gradient",
            "mu": None,
            "epochs": epochs,
            "seed": seed,
            "encoder": {"layer_dims": [784, 256, 2], "dropout": 0.0},
            "dataset": {
                **dataset,
                "kind": "idx",
                "images_path": str(images_path),
                "labels_path": str(labels_path),
                "max_records": max_records if max_records is not None else dataset.get("max_records"),
            },
            "optimizer": optimizer,
        }
    )
    payload.setdefault("batch_size", 128)
    return parse_train_config(payload)


def _recall_at_1(report: RunReport) -> float:
    return float(report.final_recall.get(1, 0.0))


def _write_table(path: Path, header: list[str], rows: list[list[str]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buffer.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"could not write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path

