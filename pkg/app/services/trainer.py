from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app import __version__
from app.adapters.idx_reader import load_idx
from app.errors import EmptySplit
from app.models import EpochRecord, GeometryReport, RunReport, TrainConfig
from app.services.center_bank import (
    CenterBank,
    CenterMode,
    CenterUpdate,
    apply_gradient_mode,
    apply_stopgrad_mode,
    init_centers,
    momentum_update,
)
from app.services.datasets import (
    LabeledDataset,
    SplitTag,
    generate_sphere_mixture,
    holdout_split,
    inject_noise,
    random_batch_sampler,
    split_query_gallery,
    subsample,
)
from app.services.encoder import MlpEncoder, backward, embed, forward
from app.services.losses import (
    LinearClassifier,
    LossOutput,
    batch_infonce,
    ccl,
    center_loss_joint,
    cross_entropy_linear,
    margin_contrastive,
    nsoftmax,
    proxynca,
)
from app.services.numkernel import DenseMatrix, l2_normalize_rows
from app.services.optimizers import OptimizerState, optimizer_step
from app.services.retrieval import RetrievalIndex, geometry_report, recall_at_k

logger = logging.getLogger(__name__)

CLASSIFIER_LOSSES = {"cross_entropy", "center_loss"}


@dataclass
class TrainingState:
    encoder: MlpEncoder
    optimizer: OptimizerState
    bank: CenterBank | None = None
    classifier: LinearClassifier | None = None
    loose_centers: DenseMatrix | None = None
    step: int = 0


@dataclass
class TrainingResult:
    report: RunReport
    state: TrainingState
    dataset: LabeledDataset
    label_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def build_dataset(config: TrainConfig) -> LabeledDataset:
    """Dataset with splits and label noise applied, ready for training."""
    spec = config.dataset
    seed = config.dataset_seed
    if spec.kind == "sphere":
        ds = generate_sphere_mixture(
            spec.num_classes, spec.dim, spec.samples_per_class, spec.spread, seed, test_classes=spec.test_classes
        )
    else:
        ds = load_idx(Path(spec.images_path), Path(spec.labels_path))
        if spec.max_records is not None:
            ds = subsample(ds, spec.max_records, seed)
    if ds.test_indices.size == 0:
        ds = holdout_split(ds, spec.holdout_fraction, seed)
    if spec.query_fraction is not None:
        ds = split_query_gallery(ds, spec.query_fraction, seed)
    if config.noise is not None:
        ds = inject_noise(ds, config.noise)
    return ds


def contiguous_train_labels(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Training labels renumbered 0..K-1 over the classes present in the train split."""
    train = ds.train_indices
    if train.size == 0:
        raise EmptySplit("dataset has no training records")
    classes, remapped = np.unique(ds.train_labels[train], return_inverse=True)
    labels = np.full(len(ds), -1, dtype=np.int64)
    labels[train] = remapped
    return classes, labels


def evaluate(encoder: MlpEncoder, ds: LabeledDataset, ks: list[int]) -> dict[int, float]:
    """Recall@k on the held-out records: query against gallery when tagged, otherwise leave-one-out."""
    if ds.has_query_split:
        queries = ds.indices(SplitTag.QUERY)
        gallery = ds.indices(SplitTag.GALLERY)
        index = RetrievalIndex.build(embed(encoder, ds.features[gallery]), ds.true_labels[gallery])
        return recall_at_k(embed(encoder, ds.features[queries]), ds.true_labels[queries], index, ks)
    records = _evaluation_records(ds)
    embeddings = embed(encoder, ds.features[records])
    labels = ds.true_labels[records]
    return recall_at_k(embeddings, labels, RetrievalIndex.build(embeddings, labels), ks, exclude_self=True)


def final_geometry(encoder: MlpEncoder, ds: LabeledDataset) -> GeometryReport:
    records = _evaluation_records(ds)
    return geometry_report(embed(encoder, ds.features[records]), ds.true_labels[records])


def _evaluation_records(ds: LabeledDataset) -> np.ndarray:
    test = ds.test_indices
    return test if test.size else ds.train_indices


def init_state(config: TrainConfig, num_train_classes: int) -> TrainingState:
    encoder = MlpEncoder.initialize(config.encoder.layer_dims, config.seed, config.encoder.dropout)
    state = TrainingState(encoder=encoder, optimizer=OptimizerState.from_spec(config.optimizer))
    dim = encoder.embedding_dim
    if config.loss in CLASSIFIER_LOSSES:
        state.classifier = LinearClassifier.initialize(num_train_classes, dim, config.seed + 2)
    if config.loss == "center_loss":
        state.loose_centers = np.zeros((num_train_classes, dim))
    elif config.loss != "infonce-batch" and config.loss not in CLASSIFIER_LOSSES:
        state.bank = init_centers(
            num_train_classes,
            dim,
            config.seed + 1,
            mode=CenterMode(config.center_mode),
            mu=config.mu,
            renormalize=config.renormalize_centers,
        )
    return state


def compute_loss(config: TrainConfig, state: TrainingState, embeddings: DenseMatrix, labels: np.ndarray) -> LossOutput:
    if config.loss == "ccl":
        return ccl(embeddings, labels, state.bank.raw_centers, config.margin_config)
    if config.loss == "nsoftmax":
        return nsoftmax(embeddings, labels, state.bank.raw_centers, config.s)
    if config.loss == "proxynca":
        return proxynca(embeddings, labels, state.bank.raw_centers, config.s)
    if config.loss == "margin_contrastive":
        return margin_contrastive(embeddings, labels, state.bank.raw_centers, config.s, config.m)
    if config.loss == "cross_entropy":
        return cross_entropy_linear(embeddings, labels, state.classifier)
    if config.loss == "center_loss":
        return center_loss_joint(embeddings, labels, state.classifier, state.loose_centers, config.lambda_)
    return batch_infonce(embeddings, labels, 1.0 / config.s)


def train_step(config: TrainConfig, state: TrainingState, features: DenseMatrix, labels: np.ndarray, epoch: int) -> float:
    """One optimizer step over a batch; returns the batch-mean loss."""
    embeddings, cache = forward(state.encoder, features, training=True, rng_seed=[config.seed, epoch, state.step])
    output = compute_loss(config, state, embeddings, labels)
    grads = backward(state.encoder, cache, output.grad_raw_embeddings)

    params = state.encoder.params
    if state.classifier is not None:
        params = params + [state.classifier.W, state.classifier.b]
        grads = grads + [output.extra_grads["W"], output.extra_grads["b"]]
    updated = optimizer_step(state.optimizer, params, grads)
    encoder_count = len(state.encoder.params)
    state.encoder.set_params(updated[:encoder_count])
    if state.classifier is not None:
        state.classifier = LinearClassifier(W=updated[encoder_count], b=updated[encoder_count + 1])

    center_lr = config.center_lr if config.center_lr is not None else config.optimizer.learning_rate
    if state.loose_centers is not None:
        state.loose_centers = state.loose_centers - center_lr * output.grad_centers
    if state.bank is not None:
        state.bank = _update_bank(state.bank, output, embeddings, labels, center_lr)
    state.step += 1
    return output.value


def _update_bank(bank: CenterBank, output: LossOutput, embeddings: DenseMatrix, labels: np.ndarray, center_lr: float) -> CenterBank:
    if bank.mode is CenterMode.MOMENTUM:
        return momentum_update(bank, l2_normalize_rows(embeddings), labels)
    update = CenterUpdate(
        grad_centers=output.grad_centers,
        batch_embeddings=embeddings,
        batch_labels=labels,
        grad_centers_center_term=output.grad_centers_center_term,
    )
    if bank.mode is CenterMode.STOPGRAD:
        return apply_stopgrad_mode(bank, update, center_lr)
    return apply_gradient_mode(bank, update, center_lr)


def train(config: TrainConfig, run_id: str, dataset: LabeledDataset | None = None) -> TrainingResult:
    started = time.perf_counter()
    ds = dataset if dataset is not None else build_dataset(config)
    classes, labels = contiguous_train_labels(ds)
    state = init_state(config, int(classes.size))
    ks = config.eval_ks

    initial_recall = evaluate(state.encoder, ds, ks)
    logger.info("Run %s initial %s", run_id, _format_recall(initial_recall))
    epochs: list[EpochRecord] = []
    recall = initial_recall
    for epoch in range(1, config.epochs + 1):
        total_loss = 0.0
        seen = 0
        for batch in random_batch_sampler(ds, config.batch_size, [config.seed, epoch]):
            total_loss += train_step(config, state, ds.features[batch], labels[batch], epoch) * batch.size
            seen += batch.size
        recall = evaluate(state.encoder, ds, ks)
        epochs.append(EpochRecord(epoch=epoch, loss=total_loss / seen, recall=recall))
        logger.info("Run %s epoch %d/%d loss=%.6f %s", run_id, epoch, config.epochs, total_loss / seen, _format_recall(recall))

    report = RunReport(
        run_id=run_id,
        version=__version__,
        config=config.echo(),
        initial_recall=initial_recall,
        epochs=epochs,
        final_recall=recall,
        geometry=final_geometry(state.encoder, ds),
        wall_clock_seconds=time.perf_counter() - started,
    )
    return TrainingResult(report=report, state=state, dataset=ds, label_classes=classes)


def _format_recall(recall: dict[int, float]) -> str:
    return " ".join(f"recall@{k}={value:.4f}" for k, value in sorted(recall.items()))
