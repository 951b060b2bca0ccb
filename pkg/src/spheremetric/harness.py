"""End-to-end experiments: train, evaluate with k-NN, compare losses, ablate the margin."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from spheremetric.classify import KnnIndex, class_scores, knn_classify, knn_sweep
from spheremetric.data import AugmentConfig, Dataset, augment_sample, gen_gaussian_clusters, load_dataset, \
    stratified_split
from spheremetric.errors import ContractError, NumericalError
from spheremetric.geometry import EmbeddingBatch, l2_normalize, separation_stats
from spheremetric.layers import Model, build_convnet, build_mlp
from spheremetric.losses import LossConfig, compute_loss, init_class_weights
from spheremetric.metrics import MetricsReport, full_report
from spheremetric.numerics import Rng
from spheremetric.optim import PAPER_EPOCHS, AdamState, LrSchedule, adam_step, learning_rate_at

log = logging.getLogger(__name__)

# streams derived from the run seed
_INIT, _SHUFFLE, _AUGMENT, _HEAD = range(4)
_DATA, _SPLIT = 10, 11


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "n_classes": 3, "dim": 32, "samples_per_class": 200,
        "center_separation": 4.0, "spread": 1.0, "seed": 0,
    })
    backbone: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [64]})
    embedding_dim: int = 256
    dropout: float = 0.2
    loss: str = "sphereface"
    m: int = 5
    s: float = 30.0
    triplet_margin: float = 0.2
    epochs: int = 200
    batch_size: int = 32
    # desk-scale runs take ~10x fewer optimizer steps than the full recipe, hence 10x the rates
    lr_rates: tuple = (1e-3, 1e-4, 1e-5)
    lr_breakpoints: tuple = (125, 175)
    lr_reference_epochs: int = PAPER_EPOCHS
    seed: int = 0
    train_fraction: float = 0.7
    swap_split: bool = False
    k: int = 1
    k_max: int = 30
    augment: dict | None = None

    def __post_init__(self):
        self.lr_rates = tuple(float(r) for r in self.lr_rates)
        self.lr_breakpoints = tuple(int(b) for b in self.lr_breakpoints)
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ContractError("batch size must be at least 2 (batch norm)")
        self.loss_config()
        self.schedule()

    @classmethod
    def paper_faithful(cls, **overrides) -> "ExperimentConfig":
        base = dict(epochs=PAPER_EPOCHS, m=5, s=30.0, dropout=0.2, embedding_dim=256,
                    lr_rates=(1e-4, 1e-5, 1e-6), lr_breakpoints=(125, 175))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_rates"] = list(self.lr_rates)
        d["lr_breakpoints"] = list(self.lr_breakpoints)
        return d

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.m, self.s, self.triplet_margin)

    def schedule(self) -> LrSchedule:
        base = LrSchedule(self.lr_breakpoints, self.lr_rates)
        return base.rescaled(self.epochs, self.lr_reference_epochs) if self.epochs else base

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment) if self.augment is not None else AugmentConfig()


@dataclass
class RunRecord:
    config: dict
    seed: int
    loss_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    adam_steps: int = 0
    metrics: MetricsReport | None = None
    separation: dict | None = None
    knn_curve: list[float] | None = None
    best_k: int | None = None
    wall_clock: float = 0.0


@dataclass
class Evaluation:
    report: MetricsReport
    separation: dict
    predictions: np.ndarray
    scores: np.ndarray
    train_embeddings: EmbeddingBatch
    test_embeddings: EmbeddingBatch
    best_k: int | None = None
    knn_curve: list[float] | None = None


def build_dataset(config: ExperimentConfig) -> Dataset:
    params = dict(config.dataset)
    kind = params.pop("kind", "synthetic")
    if kind == "manifest":
        return load_dataset(params["path"])
    if kind != "synthetic":
        raise ContractError(f"unknown dataset kind {kind!r}")
    seed = params.pop("seed", config.seed)
    return gen_gaussian_clusters(Rng(seed).child(_DATA), **params)


def prepare_data(config: ExperimentConfig, dataset: Dataset | None = None) -> tuple[Dataset, Dataset]:
    """Stratified split of the configured dataset; ``swap_split`` exchanges the partitions."""
    dataset = dataset if dataset is not None else build_dataset(config)
    seed = config.dataset.get("seed", config.seed)
    train, test = stratified_split(dataset, config.train_fraction, Rng(seed).child(_SPLIT))
    return (test, train) if config.swap_split else (train, test)


def build_model(config: ExperimentConfig, sample_shape, rng: Rng) -> Model:
    bb = config.backbone
    if bb.get("kind", "mlp") == "mlp":
        if len(sample_shape) != 1:
            raise ContractError(f"MLP backbone needs vector samples, got shape {sample_shape}")
        return build_mlp(sample_shape[0], bb.get("hidden", [64]), config.embedding_dim, config.dropout, rng)
    if bb["kind"] == "conv":
        if len(sample_shape) != 3:
            raise ContractError(f"conv backbone needs H x W x C samples, got shape {sample_shape}")
        return build_convnet(sample_shape, bb.get("channels", [8, 16]), config.embedding_dim,
                             config.dropout, bb.get("kernel_size", 3), rng)
    raise ContractError(f"unknown backbone kind {bb['kind']!r}")


class Trainer:
    """Owns a model, its class-weight head and the Adam state for one run."""

    def __init__(self, config: ExperimentConfig, n_classes: int, sample_shape):
        self.config = config
        self.loss = config.loss_config()
        self.rng = Rng(config.seed)
        self.model = build_model(config, sample_shape, self.rng.child(_INIT))
        self.head = None
        if self.loss.uses_class_weights:
            self.head = init_class_weights(self.rng.child(_HEAD), config.embedding_dim, n_classes)
        self.adam = AdamState()

    def parameters(self) -> dict[str, np.ndarray]:
        params = {name: layer.params[key] for name, layer, key in self.model.named_parameters()}
        if self.head is not None:
            params["head.W"] = self.head
        return params

    def step(self, x, y, lr) -> float:
        emb = self.model.forward(x, training=True)
        loss, gx, gW = compute_loss(self.loss, emb, y, self.head)
        if not np.isfinite(loss):
            raise NumericalError("non-finite loss")
        self.model.backward(gx)
        grads = {name: layer.grads[key] for name, layer, key in self.model.named_parameters()}
        if gW is not None:
            grads["head.W"] = gW
        adam_step(self.adam, self.parameters(), grads, lr)
        return loss


def batches_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def train(config: ExperimentConfig, train_set: Dataset | None = None):
    """Returns (model, RunRecord, head weights). Metrics are left empty; see ``run``."""
    if train_set is None:
        train_set, _ = prepare_data(config)
    if len(train_set) < 2:
        raise ContractError("training needs at least two samples")
    started = time.perf_counter()
    trainer = Trainer(config, train_set.n_classes, train_set.x.shape[1:])
    schedule = config.schedule()
    shuffle_rng = trainer.rng.child(_SHUFFLE)
    aug_rng = trainer.rng.child(_AUGMENT)
    aug_cfg = config.augment_config()
    record = RunRecord(config=config.to_dict(), seed=config.seed)
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = learning_rate_at(schedule, epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            x = train_set.x[idx]
            if train_set.is_image:
                x = np.stack([augment_sample(img, aug_cfg, aug_rng) for img in x])
            try:
                losses.append(trainer.step(x, train_set.labels[idx], lr))
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from None
        record.loss_history.append(float(np.mean(losses)))
        record.lr_history.append(lr)
        if epoch % 25 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d lr %.1e loss %.6f", epoch, lr, record.loss_history[-1])
    record.adam_steps = trainer.adam.t
    record.wall_clock = time.perf_counter() - started
    return trainer.model, record, trainer.head


def extract_embeddings(model: Model, dataset: Dataset, normalized: bool = True) -> EmbeddingBatch:
    batch = EmbeddingBatch(model.embed(dataset.x), dataset.labels)
    return l2_normalize(batch) if normalized else batch


def evaluate(model: Model, train_set: Dataset, test_set: Dataset, k: int = 1,
             sweep: int | None = None, metric: str = "euclidean") -> Evaluation:
    """k-NN on normalized post-batch-norm embeddings; full metric suite plus separation stats."""
    ref = extract_embeddings(model, train_set)
    queries = extract_embeddings(model, test_set)
    n = max(train_set.n_classes, test_set.n_classes)
    index = KnnIndex(ref, n_classes=n)
    preds = knn_classify(index, queries, k, metric=metric)
    scores = class_scores(index, queries)
    report = full_report(test_set.labels, preds, scores, n)
    sep = separation_stats(queries).to_dict()
    best_k = curve = None
    if sweep:
        best_k, curve = knn_sweep(index, queries, min(sweep, len(index)), metric=metric)
    return Evaluation(report, sep, preds, scores, ref, queries, best_k, curve)


def run(config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None):
    """Train then evaluate; returns (model, RunRecord) with metrics filled in."""
    train_set, test_set = data if data is not None else prepare_data(config)
    model, record, _ = train(config, train_set)
    ev = evaluate(model, train_set, test_set, config.k, sweep=config.k_max)
    record.metrics = ev.report
    record.separation = ev.separation
    record.best_k, record.knn_curve = ev.best_k, ev.knn_curve
    return model, record


def table_row(label: str, record: RunRecord) -> dict:
    r = record.metrics
    return {
        "name": label,
        "accuracy": r.per_class_accuracy,
        "average_accuracy": r.average_accuracy,
        "f1": r.f1,
        "macro_f1": r.macro_f1,
        "micro_f1": r.micro_f1,
        "mcc": r.mcc,
        "per_class_mcc": r.per_class_mcc,
        "auc": r.per_class_auc,
        "average_auc": r.average_auc,
        "separation": record.separation,
        "final_loss": record.loss_history[-1] if record.loss_history else None,
        "best_k": record.best_k,
    }


def ablate_margin(config: ExperimentConfig, margins=(4, 5, 6)) -> dict:
    """One sphereface run per margin, same seed and data split."""
    margins = list(margins)
    if not margins or any(int(m) != m or m < 1 for m in margins):
        raise ContractError("margins must be a non-empty list of integers >= 1")
    data = prepare_data(config)
    rows = []
    for m in margins:
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "loss": "sphereface", "m": int(m)})
        _, record = run(cfg, data)
        rows.append(table_row(f"m={m}", record))
    return {"table": "margin_ablation", "seed": config.seed, "class_names": data[1].class_names, "rows": rows}


def compare_losses(config: ExperimentConfig,
                   losses=("softmax", "modified-softmax", "triplet", "sphereface")) -> dict:
    """One run per loss from scratch, shared seed, backbone and split."""
    losses = list(losses)
    if not losses:
        raise ContractError("loss set is empty")
    data = prepare_data(config)
    rows = []
    for kind in losses:
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "loss": kind})
        _, record = run(cfg, data)
        rows.append(table_row(kind, record))
    return {"table": "loss_comparison", "seed": config.seed, "class_names": data[1].class_names, "rows": rows}


def dumps_report(obj) -> str:
    """Deterministic JSON text for reports (sorted keys, repr floats)."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def metrics_document(report: MetricsReport, class_names: list[str]) -> dict:
    """Per-class accuracy and F1, macro/micro F1, MCC and AUC keyed by class name."""
    return {
        "classes": class_names,
        "accuracy": dict(zip(class_names, report.per_class_accuracy)),
        "average_accuracy": report.average_accuracy,
        "precision": dict(zip(class_names, report.precision)),
        "recall": dict(zip(class_names, report.recall)),
        "f1": dict(zip(class_names, report.f1)),
        "macro_f1": report.macro_f1,
        "micro_f1": report.micro_f1,
        "mcc": report.mcc,
        "per_class_mcc": dict(zip(class_names, report.per_class_mcc)),
        "auc": dict(zip(class_names, report.per_class_auc)),
        "average_auc": report.average_auc,
        "confusion_matrix": report.confusion,
    }


def write_loss_history(record: RunRecord, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,lr\n")
        for e, (loss, lr) in enumerate(zip(record.loss_history, record.lr_history)):
            fh.write(f"{e},{loss!r},{lr!r}\n")


def export_embeddings(model: Model, dataset: Dataset, path, normalized: bool = True) -> None:
    """CSV: a ``# normalized=...`` header line, a column header, then label and values per row."""
    batch = extract_embeddings(model, dataset, normalized)
    write_embeddings(batch, path, model.embedding_dim)


def write_embeddings(batch: EmbeddingBatch, path, dim: int | None = None) -> None:
    dim = batch.vectors.shape[1] if dim is None else dim
    with open(path, "w") as fh:
        fh.write(f"# normalized={str(batch.normalized).lower()} dim={dim}\n")
        fh.write(",".join(["label"] + [f"e{i}" for i in range(dim)]) + "\n")
        for label, vec in zip(batch.labels, batch.vectors):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in vec]) + "\n")


def read_embeddings(path) -> EmbeddingBatch:
    with open(path) as fh:
        meta = fh.readline()
        if not meta.startswith("# normalized="):
            raise ContractError(f"{path}: missing embedding header line")
        normalized = meta.split("normalized=")[1].split()[0] == "true"
        dim = int(meta.split("dim=")[1])
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    labels = np.array([int(r[0]) for r in rows], dtype=int)
    vectors = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), dim)
    return EmbeddingBatch(vectors, labels, normalized=normalized)


def save_run(record: RunRecord, directory, class_names) -> None:
    os.makedirs(directory, exist_ok=True)
    write_loss_history(record, os.path.join(directory, "loss_history.csv"))
    doc = {"config": record.config, "seed": record.seed, "adam_steps": record.adam_steps,
           "wall_clock_seconds": record.wall_clock, "separation": record.separation,
           "best_k": record.best_k, "knn_curve": record.knn_curve}
    if record.metrics is not None:
        doc["metrics"] = metrics_document(record.metrics, class_names)
    with open(os.path.join(directory, "run.json"), "w") as fh:
        fh.write(dumps_report(doc))
