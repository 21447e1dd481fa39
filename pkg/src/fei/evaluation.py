"""Downstream evaluation: linear probe, fine-tuning, metrics and embedding export."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fei import signal
from fei.data import Dataset
from fei.errors import ConfigError, InvalidInputError
from fei.model import FeiModel

logger = logging.getLogger(__name__)

MODES = ("linear", "finetune")
ITER_UNITS = ("epoch", "step")

METRICS_SCHEMA = {
    "type": "object",
    "required": ["task", "n_samples"],
    "properties": {
        "task": {"enum": ["classification", "regression"]},
        "n_samples": {"type": "integer", "minimum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "mse": {"type": "number", "minimum": 0},
        "mae": {"type": "number", "minimum": 0},
    },
    "allOf": [
        {
            "if": {"properties": {"task": {"const": "classification"}}},
            "then": {"required": ["accuracy", "precision", "recall", "f1"]},
            "else": {"required": ["mse", "mae"]},
        }
    ],
}


@dataclass
class EvalConfig:
    mode: str = "linear"
    max_iters: Optional[int] = None
    lr: Optional[float] = None
    batch: int = 64
    seed: int = 0
    early_stop_on_val: bool = True
    iter_unit: str = "epoch"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown eval mode {self.mode!r}; expected one of {MODES}")
        if self.iter_unit not in ITER_UNITS:
            raise ConfigError(f"unknown iteration unit {self.iter_unit!r}; expected one of {ITER_UNITS}")
        if self.max_iters is None:
            self.max_iters = 300 if self.mode == "linear" else 100
        if self.lr is None:
            self.lr = 1e-4 if self.mode == "linear" else 1e-5
        if self.max_iters < 1 or self.lr <= 0 or self.batch < 1:
            raise ConfigError("max_iters and batch must be >= 1 and lr positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    mse: Optional[float] = None
    mae: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def compute_classification_metrics(preds, labels, num_classes: int) -> MetricsReport:
    """Accuracy plus macro-averaged precision, recall and F1 (0/0 counts as 0)."""
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if len(preds) == 0:
        raise InvalidInputError("cannot compute metrics on empty predictions")
    if len(preds) != len(labels):
        raise InvalidInputError(f"{len(preds)} predictions for {len(labels)} labels")
    for arr in (preds, labels):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise InvalidInputError(f"class indices must lie in [0, {num_classes})")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(
        "classification", len(labels),
        accuracy=float(tp.sum() / len(labels)),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
    )


def compute_regression_metrics(preds, targets) -> MetricsReport:
    preds, targets = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if len(preds) == 0:
        raise InvalidInputError("cannot compute metrics on empty predictions")
    if preds.shape != targets.shape:
        raise InvalidInputError(f"prediction shape {preds.shape} does not match target shape {targets.shape}")
    err = preds - targets
    return MetricsReport("regression", len(targets), mse=float(np.mean(err ** 2)), mae=float(np.mean(np.abs(err))))


def _check_compatible(model: FeiModel, *datasets: Dataset) -> None:
    cfg = model.cfg
    for ds in datasets:
        if ds is None:
            continue
        if (ds.channels, ds.length) != (cfg.in_channels, cfg.length):
            raise InvalidInputError(
                f"dataset {ds.name!r} has shape (C={ds.channels}, L={ds.length}) but the encoder expects "
                f"(C={cfg.in_channels}, L={cfg.length})"
            )
        if ds.labels is None:
            raise ConfigError(f"dataset {ds.name!r} has no labels to evaluate against")


def _task_loss(task: str, out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if task == "classification":
        return F.cross_entropy(out, y)
    return F.mse_loss(out.squeeze(-1), y)


def _targets(ds: Dataset, dtype) -> torch.Tensor:
    if ds.task == "classification":
        return torch.as_tensor(ds.labels, dtype=torch.long)
    return torch.as_tensor(ds.labels, dtype=dtype)


def _report(task: str, out: torch.Tensor, ds: Dataset) -> MetricsReport:
    if task == "classification":
        return compute_classification_metrics(out.argmax(dim=-1).numpy(), ds.labels, ds.num_classes)
    return compute_regression_metrics(out.squeeze(-1).numpy(), ds.labels)


@torch.no_grad()
def encode_dataset(model: FeiModel, values: np.ndarray, batch: int = 512, encoder: Optional[nn.Module] = None) -> torch.Tensor:
    """Frozen ``d``-dim encoder outputs, batch-norm layers in inference mode."""
    enc = encoder if encoder is not None else model.encoder
    was_training = enc.training
    enc.eval()
    dtype = next(enc.parameters()).dtype
    try:
        parts = [enc(torch.as_tensor(values[i:i + batch], dtype=dtype)) for i in range(0, len(values), batch)]
    finally:
        enc.train(was_training)
    return torch.cat(parts)


@dataclass
class EvalResult:
    report: MetricsReport
    val_losses: list
    best_iter: int
    steps: int
    encoder: Optional[nn.Module] = None
    head: Optional[nn.Module] = None


def _num_outputs(ds: Dataset) -> int:
    return ds.num_classes if ds.task == "classification" else 1


def select_best(val_losses: Sequence[float]) -> int:
    """Index of the lowest validation loss; ties go to the earliest."""
    return int(np.argmin(np.asarray(val_losses)))


def _fit(trainable: list, forward, train: Dataset, train_x, val: Optional[Dataset], val_x,
         cfg: EvalConfig, snapshot, restore, set_train_mode) -> tuple[list, int, int]:
    """Shared minibatch loop; keeps the snapshot with the lowest validation loss."""
    task = train.task
    dtype = next(iter(trainable)).dtype
    y_train = _targets(train, dtype)
    y_val = _targets(val, dtype) if val is not None else None
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    use_val = val is not None and cfg.early_stop_on_val

    val_losses, snaps, steps = [], [], 0

    def checkpoint():
        if not use_val:
            return
        set_train_mode(False)
        with torch.no_grad():
            val_losses.append(_task_loss(task, forward(val_x), y_val).item())
        snaps.append(snapshot())

    epochs, done = 0, False
    while not done:
        set_train_mode(True)
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch):
            idx = torch.as_tensor(order[start:start + cfg.batch])
            loss = _task_loss(task, forward(train_x[idx]), y_train[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps += 1
            if cfg.iter_unit == "step":
                checkpoint()
                if steps >= cfg.max_iters:
                    done = True
                    break
        epochs += 1
        if cfg.iter_unit == "epoch":
            checkpoint()
            done = epochs >= cfg.max_iters

    best = select_best(val_losses) if use_val else -1
    if use_val:
        restore(snaps[best])
    set_train_mode(False)
    return val_losses, best, steps


def linear_eval(model: FeiModel, train: Dataset, val: Optional[Dataset], test: Dataset,
                cfg: Optional[EvalConfig] = None) -> EvalResult:
    """Train an affine head on frozen encoder outputs; the encoder is never modified."""
    cfg = cfg or EvalConfig(mode="linear")
    _check_compatible(model, train, val, test)
    if train.task != test.task:
        raise ConfigError("train and test datasets have different tasks")
    feats = {name: encode_dataset(model, ds.values) if ds is not None else None
             for name, ds in (("train", train), ("val", val), ("test", test))}
    torch.manual_seed(cfg.seed)
    head = nn.Linear(model.cfg.d, _num_outputs(train)).to(feats["train"].dtype)

    val_losses, best, steps = _fit(
        list(head.parameters()), head, train, feats["train"], val, feats["val"], cfg,
        snapshot=lambda: copy.deepcopy(head.state_dict()),
        restore=head.load_state_dict,
        set_train_mode=lambda flag: None,
    )
    with torch.no_grad():
        report = _report(test.task, head(feats["test"]), test)
    return EvalResult(report, val_losses, best, steps, head=head)


def fine_tune(model: FeiModel, train: Dataset, val: Optional[Dataset], test: Dataset,
              cfg: Optional[EvalConfig] = None) -> EvalResult:
    """Train a copy of the encoder together with an affine head.

    The model passed in is left untouched; the tuned encoder is returned in the result.
    """
    cfg = cfg or EvalConfig(mode="finetune")
    _check_compatible(model, train, val, test)
    if train.task != test.task:
        raise ConfigError("train and test datasets have different tasks")
    encoder = copy.deepcopy(model.encoder)
    for p in encoder.parameters():
        p.requires_grad_(True)
    dtype = next(encoder.parameters()).dtype
    torch.manual_seed(cfg.seed)
    head = nn.Linear(model.cfg.d, _num_outputs(train)).to(dtype)
    net = nn.Sequential(encoder, head)

    as_t = lambda ds: torch.as_tensor(ds.values, dtype=dtype) if ds is not None else None  # noqa: E731
    val_losses, best, steps = _fit(
        list(net.parameters()), net, train, as_t(train), val, as_t(val), cfg,
        snapshot=lambda: copy.deepcopy(net.state_dict()),
        restore=net.load_state_dict,
        set_train_mode=net.train,
    )
    with torch.no_grad():
        out = torch.cat([net(as_t(test)[i:i + 512]) for i in range(0, len(test), 512)])
    return EvalResult(_report(test.task, out, test), val_losses, best, steps, encoder=encoder, head=head)


def evaluate(model: FeiModel, train: Dataset, val: Optional[Dataset], test: Dataset, cfg: EvalConfig) -> EvalResult:
    if cfg.mode == "linear":
        return linear_eval(model, train, val, test, cfg)
    return fine_tune(model, train, val, test, cfg)


# --- embedding export ---------------------------------------------------------------------------

ROLES = ("u", "u_target", "u_inferred")


@dataclass
class EmbeddingExport:
    rows: list            # (sample_id, mask_id, mask_ratio, role)
    vectors: np.ndarray   # one row per entry of ``rows``
    masks: np.ndarray     # (num_masks, mask_dim) bits
    projection: np.ndarray


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Project onto the two leading principal components (variance descending)."""
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the output is deterministic
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    proj = x @ (comps * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


@torch.no_grad()
def export_embeddings(model: FeiModel, values: np.ndarray, masks: np.ndarray, strategy: str = "dfm",
                      use_momentum: bool = True) -> EmbeddingExport:
    """Original, true-target and inferred-target embeddings for every (sample, mask) pair."""
    values = np.asarray(values, dtype=np.float64)
    masks = np.atleast_2d(np.asarray(masks))
    if masks.shape[-1] != model.mask_encoder.num_components:
        raise InvalidInputError(
            f"masks have {masks.shape[-1]} components, model expects {model.mask_encoder.num_components}"
        )
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(values, dtype=dtype)
    u = model.online(x)
    m = model.mask_encoder(torch.as_tensor(masks, dtype=dtype))
    ratios = masks.sum(axis=1) / masks.shape[1]

    rows, vecs = [], []
    for i in range(len(values)):
        rows.append((i, -1, 0.0, "u"))
        vecs.append(u[i])
        xi = np.repeat(values[i:i + 1], len(masks), axis=0)
        xt = torch.as_tensor(signal.apply_mask(strategy, xi, masks), dtype=dtype)
        ut = model.target(xt, use_momentum=use_momentum)
        uh = model.predictor_target(u[i:i + 1] + m)
        for j in range(len(masks)):
            rows.append((i, j, float(ratios[j]), "u_target"))
            vecs.append(ut[j])
            rows.append((i, j, float(ratios[j]), "u_inferred"))
            vecs.append(uh[j])
    vectors = torch.stack(vecs).double().numpy()
    return EmbeddingExport(rows, vectors, masks, pca_2d(vectors))


def write_embedding_csv(export: EmbeddingExport, path, projection: bool = False) -> None:
    vals = export.projection if projection else export.vectors
    prefix = "pc" if projection else "v"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "mask_id", "mask_ratio", "role", *(f"{prefix}{k}" for k in range(vals.shape[1]))])
        for (sid, mid, ratio, role), v in zip(export.rows, vals):
            w.writerow([sid, mid, repr(ratio), role, *(repr(float(a)) for a in v)])


def write_mask_csv(export: EmbeddingExport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mask_id", "k", "mask_ratio", "bits"])
        for j, bits in enumerate(export.masks):
            w.writerow([j, int(bits.sum()), repr(float(bits.sum() / len(bits))), "".join(str(int(b)) for b in bits)])


def read_embedding_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows, vecs = [], []
        for rec in r:
            rows.append((int(rec[0]), int(rec[1]), float(rec[2]), rec[3]))
            vecs.append([float(a) for a in rec[4:]])
    return rows, np.asarray(vecs)


def mask_distance_pairs(rows: Sequence[tuple], vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mask_id, mask_ratio, ||u - u_target||)`` for every target row of an export."""
    anchors = {sid: vectors[k] for k, (sid, _, _, role) in enumerate(rows) if role == "u"}
    ids, ratios, dists = [], [], []
    for k, (sid, mid, ratio, role) in enumerate(rows):
        if role == "u_target":
            ids.append(mid)
            ratios.append(ratio)
            dists.append(float(np.linalg.norm(vectors[k] - anchors[sid])))
    return np.asarray(ids), np.asarray(ratios), np.asarray(dists)


def ratio_distance_spearman(rows: Sequence[tuple], vectors: np.ndarray) -> float:
    """Rank correlation between mask ratio and the mean distance it induces across samples."""
    from scipy.stats import spearmanr

    ids, ratios, dists = mask_distance_pairs(rows, vectors)
    uniq = np.unique(ids)
    mean_ratio = np.array([ratios[ids == j][0] for j in uniq])
    mean_dist = np.array([dists[ids == j].mean() for j in uniq])
    return float(spearmanr(mean_ratio, mean_dist).statistic)
