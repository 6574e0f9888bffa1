"""Accuracy-family metrics, the proxy domain divergence and feature export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .data import eval_batches
from .errors import InsufficientSamplesError, ShapeError


@dataclass
class EvaluationRecord:
    n: int
    accuracy: float
    balanced_accuracy: float
    macro_f1: float


@dataclass
class ADistanceEstimate:
    """2 * (1 - 2 * err) of a linear probe separating the two feature sets."""

    value: float
    probe_error: float
    probe: str
    seed: int


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"label vectors differ in shape: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise InsufficientSamplesError("accuracy needs at least one sample")
    return float(np.mean(y_true == y_pred))


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in y_true."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise InsufficientSamplesError("balanced_accuracy needs at least one sample")
    recalls = []
    for cls in np.unique(y_true):
        mask = y_true == cls
        recalls.append(float(np.mean(y_pred[mask] == cls)))
    return float(np.mean(recalls))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean F1 over classes appearing in y_true or y_pred.

    Per-class 0/0 (nothing predicted, precision and recall both undefined or
    zero) counts as F1 = 0 rather than being dropped.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise InsufficientSamplesError("macro_f1 needs at least one sample")
    scores = []
    for cls in np.unique(np.concatenate([y_true, y_pred])):
        tp = float(np.sum((y_pred == cls) & (y_true == cls)))
        fp = float(np.sum((y_pred == cls) & (y_true != cls)))
        fn = float(np.sum((y_pred != cls) & (y_true == cls)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        scores.append(f1)
    return float(np.mean(scores))


def evaluation_record(y_true, y_pred) -> EvaluationRecord:
    return EvaluationRecord(
        n=int(np.asarray(y_true).size),
        accuracy=accuracy(y_true, y_pred),
        balanced_accuracy=balanced_accuracy(y_true, y_pred),
        macro_f1=macro_f1(y_true, y_pred),
    )


def a_distance(fs, ft, seed: int = 0, max_iter: int = 2000) -> ADistanceEstimate:
    """Proxy divergence from the held-out error of a source/target probe.

    Rows of the two feature matrices get domain labels (source 1, target 0),
    a stratified 50/50 split feeds an L2-regularized logistic probe, and the
    held-out error (clamped to [0, 0.5]) maps to 2 * (1 - 2 * err).
    """
    fs = np.asarray(fs, dtype=np.float64)
    ft = np.asarray(ft, dtype=np.float64)
    if fs.shape[0] < 20 or ft.shape[0] < 20:
        raise InsufficientSamplesError(
            f"a_distance needs >= 20 samples per domain, got {fs.shape[0]}/{ft.shape[0]}"
        )
    if fs.shape[1] != ft.shape[1]:
        raise ShapeError(f"feature dims differ: {fs.shape[1]} vs {ft.shape[1]}")
    x = np.vstack([fs, ft])
    y = np.concatenate([np.ones(fs.shape[0]), np.zeros(ft.shape[0])])
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, test_size=0.5, stratify=y, random_state=seed
    )
    probe = LogisticRegression(C=1.0, max_iter=max_iter)
    probe.fit(x_train, y_train)
    err = float(np.clip(1.0 - probe.score(x_test, y_test), 0.0, 0.5))
    return ADistanceEstimate(
        value=2.0 * (1.0 - 2.0 * err),
        probe_error=err,
        probe=f"logistic(C=1.0,max_iter={max_iter})",
        seed=seed,
    )


FEATURE_DUMP_DOMAIN = {"source": 1, "target": 0}


def export_features(model, datasets: dict, path, batch_size: int = 256) -> Path:
    """Dump bottleneck features of the given datasets to a text table.

    ``datasets`` maps domain name ('source'/'target') to a dataset. One row
    per sample: d feature columns, then label and domain tag; values are
    written with 9 significant digits, which round-trips float32 exactly.
    """
    import torch

    path = Path(path)
    rows = []
    dim = None
    model.eval()
    with torch.no_grad():
        for domain, dataset in datasets.items():
            tag = FEATURE_DUMP_DOMAIN.get(domain)
            if tag is None:
                raise ShapeError(f"unknown domain tag {domain!r}")
            for xb, yb in eval_batches(dataset, batch_size):
                feats, _ = model(xb)
                feats = feats.cpu().numpy()
                dim = feats.shape[1]
                for row, label in zip(feats, yb.numpy()):
                    rows.append((row, int(label), tag))
    header = " ".join([f"f{i}" for i in range(dim)] + ["label", "domain"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row, label, tag in rows:
            fh.write(" ".join(f"{v:.9g}" for v in row) + f" {label} {tag}\n")
    return path


def read_feature_dump(path):
    """Inverse of :func:`export_features` -> (features, labels, domains)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        dim = len(header) - 2
        feats, labels, domains = [], [], []
        for line in fh:
            parts = line.split()
            feats.append([float(v) for v in parts[:dim]])
            labels.append(int(parts[dim]))
            domains.append(int(parts[dim + 1]))
    return (np.asarray(feats, dtype=np.float32),
            np.asarray(labels, dtype=np.int64),
            np.asarray(domains, dtype=np.int64))


def predict_dataset(model, dataset, batch_size: int = 256):
    """Eval-mode predictions -> (y_true, y_pred, features)."""
    import torch

    model.eval()
    trues, preds, feats = [], [], []
    with torch.no_grad():
        for xb, yb in eval_batches(dataset, batch_size):
            f, logits = model(xb)
            preds.append(logits.argmax(dim=1).numpy())
            trues.append(yb.numpy())
            feats.append(f.numpy())
    return (np.concatenate(trues), np.concatenate(preds),
            np.concatenate(feats))
