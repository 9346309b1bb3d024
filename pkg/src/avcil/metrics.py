"""Evaluation: per-task accuracy bookkeeping, forgetting, and the two predictors.

Accuracies are sample-weighted percentages. The accuracy matrix is lower
triangular: row t holds the accuracy on each task seen so far, measured
after training step t; the diagonal is a task right after it was learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as mdl
from .errors import ContractError
from .objectives import TaskLayout

EVAL_CHUNK = 256


@dataclass
class AccuracyMatrix:
    """`per_task[t, i]` = accuracy on task i after step t (NaN above diagonal);
    `overall[t]` = accuracy over all seen test samples after step t."""

    per_task: np.ndarray
    overall: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], overall: Sequence[float]) -> "AccuracyMatrix":
        t = len(rows)
        if len(overall) != t or any(len(row) != i + 1 for i, row in enumerate(rows)):
            raise ContractError("accuracy rows must form a lower triangle with one overall per step")
        per_task = np.full((t, t), np.nan)
        for i, row in enumerate(rows):
            per_task[i, : i + 1] = row
        return cls(per_task=per_task, overall=np.asarray(overall, dtype=np.float64))

    @property
    def steps(self) -> int:
        return len(self.overall)


def mean_accuracy(values) -> float:
    """Mean of the per-step all-seen accuracies. Accepts a matrix or the raw list."""
    overall = values.overall if isinstance(values, AccuracyMatrix) else np.asarray(values, dtype=np.float64)
    if len(overall) == 0:
        raise ContractError("mean accuracy of an empty run")
    return float(np.mean(overall))


def average_forgetting(matrix: AccuracyMatrix) -> float | None:
    """Mean over steps 2..T of the mean peak-to-current accuracy drop on past tasks.

    None for a single-step run, where forgetting is undefined.
    """
    t_total = matrix.steps
    if t_total < 2:
        return None
    per_step = []
    for t in range(1, t_total):
        drops = [np.max(matrix.per_task[i:t, i]) - matrix.per_task[t, i] for i in range(t)]
        per_step.append(float(np.mean(drops)))
    return float(np.mean(per_step))


def _predict_head(params: mdl.ModelParams, samples: Sequence, modality: str) -> np.ndarray:
    preds = np.empty(len(samples), dtype=np.int64)
    for lo in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[lo:lo + EVAL_CHUNK]
        logits = mdl.forward(params, chunk, modality).logits.data
        preds[lo:lo + len(chunk)] = np.argmax(logits, axis=1)  # ties -> lowest index
    return preds


def _fused_features(params: mdl.ModelParams, samples: Sequence, modality: str) -> np.ndarray:
    rows = []
    for lo in range(0, len(samples), EVAL_CHUNK):
        rows.append(mdl.forward(params, samples[lo:lo + EVAL_CHUNK], modality).fused.data)
    return np.concatenate(rows, axis=0)


def nme_classify(params: mdl.ModelParams, exemplars: Sequence, exemplar_labels,
                 queries: Sequence, num_classes: int,
                 modality: str = "audiovisual") -> np.ndarray:
    """Nearest class mean in the normalized fused space, Euclidean distance.

    Class means come from the exemplars; every class below `num_classes`
    needs at least one. Distance ties resolve to the lowest class index.
    """
    labels = np.asarray(exemplar_labels, dtype=np.int64)
    if len(exemplars) != labels.size:
        raise ContractError("one label per exemplar required")
    frozen = mdl.snapshot(params)
    feats = _fused_features(frozen, exemplars, modality)
    means = np.empty((num_classes, feats.shape[1]))
    for c in range(num_classes):
        rows = feats[labels == c]
        if rows.size == 0:
            raise ContractError(f"class {c} has no exemplar for nearest-mean evaluation")
        means[c] = rows.mean(axis=0)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError("a class mean has zero norm")
    means /= norms
    q = _fused_features(frozen, queries, modality)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(qn == 0.0):
        raise ContractError("a query feature has zero norm")
    q /= qn
    dists = np.linalg.norm(q[:, None, :] - means[None, :, :], axis=2)
    return np.argmin(dists, axis=1)  # ties -> lowest index


def evaluate(params: mdl.ModelParams, samples: Sequence, labels, layout: TaskLayout,
             modality: str = "audiovisual",
             nme_exemplars: tuple[Sequence, Sequence] | None = None
             ) -> tuple[float, list[float]]:
    """Accuracy over `samples` overall and broken down by task.

    Labels are model class indices. With `nme_exemplars=(samples, labels)`
    predictions come from nearest class means instead of the linear head.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(samples) == 0:
        raise ContractError("evaluate needs at least one sample")
    if labels.shape != (len(samples),):
        raise ContractError("one label per evaluated sample required")
    if labels.min() < 0 or labels.max() >= layout.total_classes:
        raise ContractError("an evaluation label falls outside the layout")
    frozen = mdl.snapshot(params)
    if nme_exemplars is None:
        preds = _predict_head(frozen, samples, modality)
    else:
        ex_samples, ex_labels = nme_exemplars
        preds = nme_classify(frozen, ex_samples, ex_labels, samples,
                             layout.total_classes, modality)
    correct = preds == labels
    tasks = np.array([layout.task_of(int(y)) for y in labels])
    per_task = []
    for t in range(layout.step):
        hits = correct[tasks == t]
        if hits.size == 0:
            raise ContractError(f"no test samples for task {t}")
        per_task.append(100.0 * float(np.mean(hits)))
    return 100.0 * float(np.mean(correct)), per_task
