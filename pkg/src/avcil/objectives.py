"""Training objectives: contrastive alignment, attention and logit distillation,
separated-softmax classification, and their weighted total.

All losses are scalar DiffTensors built from the primitives in `diffmath`, so
a single backward pass yields gradients through every active term. Terms with
a zero weight are skipped rather than multiplied by zero, which keeps a run
with disabled components bit-identical to one that never constructs them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import DiffTensor
from .errors import ContractError, NumericDomainError
from .model import AttentionMaps, ForwardTrace


@dataclass(frozen=True)
class LossWeights:
    """Loss hyperparameters. `normalize` L2-normalizes both feature sets
    before the contrastive similarity matrix."""

    lambda_i: float = 0.5
    lambda_c: float = 1.0
    lambda_vad: float = 0.5
    tau: float = 0.05
    normalize: bool = True

    def __post_init__(self):
        if self.lambda_i < 0.0 or self.lambda_c < 0.0:
            raise ContractError("contrastive weights must be non-negative")
        if not 0.0 <= self.lambda_vad <= 1.0:
            raise ContractError("lambda_vad must lie in [0, 1]")
        if self.tau <= 0.0:
            raise ContractError("tau must be positive")


@dataclass(frozen=True)
class TaskLayout:
    """Class-axis bookkeeping: `boundaries[i]` is the class count of task i.

    Classifier rows are grouped by task in arrival order, so the current
    step's classes occupy the last `new_count` columns.
    """

    boundaries: tuple[int, ...]

    def __post_init__(self):
        if len(self.boundaries) == 0 or any(b < 1 for b in self.boundaries):
            raise ContractError("layout needs one positive class count per task")
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))

    @property
    def step(self) -> int:
        return len(self.boundaries)

    @property
    def old_count(self) -> int:
        return sum(self.boundaries[:-1])

    @property
    def new_count(self) -> int:
        return self.boundaries[-1]

    @property
    def total_classes(self) -> int:
        return sum(self.boundaries)

    def block_bounds(self, task: int) -> tuple[int, int]:
        if not 0 <= task < self.step:
            raise ContractError(f"task {task} outside layout of {self.step} steps")
        lo = sum(self.boundaries[:task])
        return lo, lo + self.boundaries[task]

    def task_of(self, label: int) -> int:
        if not 0 <= label < self.total_classes:
            raise ContractError(f"label {label} outside layout")
        hi = 0
        for task, width in enumerate(self.boundaries):
            hi += width
            if label < hi:
                return task
        raise AssertionError


def l2_normalize_rows(x: DiffTensor) -> DiffTensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    if np.any(sq.data == 0.0):
        raise NumericDomainError("cannot L2-normalize a zero row")
    return x / dm.sqrt(sq)


def _similarity(f_audio: DiffTensor, f_visual: DiffTensor, tau: float,
                normalize: bool) -> DiffTensor:
    if f_audio.ndim != 2 or f_audio.shape != f_visual.shape:
        raise ContractError("contrastive losses need matching (N, d) feature batches")
    a = l2_normalize_rows(f_audio) if normalize else f_audio
    v = l2_normalize_rows(f_visual) if normalize else f_visual
    return (a @ v.t()) / tau


def i_avss(f_audio: DiffTensor, f_visual: DiffTensor, tau: float,
           normalize: bool = True) -> DiffTensor:
    """Instance-level cross-modal alignment.

    The i-th audio row should be most similar to the i-th attended-visual
    row: mean over i of -log softmax_j(s_ij) at j = i.
    """
    sim = _similarity(f_audio, f_visual, tau, normalize)
    n = sim.shape[0]
    logp = dm.log_softmax(sim, axis=1)
    picked = (logp * dm.constant(np.eye(n))).sum(axis=1)
    return -picked.mean()


def c_avss(f_audio: DiffTensor, f_visual: DiffTensor, labels, tau: float,
           normalize: bool = True) -> DiffTensor:
    """Class-level cross-modal alignment.

    All pairs sharing a label count as positives (self-pairs included); the
    positive mass is averaged, so a batch with every label equal scores
    exactly ln N, and all-distinct labels reduce to the instance loss.
    """
    sim = _similarity(f_audio, f_visual, tau, normalize)
    n = sim.shape[0]
    labels = _check_labels(labels, n)
    pos = (labels[:, None] == labels[None, :]).astype(np.float64)
    m = sim.data.max(axis=1, keepdims=True)
    e = dm.exp(sim - dm.constant(m))
    lse_all = dm.log(e.sum(axis=1)) + dm.constant(m.reshape(n))
    lse_pos = dm.log((e * dm.constant(pos)).sum(axis=1)) + dm.constant(m.reshape(n))
    counts = dm.constant(np.log(pos.sum(axis=1)))
    return ((lse_all - lse_pos) + counts).mean()


def d_avsc(f_audio: DiffTensor, f_visual: DiffTensor, labels,
           weights: LossWeights) -> DiffTensor:
    """Weighted sum of the instance and class alignment terms.

    Terms with zero weight are not constructed at all.
    """
    parts: list[DiffTensor] = []
    if weights.lambda_i != 0.0:
        parts.append(i_avss(f_audio, f_visual, weights.tau, weights.normalize) * weights.lambda_i)
    if weights.lambda_c != 0.0:
        parts.append(c_avss(f_audio, f_visual, labels, weights.tau, weights.normalize) * weights.lambda_c)
    return _chain_sum(parts)


def vad(current: AttentionMaps, teacher: AttentionMaps, exemplar_mask,
        lambda_vad: float) -> DiffTensor:
    """Visual attention distillation on replayed samples only.

    KL from the current model's attention to the frozen teacher's, spatial
    and temporal maps mixed by `lambda_vad`. An empty mask contributes an
    exact zero.
    """
    if not 0.0 <= lambda_vad <= 1.0:
        raise ContractError("lambda_vad must lie in [0, 1]")
    if current.spatial.shape != teacher.spatial.shape \
            or current.temporal.shape != teacher.temporal.shape:
        raise ContractError("attention map shapes differ between current and teacher")
    mask = np.asarray(exemplar_mask, dtype=bool)
    if mask.ndim != 1 or mask.size != current.spatial.shape[0]:
        raise ContractError("exemplar mask must have one flag per sample")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return dm.constant(0.0)
    dist_spa = dm.kl_rows(dm.take(current.spatial, idx), dm.take(teacher.spatial, idx), axis=2)
    dist_tem = dm.kl_rows(dm.take(current.temporal, idx), dm.take(teacher.temporal, idx), axis=1)
    return dist_spa * lambda_vad + dist_tem * (1.0 - lambda_vad)


def _picked_logprob_sum(logits: DiffTensor, targets: np.ndarray) -> DiffTensor:
    width = logits.shape[1]
    onehot = np.zeros(logits.shape)
    onehot[np.arange(targets.size), targets] = 1.0
    if width == 0:
        raise ContractError("cross-entropy over an empty class block")
    logp = dm.log_softmax(logits, axis=1)
    return (logp * dm.constant(onehot)).sum()


def cross_entropy(logits: DiffTensor, labels) -> DiffTensor:
    """Mean negative log-likelihood over the full class axis."""
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -_picked_logprob_sum(logits, labels) / float(labels.size)


def ss_ce(logits: DiffTensor, labels, layout: TaskLayout) -> DiffTensor:
    """Separated-softmax cross-entropy.

    New-class samples normalize only over the current task's columns; old
    ones only over all previous columns. At step 1 this is plain CE.
    """
    n = logits.shape[0]
    labels = _check_labels(labels, n, layout.total_classes)
    if logits.shape[1] != layout.total_classes:
        raise ContractError("logit width does not match the layout")
    old = layout.old_count
    new_rows = np.flatnonzero(labels >= old)
    old_rows = np.flatnonzero(labels < old)
    parts: list[DiffTensor] = []
    if new_rows.size:
        block = dm.slice_axis(dm.take(logits, new_rows), 1, old, layout.total_classes)
        parts.append(_picked_logprob_sum(block, labels[new_rows] - old))
    if old_rows.size:
        block = dm.slice_axis(dm.take(logits, old_rows), 1, 0, old)
        parts.append(_picked_logprob_sum(block, labels[old_rows]))
    return -_chain_sum(parts) / float(n)


def tkd(logits: DiffTensor, teacher_logits: DiffTensor, layout: TaskLayout) -> DiffTensor:
    """Task-wise knowledge distillation.

    Per previous task block, softmax both models within the block and take
    the batch-mean KL from current to teacher; blocks sum.
    """
    if layout.step < 2:
        raise ContractError("distillation needs at least one previous task")
    if teacher_logits.shape != (logits.shape[0], layout.old_count):
        raise ContractError("teacher logits must cover exactly the previous tasks")
    if logits.shape[1] != layout.total_classes:
        raise ContractError("logit width does not match the layout")
    parts: list[DiffTensor] = []
    for task in range(layout.step - 1):
        lo, hi = layout.block_bounds(task)
        cur = dm.softmax(dm.slice_axis(logits, 1, lo, hi), axis=1)
        tea = dm.softmax(dm.slice_axis(teacher_logits, 1, lo, hi), axis=1)
        parts.append(dm.kl_rows(cur, tea, axis=1))
    return _chain_sum(parts)


def total_loss(trace: ForwardTrace, teacher_trace: ForwardTrace | None, labels,
               exemplar_mask, layout: TaskLayout, weights: LossWeights) -> DiffTensor:
    """Classification plus the three regularizers, in a fixed order.

    `teacher_trace` must be present exactly when the layout has previous
    tasks. Passing `exemplar_mask=None` disables attention distillation
    outright (an all-False mask merely makes it zero). Contrastive terms
    need both modal features and apply at every step; distillation terms
    only from step 2.
    """
    if (layout.step > 1) != (teacher_trace is not None):
        raise ContractError("teacher trace must be present exactly for steps after the first")
    parts = [ss_ce(trace.logits, labels, layout)]
    if teacher_trace is not None:
        parts.append(tkd(trace.logits, teacher_trace.logits, layout))
    if trace.attended_visual is not None and trace.maps is not None \
            and (weights.lambda_i != 0.0 or weights.lambda_c != 0.0):
        parts.append(d_avsc(trace.audio, trace.attended_visual, labels, weights))
    if teacher_trace is not None and exemplar_mask is not None \
            and trace.maps is not None and teacher_trace.maps is not None:
        parts.append(vad(trace.maps, teacher_trace.maps, exemplar_mask, weights.lambda_vad))
    return _chain_sum(parts)


def _chain_sum(parts: list[DiffTensor]) -> DiffTensor:
    if not parts:
        return dm.constant(0.0)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.shape != (n,):
        raise ContractError(f"labels must be a length-{n} vector")
    if num_classes is not None and arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ContractError("a label falls outside the class range")
    return arr
