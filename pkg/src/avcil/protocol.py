"""Class-incremental training protocol.

Owns everything that makes an incremental run a *run*: the task sequence,
the label map, classifier growth, the teacher snapshot, the replay memory,
per-step optimizer state, and the evaluation loop that fills the accuracy
matrix. All randomness flows through purpose-keyed child seeds of the run
seed, so two runs with the same config are bit-identical and strategies
that ignore a random stream cannot perturb the streams used by others.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffmath as dm
from . import model as mdl
from .baselines import Strategy, get_strategy
from .datasets import FeatureDataset, FeatureSample
from .errors import ConfigError, ContractError, TrainingDiverged
from .metrics import AccuracyMatrix, evaluate
from .objectives import LossWeights, TaskLayout

logger = logging.getLogger("avcil.protocol")

# purpose codes for child-seed derivation; never reuse across call sites
_P_INIT = 101
_P_EXPAND = 102
_P_SHUFFLE = 103
_P_MEMORY = 104
_P_REINIT = 105
_P_TASKS = 106


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _child_seed(seed: int, *key: int) -> int:
    """Integer seed for APIs that take one, derived from the same key space."""
    return int(np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# task sequence


@dataclass(frozen=True)
class TaskSequence:
    """Disjoint class groups, one per incremental step, in training order."""

    tasks: Tuple[Tuple[int, ...], ...]

    @property
    def steps(self) -> int:
        return len(self.tasks)

    def seen_classes(self, upto: int) -> Tuple[int, ...]:
        """All class ids in the first `upto` tasks, in arrival order."""
        out: List[int] = []
        for task in self.tasks[:upto]:
            out.extend(task)
        return tuple(out)


def build_task_sequence(class_ids: Sequence[int], steps: int,
                        classes_per_step: int, seed: int) -> TaskSequence:
    """Shuffle the classes with the run seed, then chunk into equal tasks.

    Classes beyond steps*classes_per_step are left out of the sequence.
    """
    ids = [int(c) for c in class_ids]
    if len(set(ids)) != len(ids):
        raise ContractError("class_ids contains duplicates")
    if steps < 1 or classes_per_step < 1:
        raise ContractError("steps and classes_per_step must be positive")
    need = steps * classes_per_step
    if need > len(ids):
        raise ContractError(
            f"need {need} classes for {steps} steps of {classes_per_step}, "
            f"got {len(ids)}")
    order = [ids[i] for i in _rng(seed, _P_TASKS).permutation(len(ids))]
    tasks = tuple(tuple(order[i * classes_per_step:(i + 1) * classes_per_step])
                  for i in range(steps))
    return TaskSequence(tasks)


def label_map_for(sequence: TaskSequence) -> Dict[int, int]:
    """Dataset class id -> model output index, in order of first appearance."""
    out: Dict[int, int] = {}
    for task in sequence.tasks:
        for c in task:
            out[c] = len(out)
    return out


# ---------------------------------------------------------------------------
# exemplar memory


@dataclass(frozen=True)
class ExemplarMemory:
    """Fixed-capacity replay store: class id -> tuple of sample ids."""

    capacity: int
    seed: int
    store: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(v) for v in self.store.values())

    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.store))

    def sample_ids(self) -> Tuple[int, ...]:
        """All stored ids, classes in sorted order."""
        out: List[int] = []
        for c in sorted(self.store):
            out.extend(self.store[c])
        return tuple(out)


def update_memory(memory: ExemplarMemory,
                  new_candidates: Dict[int, Sequence[int]]) -> ExemplarMemory:
    """Rebalance to an equal per-class quota after new classes arrive.

    The quota is floor(capacity / total classes stored). Old classes are cut
    down by uniform random choice without replacement; new classes are filled
    the same way from their candidate ids. A class with fewer candidates than
    the quota keeps what it has (with a warning) — capacity is an upper
    bound, not a promise.
    """
    for c in new_candidates:
        if c in memory.store:
            raise ContractError(f"class {c} is already stored; tasks must be disjoint")
    num_classes = len(memory.store) + len(new_candidates)
    if num_classes == 0:
        return memory
    quota = memory.capacity // num_classes
    rng = _rng(memory.seed, _P_MEMORY, num_classes)
    store: Dict[int, Tuple[int, ...]] = {}
    for c in sorted(memory.store):
        ids = memory.store[c]
        if len(ids) > quota:
            ids = tuple(int(i) for i in rng.choice(np.asarray(ids), size=quota,
                                                   replace=False))
        store[c] = tuple(ids)
    for c in sorted(new_candidates):
        ids = [int(i) for i in new_candidates[c]]
        if len(ids) < quota:
            logger.warning("class %d has %d candidates for a quota of %d; keeping all",
                           c, len(ids), quota)
            store[c] = tuple(ids)
        else:
            store[c] = tuple(int(i) for i in rng.choice(np.asarray(ids), size=quota,
                                                        replace=False))
    return ExemplarMemory(memory.capacity, memory.seed, store)


# ---------------------------------------------------------------------------
# configuration and run state


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "avcil"
    modality: str = "audiovisual"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    memory_capacity: int = 340
    seed: int = 0
    use_vad: bool = True
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr > 0.0):
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if self.memory_capacity < 0:
            raise ConfigError("memory_capacity must be >= 0")
        if self.modality not in mdl.MODALITIES:
            raise ConfigError(f"modality must be one of {mdl.MODALITIES}")


@dataclass
class StepState:
    """Everything carried from one incremental step to the next."""

    step: int                       # number of completed steps
    params: mdl.ModelParams
    memory: ExemplarMemory
    boundaries: Tuple[int, ...]     # class counts per completed task
    teacher: Optional[mdl.ModelParams] = None

    @property
    def layout(self) -> Optional[TaskLayout]:
        return TaskLayout(self.boundaries) if self.boundaries else None


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    params: mdl.ModelParams
    label_map: Dict[int, int]
    memory: ExemplarMemory
    loss_curves: List[List[float]]      # per step, per epoch mean loss
    events: List[dict]                  # run log, one dict per event


# ---------------------------------------------------------------------------
# one incremental step


def _index_samples(dataset: FeatureDataset) -> Dict[int, FeatureSample]:
    return {s.sample_id: s for s in dataset.samples}


def train_step(state: StepState, task_classes: Sequence[int],
               dataset: FeatureDataset, config: TrainConfig,
               strategy: Strategy, label_map: Dict[int, int],
               events: Optional[List[dict]] = None) -> Tuple[StepState, List[float]]:
    """Train on one task and return the advanced state plus the loss curve.

    Order of operations matters and is part of the contract: snapshot the
    teacher from the incoming parameters, then grow the classifier, then
    train with a fresh optimizer, then update the replay memory.
    """
    t = state.step + 1
    new_classes = [int(c) for c in task_classes]
    if events is not None:
        events.append({"event": "step_started", "step": t, "classes": new_classes})
    teacher = mdl.snapshot(state.params) if (strategy.uses_teacher and t > 1) else None

    params = state.params
    if t > 1:
        params = mdl.expand_classifier(params, len(new_classes),
                                       _child_seed(config.seed, _P_EXPAND, t))
    if strategy.retrains_on_all and t > 1:
        params = mdl.reinit_classifier(params, params.num_classes,
                                       _child_seed(config.seed, _P_REINIT, t))
    boundaries = state.boundaries + (len(new_classes),)
    layout = TaskLayout(boundaries)
    if layout.total_classes != params.num_classes:
        raise ContractError("classifier width does not match the task layout")

    by_id = _index_samples(dataset)
    pool: List[FeatureSample] = []
    is_exemplar: List[bool] = []
    if strategy.retrains_on_all:
        for c in label_map:
            if label_map[c] >= layout.total_classes:
                break
            for s in dataset.of_class(c, "train"):
                pool.append(s)
                is_exemplar.append(False)
    else:
        for c in new_classes:
            for s in dataset.of_class(c, "train"):
                pool.append(s)
                is_exemplar.append(False)
        for sid in state.memory.sample_ids():
            pool.append(by_id[sid])
            is_exemplar.append(True)
    if not pool:
        raise ContractError(f"no training samples for step {t}")
    labels = np.array([label_map[s.label] for s in pool], dtype=np.int64)
    exemplar = np.array(is_exemplar, dtype=bool)

    trainable = params.parameters()
    opt = dm.AdamState.for_params(trainable, lr=config.lr,
                                  weight_decay=config.weight_decay)
    curve: List[float] = []
    n = len(pool)
    for epoch in range(config.epochs):
        perm = _rng(config.seed, _P_SHUFFLE, t, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = [pool[i] for i in idx]
            batch_labels = labels[idx]
            mask = exemplar[idx] if config.use_vad else None
            trace = mdl.forward(params, batch, config.modality)
            teacher_trace = (mdl.forward(teacher, batch, config.modality)
                             if teacher is not None else None)
            loss = strategy.compose(trace, teacher_trace, batch_labels, mask,
                                    layout, config.weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(step=t, epoch=epoch,
                                       batch=start // config.batch_size, value=value)
            for p in trainable:
                p.grad = None
            dm.backward(loss)
            dm.adam_step(trainable, opt)
            total += value * len(batch)
        curve.append(total / n)
        if events is not None:
            events.append({"event": "epoch_loss", "step": t, "epoch": epoch,
                           "loss": curve[-1]})

    memory = state.memory
    if strategy.uses_memory:
        candidates = {c: [s.sample_id for s in dataset.of_class(c, "train")]
                      for c in new_classes}
        memory = update_memory(memory, candidates)
        if events is not None:
            events.append({"event": "memory_updated", "step": t,
                           "memory_size": memory.total(),
                           "classes_stored": len(memory.store)})
    return StepState(step=t, params=params, memory=memory,
                     boundaries=boundaries, teacher=teacher), curve


# ---------------------------------------------------------------------------
# full run


def run_incremental(dataset: FeatureDataset, sequence: TaskSequence,
                    config: TrainConfig,
                    events: Optional[List[dict]] = None) -> RunResult:
    """Run every step of the sequence, evaluating after each one.

    Pass `events` to watch the run log grow in place — on divergence the
    caller still holds everything logged up to the failing batch.
    """
    dataset.validate()
    strategy = get_strategy(config.strategy)
    if strategy.uses_memory and config.memory_capacity < 1:
        raise ConfigError(
            f"strategy {strategy.tag!r} replays from memory; memory_capacity "
            "must be >= 1")
    label_map = label_map_for(sequence)
    for c in label_map:
        if not dataset.of_class(c, "train") or not dataset.of_class(c, "test"):
            raise ConfigError(f"class {c} lacks train or test samples")

    if events is None:
        events = []
    events.append({"event": "run_started", "strategy": strategy.tag,
                   "modality": config.modality, "seed": config.seed,
                   "steps": sequence.steps,
                   "classes": [list(t) for t in sequence.tasks]})
    params = mdl.init_params(dataset.d, len(sequence.tasks[0]),
                             _child_seed(config.seed, _P_INIT))
    state = StepState(step=0, params=params,
                      memory=ExemplarMemory(config.memory_capacity, config.seed),
                      boundaries=())
    by_id = _index_samples(dataset)
    rows: List[List[float]] = []
    overalls: List[float] = []
    curves: List[List[float]] = []
    for t, task in enumerate(sequence.tasks, 1):
        t0 = time.perf_counter()
        state, curve = train_step(state, task, dataset, config, strategy,
                                  label_map, events)
        curves.append(curve)

        test_samples: List[FeatureSample] = []
        test_labels: List[int] = []
        for c in sequence.seen_classes(t):
            for s in dataset.of_class(c, "test"):
                test_samples.append(s)
                test_labels.append(label_map[c])
        nme = None
        if strategy.nme_eval:
            ex_samples = [by_id[sid] for sid in state.memory.sample_ids()]
            ex_labels = np.array([label_map[s.label] for s in ex_samples],
                                 dtype=np.int64)
            nme = (ex_samples, ex_labels)
        overall, per_task = evaluate(state.params, test_samples,
                                     np.asarray(test_labels, dtype=np.int64),
                                     state.layout, config.modality, nme)
        rows.append(per_task)
        overalls.append(overall)
        events.append({"event": "step_evaluated", "step": t,
                       "overall_accuracy": overall, "per_task": per_task,
                       "memory_size": state.memory.total(),
                       "wall_time_s": time.perf_counter() - t0})
    matrix = AccuracyMatrix.from_rows(rows, overalls)
    return RunResult(matrix=matrix, params=state.params, label_map=label_map,
                     memory=state.memory, loss_curves=curves, events=events)
