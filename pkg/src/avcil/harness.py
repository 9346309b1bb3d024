"""Experiment orchestration and persistence.

Everything the CLI does lives here as plain functions so tests can call it
in-process: config parsing, single runs fanned out over seeds, ablation
sweeps, comparison tables, attention-map export, and the self-check that
re-verifies every gradient. File outputs are canonical JSON (sorted keys,
minimal separators) written atomically, so a rerun with the same config is
byte-identical and a content hash is meaningful.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import diffmath as dm
from . import model as mdl
from . import objectives as obj
from .datasets import (FeatureDataset, GeneratorSpec, generate_synthetic,
                       load_dataset, save_dataset)
from .errors import (ConfigError, ContractError, TrainingDiverged,
                     VerificationFailure)
from .metrics import average_forgetting, mean_accuracy
from .objectives import LossWeights, TaskLayout
from .protocol import TrainConfig, build_task_sequence, run_incremental

FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "AVCIL_OUTPUT_ROOT"

MODALITY_SWEEP = ("audiovisual", "audio", "visual")
# component sweep: every on/off combination of the two contrastive terms and
# attention distillation, all-off first
COMPONENT_SWEEP = tuple((i, c, v) for i in (0, 1) for c in (0, 1) for v in (0, 1))


# ---------------------------------------------------------------------------
# canonical serialization


def canonical_json(obj_) -> str:
    return json.dumps(obj_, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(payload: dict) -> str:
    """Hash of the canonical form with the hash field itself left out."""
    stripped = {k: v for k, v in payload.items() if k != "content_hash"}
    return hashlib.sha256(canonical_json(stripped).encode()).hexdigest()


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["content_hash"] = content_hash(payload)
    write_atomic(path, (canonical_json(payload) + "\n").encode())


def write_run_log(path: Path, events: Sequence[dict]) -> None:
    lines = [canonical_json({"event": "log_opened", "format_version": FORMAT_VERSION})]
    lines.extend(canonical_json(e) for e in events)
    write_atomic(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# config parsing


@dataclass(frozen=True)
class RunConfig:
    name: str
    generator: Optional[GeneratorSpec]
    dataset_path: Optional[str]
    steps: int
    classes_per_step: int
    train: TrainConfig            # .seed is a placeholder; per-seed copies are made
    seeds: Tuple[int, ...]
    output_root: Optional[str] = None

    def train_for_seed(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=int(seed))


def _field(raw: dict, name: str, kind, default=...):
    if name not in raw:
        if default is ...:
            raise ConfigError(f"config field {name!r} is required")
        return default
    value = raw[name]
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"config field {name!r} must be {kind.__name__}, got bool")
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"config field {name!r} must be {kind.__name__}, "
                          f"got {type(value).__name__}")
    return value


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = _field(raw, "format_version", int)
    if version != FORMAT_VERSION:
        raise ConfigError(f"config field 'format_version' must be {FORMAT_VERSION}, got {version}")
    name = _field(raw, "name", str)
    if not name or any(c in name for c in "/\\"):
        raise ConfigError("config field 'name' must be a non-empty path-safe string")

    has_spec = "dataset" in raw
    has_path = "dataset_path" in raw
    if has_spec == has_path:
        raise ConfigError("config needs exactly one of 'dataset' (generator spec) "
                          "or 'dataset_path'")
    generator = None
    dataset_path = None
    if has_spec:
        spec_raw = _field(raw, "dataset", dict)
        try:
            generator = GeneratorSpec(**spec_raw)
        except (TypeError, ContractError) as err:
            raise ConfigError(f"config field 'dataset': {err}") from None
    else:
        dataset_path = _field(raw, "dataset_path", str)

    weights_raw = _field(raw, "weights", dict, default={})
    try:
        weights = LossWeights(**weights_raw)
    except (TypeError, ContractError) as err:
        raise ConfigError(f"config field 'weights': {err}") from None

    train = TrainConfig(
        strategy=_field(raw, "strategy", str, default="avcil"),
        modality=_field(raw, "modality", str, default="audiovisual"),
        epochs=_field(raw, "epochs", int, default=200),
        batch_size=_field(raw, "batch_size", int, default=32),
        lr=_field(raw, "lr", float, default=1e-3),
        weight_decay=_field(raw, "weight_decay", float, default=1e-4),
        memory_capacity=_field(raw, "memory_capacity", int, default=340),
        use_vad=_field(raw, "use_vad", bool, default=True),
        weights=weights,
        seed=0,
    )
    seeds_raw = _field(raw, "seeds", list, default=[0])
    if not seeds_raw or not all(isinstance(s, int) and not isinstance(s, bool)
                                for s in seeds_raw):
        raise ConfigError("config field 'seeds' must be a non-empty list of integers")
    if len(set(seeds_raw)) != len(seeds_raw):
        raise ConfigError("config field 'seeds' must not repeat")
    return RunConfig(
        name=name,
        generator=generator,
        dataset_path=dataset_path,
        steps=_field(raw, "steps", int),
        classes_per_step=_field(raw, "classes_per_step", int),
        train=train,
        seeds=tuple(seeds_raw),
        output_root=_field(raw, "output_root", str, default=None),
    )


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return parse_config(raw)


def config_echo(cfg: RunConfig) -> dict:
    """The parsed config, normalized, as stored in every result file."""
    echo = {
        "name": cfg.name,
        "steps": cfg.steps,
        "classes_per_step": cfg.classes_per_step,
        "strategy": cfg.train.strategy,
        "modality": cfg.train.modality,
        "epochs": cfg.train.epochs,
        "batch_size": cfg.train.batch_size,
        "lr": cfg.train.lr,
        "weight_decay": cfg.train.weight_decay,
        "memory_capacity": cfg.train.memory_capacity,
        "use_vad": cfg.train.use_vad,
        "weights": dataclasses.asdict(cfg.train.weights),
        "seeds": list(cfg.seeds),
    }
    if cfg.generator is not None:
        echo["dataset"] = dataclasses.asdict(cfg.generator)
    else:
        echo["dataset_path"] = cfg.dataset_path
    return echo


def load_run_dataset(cfg: RunConfig) -> FeatureDataset:
    if cfg.generator is not None:
        return generate_synthetic(cfg.generator)
    return load_dataset(cfg.dataset_path)


def output_dir(cfg: RunConfig) -> Path:
    root = cfg.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "results"
    return Path(root) / cfg.name


# ---------------------------------------------------------------------------
# running


def run_one_seed(dataset: FeatureDataset, cfg: RunConfig, seed: int
                 ) -> Tuple[dict, List[dict]]:
    """Train one seed and build its (deterministic) result payload."""
    classes = sorted({s.label for s in dataset.samples})
    sequence = build_task_sequence(classes, cfg.steps, cfg.classes_per_step, seed)
    events: List[dict] = []
    try:
        out = run_incremental(dataset, sequence, cfg.train_for_seed(seed), events)
    except TrainingDiverged as err:
        err.run_log_tail = [canonical_json(e) for e in events[-10:]]
        raise
    matrix = out.matrix
    triangle = [[float(v) for v in row[: i + 1]]
                for i, row in enumerate(matrix.per_task)]
    forget = average_forgetting(matrix)
    result = {
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "kind": "result",
        "name": cfg.name,
        "seed": int(seed),
        "config": config_echo(cfg),
        "tasks": [list(t) for t in sequence.tasks],
        "accuracy_matrix": triangle,
        "overall_accuracy": [float(v) for v in matrix.overall],
        "mean_accuracy": mean_accuracy(matrix),
        "average_forgetting": forget,
        "loss_curves": out.loss_curves,
        "final_memory_size": out.memory.total(),
    }
    return result, events


def _seed_worker(args: Tuple[str, int]) -> Tuple[int, dict, List[dict]]:
    # runs in a worker process: rebuild everything from the serialized config
    cfg_json, seed = args
    cfg = parse_config(json.loads(cfg_json))
    dataset = load_run_dataset(cfg)
    result, events = run_one_seed(dataset, cfg, seed)
    return seed, result, events


def aggregate_payload(cfg: RunConfig, per_seed: Dict[int, dict]) -> dict:
    accs = [per_seed[s]["mean_accuracy"] for s in cfg.seeds]
    forgets = [per_seed[s]["average_forgetting"] for s in cfg.seeds]
    agg_forget = {"mean": None, "std": None}
    if all(f is not None for f in forgets):
        agg_forget = {"mean": float(np.mean(forgets)), "std": float(np.std(forgets))}
    return {
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "kind": "aggregate",
        "name": cfg.name,
        "strategy": cfg.train.strategy,
        "modality": cfg.train.modality,
        "seeds": list(cfg.seeds),
        "per_seed": {str(s): {"mean_accuracy": per_seed[s]["mean_accuracy"],
                              "average_forgetting": per_seed[s]["average_forgetting"]}
                     for s in cfg.seeds},
        "mean_accuracy": {"mean": float(np.mean(accs)), "std": float(np.std(accs))},
        "average_forgetting": agg_forget,
    }


def cli_run(config_path, workers: int = 1) -> Path:
    """Run every seed of a config; write result + log per seed and an aggregate.

    Returns the run's output directory. Worker processes only parallelize
    across seeds; outputs are identical to a sequential run.
    """
    cfg = load_config(config_path)
    out_dir = output_dir(cfg)
    per_seed: Dict[int, dict] = {}
    if workers > 1 and len(cfg.seeds) > 1:
        cfg_json = canonical_json(json.loads(Path(config_path).read_text()))
        jobs = [(cfg_json, s) for s in cfg.seeds]
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for seed, result, events in pool.map(_seed_worker, jobs):
                _write_seed(out_dir, seed, result, events)
                per_seed[seed] = result
    else:
        dataset = load_run_dataset(cfg)
        for seed in cfg.seeds:
            result, events = run_one_seed(dataset, cfg, seed)
            _write_seed(out_dir, seed, result, events)
            per_seed[seed] = result
    write_json(out_dir / "aggregate.json", aggregate_payload(cfg, per_seed))
    return out_dir


def _write_seed(out_dir: Path, seed: int, result: dict, events: List[dict]) -> None:
    seed_dir = out_dir / f"seed_{seed}"
    write_json(seed_dir / "result.json", result)
    write_run_log(seed_dir / "run.log.jsonl", events)


# ---------------------------------------------------------------------------
# dataset generation


def cli_generate(spec_path, out_path) -> FeatureDataset:
    try:
        raw = json.loads(Path(spec_path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {spec_path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"spec file {spec_path} is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("generator spec must be a JSON object")
    try:
        spec = GeneratorSpec(**raw)
    except (TypeError, ContractError) as err:
        raise ConfigError(f"generator spec: {err}") from None
    ds = generate_synthetic(spec)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out_path)
    return ds


# ---------------------------------------------------------------------------
# comparison table


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def cli_compare(results_dir, out_csv) -> List[dict]:
    """One CSV row per result file, best mean accuracy first."""
    files = sorted(Path(results_dir).rglob("result.json"))
    if not files:
        raise ConfigError(f"no result.json files under {results_dir}")
    rows = []
    for path in files:
        payload = json.loads(path.read_text())
        diag = [payload["accuracy_matrix"][i][i]
                for i in range(len(payload["accuracy_matrix"]))]
        rows.append({
            "strategy": payload["config"]["strategy"],
            "modality": payload["config"]["modality"],
            "mean_acc": payload["mean_accuracy"],
            "avg_forget": payload["average_forgetting"],
            "per_step": diag,
            "seed": payload["seed"],
        })
    rows.sort(key=lambda r: (-r["mean_acc"], r["strategy"], r["modality"], r["seed"]))
    steps = max(len(r["per_step"]) for r in rows)
    header = ["strategy", "modality", "mean_acc", "avg_forget"] + \
        [f"step_{i + 1}" for i in range(steps)] + ["seed"]
    lines = [f"# format_version={FORMAT_VERSION}"]
    lines.append(",".join(header))
    for r in rows:
        per = [_fmt(v) for v in r["per_step"]]
        per += [""] * (steps - len(per))
        lines.append(",".join([r["strategy"], r["modality"], _fmt(r["mean_acc"]),
                               _fmt(r["avg_forget"])] + per + [str(r["seed"])]))
    write_atomic(Path(out_csv), ("\n".join(lines) + "\n").encode())
    return rows


# ---------------------------------------------------------------------------
# ablation sweep


def component_variant_name(i_on: int, c_on: int, v_on: int) -> str:
    active = [name for name, on in (("i", i_on), ("c", c_on), ("vad", v_on)) if on]
    return "+".join(active) if active else "none"


def _variant_config(cfg: RunConfig, *, modality=None, components=None) -> RunConfig:
    train = cfg.train
    if modality is not None:
        train = dataclasses.replace(train, strategy="avcil", modality=modality)
    else:
        i_on, c_on, v_on = components
        weights = dataclasses.replace(
            train.weights,
            lambda_i=train.weights.lambda_i if i_on else 0.0,
            lambda_c=train.weights.lambda_c if c_on else 0.0)
        train = dataclasses.replace(train, strategy="avcil", weights=weights,
                                    use_vad=bool(v_on))
    return dataclasses.replace(cfg, train=train)


def cli_ablate(config_path) -> Path:
    """Modality sweep (3 rows) plus component on/off sweep (8 rows), shared seeds.

    Writes per-variant results under <run dir>/ablate/ and a combined CSV.
    The base config's strategy field is ignored: every variant trains the
    attention model, differing only in modality or enabled loss components.
    """
    cfg = load_config(config_path)
    dataset = load_run_dataset(cfg)
    out_dir = output_dir(cfg) / "ablate"
    table: List[dict] = []

    def sweep(tag: str, variant: str, vcfg: RunConfig, flags: Tuple[int, int, int]):
        per_seed: Dict[int, dict] = {}
        vdir = out_dir / tag / variant.replace("+", "_")
        for seed in cfg.seeds:
            result, events = run_one_seed(dataset, vcfg, seed)
            _write_seed(vdir, seed, result, events)
            per_seed[seed] = result
        write_json(vdir / "aggregate.json", aggregate_payload(vcfg, per_seed))
        accs = [per_seed[s]["mean_accuracy"] for s in cfg.seeds]
        forgets = [per_seed[s]["average_forgetting"] for s in cfg.seeds]
        table.append({
            "sweep": tag, "variant": variant,
            "i_avss": flags[0], "c_avss": flags[1], "vad": flags[2],
            "mean_acc": float(np.mean(accs)),
            "avg_forget": (float(np.mean(forgets))
                           if all(f is not None for f in forgets) else None),
        })

    for modality in MODALITY_SWEEP:
        sweep("modality", modality, _variant_config(cfg, modality=modality), (1, 1, 1))
    for combo in COMPONENT_SWEEP:
        sweep("components", component_variant_name(*combo),
              _variant_config(cfg, components=combo), combo)

    lines = [f"# format_version={FORMAT_VERSION}",
             "sweep,variant,i_avss,c_avss,vad,mean_acc,avg_forget"]
    for r in table:
        lines.append(",".join([r["sweep"], r["variant"], str(r["i_avss"]),
                               str(r["c_avss"]), str(r["vad"]),
                               _fmt(r["mean_acc"]), _fmt(r["avg_forget"])]))
    write_atomic(out_dir / "ablate.csv", ("\n".join(lines) + "\n").encode())
    return out_dir


# ---------------------------------------------------------------------------
# attention export


def cli_export_attention(checkpoint_path, dataset_path, sample_ids: Sequence[int],
                         out_dir) -> List[Path]:
    """Channel-averaged attention maps for chosen samples, one CSV pair each."""
    params = mdl.load_checkpoint(checkpoint_path)
    dataset = load_dataset(dataset_path)
    by_id = {s.sample_id: s for s in dataset.samples}
    missing = [i for i in sample_ids if i not in by_id]
    if missing:
        raise ConfigError(f"unknown sample ids: {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for sid in sample_ids:
        trace = mdl.forward(params, [by_id[sid]], "audiovisual")
        spatial = trace.maps.spatial.data[0].mean(axis=2)     # (L, S)
        temporal = trace.maps.temporal.data[0].mean(axis=1)   # (L,)
        spath = out / f"sample_{sid}_spatial.csv"
        tpath = out / f"sample_{sid}_temporal.csv"
        slines = [f"# format_version={FORMAT_VERSION}"]
        slines += [",".join(repr(float(v)) for v in row) for row in spatial]
        tlines = [f"# format_version={FORMAT_VERSION}",
                  ",".join(repr(float(v)) for v in temporal)]
        write_atomic(spath, ("\n".join(slines) + "\n").encode())
        write_atomic(tpath, ("\n".join(tlines) + "\n").encode())
        written += [spath, tpath]
    return written


# ---------------------------------------------------------------------------
# gradient self-check


def gradcheck_report(seed: int = 0, n: int = 5, d: int = 6, ell: int = 3,
                     s_cells: int = 4, classes: int = 4) -> Dict[str, float]:
    """Max finite-difference error for every primitive and every loss."""
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}

    def check(name: str, f, x, h=1e-5):
        report[name] = dm.grad_check(f, dm.parameter(x), h)

    a = rng.normal(size=(n, d))
    b = rng.normal(size=(d, d))
    check("matmul", lambda x: (x @ dm.constant(b)).sum(), a)
    check("tanh", lambda x: dm.tanh(x).sum(), a)
    check("exp", lambda x: dm.exp(x).sum(), a * 0.3)
    check("log", lambda x: dm.log(x).sum(), np.abs(a) + 0.5)
    check("sqrt", lambda x: dm.sqrt(x).sum(), np.abs(a) + 0.5)
    check("mul", lambda x: (x * x).sum(), a)
    check("div", lambda x: (x / dm.constant(np.abs(a) + 1.0)).sum(), a)
    check("sum", lambda x: x.sum(), a)
    check("mean", lambda x: x.mean(), a)
    probe = rng.normal(size=(n, d))
    check("softmax", lambda x: (dm.softmax(x, axis=1) * dm.constant(probe)).sum(), a)
    check("logsumexp", lambda x: dm.logsumexp(x, axis=1).sum(), a)
    check("log_softmax", lambda x: (dm.log_softmax(x, axis=1)
                                    * dm.constant(np.eye(n, d))).sum(), a)
    check("concat", lambda x: dm.concat([x, dm.constant(a)], axis=0).sum(), a)
    check("take", lambda x: dm.take(x, np.array([0, 2, 2])).sum(), a)
    check("slice", lambda x: dm.slice_axis(x, 1, 1, 4).sum(), a)
    q = rng.dirichlet(np.ones(d), size=n)
    check("kl_rows_p", lambda x: dm.kl_rows(dm.softmax(x, axis=1),
                                            dm.constant(q), axis=1), a)
    check("kl_rows_q", lambda x: dm.kl_rows(dm.constant(q),
                                            dm.softmax(x, axis=1), axis=1), a)

    labels = rng.integers(0, classes, size=n)
    labels[:2] = [0, classes - 1]          # both blocks populated
    layout = TaskLayout((2, classes - 2))
    audio = rng.normal(size=(n, d))
    visual = rng.normal(size=(n, ell, s_cells, d))
    weights = LossWeights()
    check("loss_i_avss", lambda x: obj.i_avss(x, dm.constant(visual.mean((1, 2))),
                                              weights.tau), audio)
    check("loss_c_avss", lambda x: obj.c_avss(x, dm.constant(visual.mean((1, 2))),
                                              labels, weights.tau), audio)
    check("loss_d_avsc", lambda x: obj.d_avsc(x, dm.constant(visual.mean((1, 2))),
                                              labels, weights), audio)
    logits = rng.normal(size=(n, classes))
    old = rng.normal(size=(n, 2))
    check("loss_ss_ce", lambda x: obj.ss_ce(x, labels, layout), logits)
    check("loss_tkd", lambda x: obj.tkd(x, dm.constant(old), layout), logits)

    params = mdl.init_params(d, classes, seed=seed + 1)
    batch_audio = dm.constant(audio)
    batch_visual = dm.constant(visual)
    mask = np.zeros(n, dtype=bool)
    mask[:2] = True
    teacher = mdl.snapshot(mdl.init_params(d, 2, seed=seed + 2))

    def through_model(x):
        patched = mdl.ModelParams(x, params.w_visual, params.u_audio,
                                  params.u_visual, params.cls_weight,
                                  params.cls_bias)
        trace = mdl.forward_arrays(patched, batch_audio, batch_visual)
        teacher_trace = mdl.forward_arrays(teacher, batch_audio, batch_visual)
        return obj.total_loss(trace, teacher_trace, labels, mask, layout, weights)

    check("loss_vad", lambda x: obj.vad(
        mdl.forward_arrays(
            mdl.ModelParams(x, params.w_visual, params.u_audio, params.u_visual,
                            params.cls_weight, params.cls_bias),
            batch_audio, batch_visual).maps,
        mdl.forward_arrays(teacher, batch_audio, batch_visual).maps,
        mask, weights.lambda_vad), params.w_audio.data.copy())
    check("loss_total", through_model, params.w_audio.data.copy())
    return report


def cli_gradcheck(threshold: float = 1e-5, seed: int = 0) -> Dict[str, float]:
    report = gradcheck_report(seed)
    bad = {k: v for k, v in report.items() if not (v < threshold)}
    if bad:
        names = ", ".join(sorted(bad))
        raise VerificationFailure(f"gradient check failed for: {names}")
    return report
