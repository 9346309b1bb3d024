import csv
import json

import numpy as np
import pytest

import avcil.diffmath as dm
import avcil.model as mdl
import avcil.protocol as proto
from avcil import cli, harness
from avcil.baselines import Strategy
from avcil.datasets import load_dataset
from avcil.errors import ConfigError
from avcil.metrics import AccuracyMatrix, average_forgetting, mean_accuracy


def base_config(tmp_path, **kw):
    cfg = {
        "format_version": 1,
        "name": "t",
        "dataset": {"mode": "aligned", "num_classes": 4, "d": 6, "frames": 2,
                     "cells": 3, "train_per_class": 5, "test_per_class": 3,
                     "seed": 1},
        "steps": 2, "classes_per_step": 2,
        "strategy": "avcil", "modality": "audiovisual",
        "epochs": 2, "batch_size": 8, "lr": 0.003, "memory_capacity": 8,
        "seeds": [0, 1],
        "output_root": str(tmp_path / "out"),
    }
    cfg.update(kw)
    return cfg


def write_config(tmp_path, **kw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base_config(tmp_path, **kw)))
    return path


# --- config parsing -------------------------------------------------------

def test_parse_fills_defaults(tmp_path):
    raw = base_config(tmp_path)
    for key in ("strategy", "modality", "epochs", "batch_size", "lr",
                "memory_capacity", "seeds"):
        del raw[key]
    cfg = harness.parse_config(raw)
    assert cfg.train.strategy == "avcil"
    assert cfg.train.epochs == 200
    assert cfg.train.memory_capacity == 340
    assert cfg.seeds == (0,)


@pytest.mark.parametrize("mangle,needle", [
    (lambda c: c.pop("name"), "name"),
    (lambda c: c.pop("steps"), "steps"),
    (lambda c: c.update(format_version=9), "format_version"),
    (lambda c: c.pop("dataset"), "exactly one"),
    (lambda c: c.update(dataset_path="x.avcf"), "exactly one"),
    (lambda c: c.update(epochs="many"), "epochs"),
    (lambda c: c.update(epochs=True), "epochs"),
    (lambda c: c.update(seeds=[1, 1]), "seeds"),
    (lambda c: c.update(seeds=[]), "seeds"),
    (lambda c: c.update(name="a/b"), "name"),
    (lambda c: c.update(weights={"lambda_i": -1}), "weights"),
    (lambda c: c.update(dataset={"mode": "nope"}), "dataset"),
])
def test_parse_rejects_bad_fields(tmp_path, mangle, needle):
    raw = base_config(tmp_path)
    mangle(raw)
    with pytest.raises(ConfigError, match=needle):
        harness.parse_config(raw)


def test_load_config_reports_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        harness.load_config(path)
    with pytest.raises(ConfigError, match="not found"):
        harness.load_config(tmp_path / "absent.json")


def test_output_root_env_fallback(tmp_path, monkeypatch):
    raw = base_config(tmp_path)
    del raw["output_root"]
    cfg = harness.parse_config(raw)
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path / "envroot"))
    assert harness.output_dir(cfg) == tmp_path / "envroot" / "t"


# --- serialization --------------------------------------------------------

def test_content_hash_excludes_itself(tmp_path):
    payload = {"a": 1, "b": [1.5, None]}
    h = harness.content_hash(payload)
    assert harness.content_hash({**payload, "content_hash": h}) == h
    path = tmp_path / "x.json"
    harness.write_json(path, payload)
    loaded = json.loads(path.read_text())
    assert loaded["content_hash"] == h


def test_write_atomic_leaves_no_temp_files(tmp_path):
    target = tmp_path / "deep" / "file.bin"
    harness.write_atomic(target, b"abc")
    assert target.read_bytes() == b"abc"
    assert [p.name for p in target.parent.iterdir()] == ["file.bin"]


# --- cli_run --------------------------------------------------------------

def _without_wall_times(log_bytes):
    # wall-clock timing is the one value allowed to differ between reruns,
    # and it is confined to the run log
    events = [json.loads(line) for line in log_bytes.decode().splitlines()]
    for e in events:
        e.pop("wall_time_s", None)
    return events


def test_run_writes_results_and_is_byte_deterministic(tmp_path):
    path = write_config(tmp_path, epochs=2)
    assert cli.main(["run", str(path)]) == 0
    out = tmp_path / "out" / "t"
    first = {str(p.relative_to(out)): p.read_bytes()
             for p in out.rglob("*") if p.is_file()}
    assert {p.split("/")[-1] for p in first} == \
        {"result.json", "run.log.jsonl", "aggregate.json"}
    assert cli.main(["run", str(path)]) == 0
    for p in out.rglob("*"):
        if not p.is_file():
            continue
        rel = str(p.relative_to(out))
        if p.name == "run.log.jsonl":
            assert _without_wall_times(p.read_bytes()) == \
                _without_wall_times(first[rel])
        else:
            assert p.read_bytes() == first[rel], p


def test_result_is_self_verifying(tmp_path):
    path = write_config(tmp_path)
    harness.cli_run(path)
    res = json.loads((tmp_path / "out/t/seed_0/result.json").read_text())
    rows = res["accuracy_matrix"]
    matrix = AccuracyMatrix.from_rows(rows, res["overall_accuracy"])
    assert mean_accuracy(matrix) == res["mean_accuracy"]
    assert average_forgetting(matrix) == res["average_forgetting"]
    assert harness.content_hash(res) == res["content_hash"]
    assert res["library_version"] == harness.__version__
    assert res["config"]["strategy"] == "avcil"
    assert len(res["loss_curves"]) == 2


def test_aggregate_summarizes_all_seeds(tmp_path):
    path = write_config(tmp_path)
    harness.cli_run(path)
    agg = json.loads((tmp_path / "out/t/aggregate.json").read_text())
    assert agg["kind"] == "aggregate"
    assert set(agg["per_seed"]) == {"0", "1"}
    accs = [agg["per_seed"][s]["mean_accuracy"] for s in ("0", "1")]
    assert agg["mean_accuracy"]["mean"] == float(np.mean(accs))
    assert agg["mean_accuracy"]["std"] == float(np.std(accs))


def test_run_log_is_json_lines_with_version_header(tmp_path):
    path = write_config(tmp_path)
    harness.cli_run(path)
    lines = (tmp_path / "out/t/seed_1/run.log.jsonl").read_text().splitlines()
    events = [json.loads(line) for line in lines]
    assert events[0] == {"event": "log_opened", "format_version": 1}
    assert events[1]["event"] == "run_started"
    kinds = {e["event"] for e in events}
    assert {"step_started", "epoch_loss", "memory_updated", "step_evaluated"} <= kinds


def test_parallel_workers_match_sequential_bytes(tmp_path):
    path = write_config(tmp_path)
    harness.cli_run(path, workers=1)
    out = tmp_path / "out" / "t"
    sequential = {str(p.relative_to(out)): p.read_bytes()
                  for p in out.rglob("*.json") if p.is_file()}
    harness.cli_run(path, workers=2)
    parallel = {str(p.relative_to(out)): p.read_bytes()
                for p in out.rglob("*.json") if p.is_file()}
    assert sequential == parallel


def test_cli_exit_codes_for_bad_configs(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["run", str(missing)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(base_config(tmp_path, strategy="mystery")))
    assert cli.main(["run", str(bad)]) == 2
    assert "strategy" in capsys.readouterr().err


def test_cli_divergence_exits_3_with_log_tail(tmp_path, monkeypatch, capsys):
    path = write_config(tmp_path, strategy="finetune")
    exploder = Strategy("finetune", uses_memory=False, uses_teacher=False,
                        retrains_on_all=False, nme_eval=False,
                        compose=lambda *a: dm.parameter(np.float64("nan")))
    monkeypatch.setattr(proto, "get_strategy", lambda tag: exploder)
    assert cli.main(["run", str(path)]) == 3
    err = capsys.readouterr().err
    assert "non-finite loss" in err
    assert "run_started" in err        # the tail of the run log is printed


# --- cli_generate ---------------------------------------------------------

def test_generate_writes_loadable_deterministic_file(tmp_path):
    spec = {"mode": "xor_pairs", "num_classes": 4, "d": 5, "frames": 2,
            "cells": 3, "train_per_class": 3, "test_per_class": 2, "seed": 9}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    assert cli.main(["generate", str(spec_path), str(tmp_path / "a.avcf")]) == 0
    assert cli.main(["generate", str(spec_path), str(tmp_path / "b.avcf")]) == 0
    a = (tmp_path / "a.avcf").read_bytes()
    assert a == (tmp_path / "b.avcf").read_bytes()
    ds = load_dataset(tmp_path / "a.avcf")
    assert ds.num_classes == 4 and len(ds.samples) == 20


def test_generate_rejects_bad_spec(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"mode": "aligned", "num_classes": 0,
                                     "d": 5, "frames": 2, "cells": 3,
                                     "train_per_class": 3}))
    assert cli.main(["generate", str(spec_path), str(tmp_path / "x.avcf")]) == 2
    spec_path.write_text("oops")
    assert cli.main(["generate", str(spec_path), str(tmp_path / "x.avcf")]) == 2


# --- cli_compare ----------------------------------------------------------

def test_compare_sorts_and_reparses(tmp_path):
    for name, strategy in (("ft", "finetune"), ("av", "avcil")):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(base_config(tmp_path, name=name,
                                               strategy=strategy, seeds=[0])))
        harness.cli_run(path)
    out_csv = tmp_path / "table.csv"
    rows = harness.cli_compare(tmp_path / "out", out_csv)
    assert len(rows) == 2
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "# format_version=1"
    parsed = list(csv.DictReader(lines[1:]))
    assert [r["strategy"] for r in parsed] == [r["strategy"] for r in rows]
    accs = [float(r["mean_acc"]) for r in parsed]
    assert accs == sorted(accs, reverse=True)
    # per-step columns are the matrix diagonal of the matching result file
    for r in parsed:
        res_path = tmp_path / "out" / ("av" if r["strategy"] == "avcil" else "ft") \
            / f"seed_{r['seed']}" / "result.json"
        res = json.loads(res_path.read_text())
        diag = [res["accuracy_matrix"][i][i]
                for i in range(len(res["accuracy_matrix"]))]
        got = [float(r[f"step_{i + 1}"]) for i in range(len(diag))]
        assert got == diag


def test_compare_empty_dir_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["compare", str(tmp_path / "empty"), str(tmp_path / "o.csv")]) == 2


# --- cli_ablate -----------------------------------------------------------

def test_ablate_emits_modality_and_component_rows(tmp_path):
    path = write_config(tmp_path, seeds=[0])
    out_dir = harness.cli_ablate(path)
    lines = (out_dir / "ablate.csv").read_text().splitlines()
    parsed = list(csv.DictReader(lines[1:]))
    modality = [r for r in parsed if r["sweep"] == "modality"]
    components = [r for r in parsed if r["sweep"] == "components"]
    assert [r["variant"] for r in modality] == ["audiovisual", "audio", "visual"]
    assert len(components) == 8
    flags = {(r["i_avss"], r["c_avss"], r["vad"]) for r in components}
    assert len(flags) == 8
    none_row = next(r for r in components if r["variant"] == "none")
    assert (none_row["i_avss"], none_row["c_avss"], none_row["vad"]) == ("0", "0", "0")


def test_ablate_all_off_row_equals_ssil_run_exactly(tmp_path):
    path = write_config(tmp_path, seeds=[0, 1])
    out_dir = harness.cli_ablate(path)
    ssil_path = tmp_path / "ssil.json"
    ssil_path.write_text(json.dumps(base_config(tmp_path, name="s",
                                                strategy="ssil")))
    harness.cli_run(ssil_path)
    lines = (out_dir / "ablate.csv").read_text().splitlines()
    none_row = next(r for r in csv.DictReader(lines[1:])
                    if r["sweep"] == "components" and r["variant"] == "none")
    agg = json.loads((tmp_path / "out/s/aggregate.json").read_text())
    assert float(none_row["mean_acc"]) == agg["mean_accuracy"]["mean"]
    assert float(none_row["avg_forget"]) == agg["average_forgetting"]["mean"]
    for seed in (0, 1):
        a = json.loads((out_dir / "components/none" / f"seed_{seed}"
                        / "result.json").read_text())
        b = json.loads((tmp_path / "out/s" / f"seed_{seed}"
                        / "result.json").read_text())
        assert a["accuracy_matrix"] == b["accuracy_matrix"]
        assert a["mean_accuracy"] == b["mean_accuracy"]


# --- cli_export_attention -------------------------------------------------

def test_export_attention_rows_are_distributions(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"mode": "aligned", "num_classes": 3, "d": 5,
                                     "frames": 4, "cells": 3, "train_per_class": 3,
                                     "test_per_class": 2, "seed": 2}))
    cli.main(["generate", str(spec_path), str(tmp_path / "ds.avcf")])
    params = mdl.init_params(5, 3, seed=4)
    mdl.save_checkpoint(params, tmp_path / "m.avcp")
    assert cli.main(["export-attention", str(tmp_path / "m.avcp"),
                     str(tmp_path / "ds.avcf"), str(tmp_path / "maps"),
                     "--samples", "0", "5"]) == 0
    for sid in (0, 5):
        slines = (tmp_path / f"maps/sample_{sid}_spatial.csv").read_text().splitlines()
        assert slines[0] == "# format_version=1"
        rows = [[float(x) for x in line.split(",")] for line in slines[1:]]
        assert len(rows) == 4 and all(len(r) == 3 for r in rows)
        for r in rows:
            assert abs(sum(r) - 1.0) < 1e-6
        tlines = (tmp_path / f"maps/sample_{sid}_temporal.csv").read_text().splitlines()
        weights = [float(x) for x in tlines[1].split(",")]
        assert len(weights) == 4
        assert abs(sum(weights) - 1.0) < 1e-6


def test_export_attention_unknown_id_exits_2(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"mode": "aligned", "num_classes": 2, "d": 4,
                                     "frames": 2, "cells": 2, "train_per_class": 2,
                                     "test_per_class": 1, "seed": 0}))
    cli.main(["generate", str(spec_path), str(tmp_path / "ds.avcf")])
    params = mdl.init_params(4, 2, seed=0)
    mdl.save_checkpoint(params, tmp_path / "m.avcp")
    assert cli.main(["export-attention", str(tmp_path / "m.avcp"),
                     str(tmp_path / "ds.avcf"), str(tmp_path / "maps"),
                     "--samples", "42"]) == 2


# --- cli_gradcheck --------------------------------------------------------

def test_gradcheck_covers_every_loss_and_passes():
    report = harness.gradcheck_report(seed=0)
    for name in ("loss_i_avss", "loss_c_avss", "loss_d_avsc", "loss_vad",
                 "loss_ss_ce", "loss_tkd", "loss_total"):
        assert name in report
    assert all(v < 1e-5 for v in report.values())
    assert cli.main(["gradcheck"]) == 0


def test_gradcheck_catches_a_wrong_derivative(monkeypatch, capsys):
    def leaky_tanh(x):
        x = dm._coerce(x)
        # forward is right, backward pretends the slope is 1 everywhere
        return dm._node(np.tanh(x.data), (x,), lambda g: (g,), "tanh")

    monkeypatch.setattr(dm, "tanh", leaky_tanh)
    assert cli.main(["gradcheck"]) == 4
    assert "tanh" in capsys.readouterr().err
