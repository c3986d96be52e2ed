import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from cohmeter import __version__
from cohmeter.cli import CONFIG_SCHEMA, PLOT_COLUMNS, ConfigError, main, parse_config

TINY = {
    "schema": CONFIG_SCHEMA,
    "detector": {"lo_intensity": [0.0, 1.0], "overlap": [0.99, 0.75]},
    "probes": {"phases": 6, "amplitudes": 4, "max_mean": 3.0},
    "shots": 2000,
    "reconstruction": {"dim": 7, "band": 2},
    "measure": {"dim_eval": 7},
    "resamples": 2,
    "seed": 5,
}


def write_config(tmp_path, data=None, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(TINY if data is None else data))
    return path


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def tree(folder: Path) -> dict:
    return {str(p.relative_to(folder)): p.read_bytes() for p in sorted(folder.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("sweep")
    cfg = write_config(base)
    assert main(["sweep", "--config", str(cfg), "--out", str(base / "run")]) == 0
    return base / "run"


class TestConfig:
    def test_defaults_are_the_measured_grid(self):
        cfg = parse_config({"schema": CONFIG_SCHEMA})
        assert cfg.detector.lo_intensity == (0.5, 1.0, 2.0, 3.0, 4.0)
        assert cfg.detector.overlap == (0.99, 0.85, 0.75)
        assert len(cfg.detector.configs()) == 15

    @pytest.mark.parametrize("data, match", [
        ({}, "schema"),
        ({"schema": CONFIG_SCHEMA, "shot": 10}, "unknown top-level"),
        ({"schema": CONFIG_SCHEMA, "detector": {"lo": [1]}}, "unknown key"),
        ({"schema": CONFIG_SCHEMA, "detector": {"overlap": []}}, "non-empty"),
        ({"schema": CONFIG_SCHEMA, "detector": {"overlap": [1.5]}}, "detector"),
        ({"schema": CONFIG_SCHEMA, "shots": 0}, "shots"),
        ({"schema": CONFIG_SCHEMA, "shots": 1.5}, "integer"),
        ({"schema": CONFIG_SCHEMA, "probes": {"phases": 4}}, "probe phases"),
        ({"schema": CONFIG_SCHEMA, "reconstruction": {"dim": 4, "band": 5}}, "band"),
        ({"schema": CONFIG_SCHEMA, "measure": {"formulation": "magic"}}, "formulation"),
    ])
    def test_rejections(self, data, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(data)

    def test_bad_file_exits_2_with_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        err = last_error(capsys)
        assert err["exit_code"] == 2 and err["error"] == "config"

    def test_missing_file(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
        assert "not found" in last_error(capsys)["message"]

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        path = write_config(tmp_path, {**TINY, "extra": 1})
        assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "extra" in last_error(capsys)["message"]

    def test_missing_required_argument(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path)]) == 2

    def test_bad_log_level(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("COHMETER_LOG", "loud")
        assert main(["simulate", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 2
        assert "COHMETER_LOG" in last_error(capsys)["message"]


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert __version__ in out and CONFIG_SCHEMA in out and "numpy" in out


def test_stage_by_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(sim)]) == 0
    manifest = json.loads((sim / "simulation.json").read_text())
    assert len(manifest["points"]) == 4
    records = sim / manifest["points"][1]["records"]
    with records.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["alpha_re", "alpha_im", "shots", "clicks"] and len(rows) == 25

    povm = tmp_path / "povm.json"
    assert main(["reconstruct", str(records), "--config", str(cfg), "--out", str(povm)]) == 0
    doc = json.loads(povm.read_text())
    assert (doc["dim"], doc["band"]) == (7, 2)
    assert doc["meta"]["fit"]["solver"]["status"] == "optimal"

    measures = tmp_path / "measures.json"
    assert main(["quantify", str(povm), "--out", str(measures), "--dim", "6"]) == 0
    res = json.loads(measures.read_text())
    assert set(res) >= {"config", "measure_diamond", "measure_nsid", "lower_bound", "uncertainty", "solver_reports"}
    assert res["config"]["dim_eval"] == 6
    assert res["lower_bound"] <= res["measure_diamond"] + 1e-6
    assert abs(res["measure_diamond"] - res["measure_nsid"]) <= 1e-4


def test_reconstruct_missing_records(tmp_path, capsys):
    assert main(["reconstruct", str(tmp_path / "none.csv"), "--out", str(tmp_path / "p.json")]) == 2
    assert last_error(capsys)["exit_code"] == 2


def test_stages_are_byte_identical_on_rerun(tmp_path):
    cfg = write_config(tmp_path)
    for run in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        records = tmp_path / run / "records_m0.99_lo1.csv"
        assert main(["reconstruct", str(records), "--config", str(cfg), "--out", str(tmp_path / run / "povm.json")]) == 0
        assert main(["quantify", str(tmp_path / run / "povm.json"), "--out", str(tmp_path / run / "m.json")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_seed_override_changes_records(tmp_path):
    cfg = write_config(tmp_path)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "6"])
    name = "records_m0.99_lo1.csv"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


class TestSweep:
    def test_outputs(self, sweep_dir):
        manifest = json.loads((sweep_dir / "sweep.json").read_text())
        assert [p["name"] for p in manifest["points"]] == ["m0.99_lo0", "m0.99_lo1", "m0.75_lo0", "m0.75_lo1"]
        for p in manifest["points"]:
            folder = sweep_dir / p["path"]
            assert {f.name for f in folder.iterdir()} == {"records.csv", "povm.json", "measures.json"}

    def test_measures_content(self, sweep_dir):
        res = json.loads((sweep_dir / "points" / "m0.99_lo1" / "measures.json").read_text())
        assert res["uncertainty"]["measure_diamond"]["count"] == 2
        assert res["measure_diamond"] > 0.1
        assert res["theoretical"]["measure_diamond"] > res["theoretical"]["lower_bound"] > 0
        assert len(res["fig2"]["diagonal"]) == 7 and len(res["fig2"]["offdiagonal"]) == 6

    def test_lo_off_point_is_incoherent(self, sweep_dir):
        res = json.loads((sweep_dir / "points" / "m0.75_lo0" / "measures.json").read_text())
        assert res["theoretical"]["measure_diamond"] <= 1e-5
        assert res["theoretical"]["lower_bound"] == 0.0

    def test_overlap_ordering(self, sweep_dir):
        high = json.loads((sweep_dir / "points" / "m0.99_lo1" / "measures.json").read_text())
        low = json.loads((sweep_dir / "points" / "m0.75_lo1" / "measures.json").read_text())
        assert high["theoretical"]["measure_diamond"] > low["theoretical"]["measure_diamond"]

    def test_parallel_sweep_matches_serial(self, sweep_dir, tmp_path):
        cfg = write_config(tmp_path, {**TINY, "parallelism": 2})
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "par")]) == 0
        assert tree(tmp_path / "par" / "points") == tree(sweep_dir / "points")

    def test_report(self, sweep_dir, tmp_path):
        out = tmp_path / "report"
        assert main(["report", str(sweep_dir), "--out", str(out)]) == 0
        with (out / "summary.csv").open() as fh:
            summary = list(csv.DictReader(fh))
        points = {(r["overlap"], r["lo_intensity"]) for r in summary}
        assert len(summary) == len(points) == 4
        assert all(r["measure_reconstructed"] and r["measure_theoretical"] for r in summary)
        with (out / "fig3.csv").open() as fh:
            fig3 = list(csv.DictReader(fh))
        assert tuple(fig3[0]) == PLOT_COLUMNS
        assert {r["series"] for r in fig3} == {"reconstructed", "theoretical"}
        for r in fig3:
            assert float(r["err_lo"]) <= float(r["value"]) <= float(r["err_hi"])
        with (out / "fig2.csv").open() as fh:
            fig2 = list(csv.DictReader(fh))
        assert {r["series"] for r in fig2} == {"diagonal", "offdiagonal"}
        again = tmp_path / "report2"
        main(["report", str(sweep_dir), "--out", str(again)])
        assert tree(out) == tree(again)

    def test_report_without_manifest(self, tmp_path, capsys):
        assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_solver_failure_keeps_partial_outputs(tmp_path, capsys):
    data = {**TINY, "detector": {"lo_intensity": [1.0], "overlap": [0.99]}, "measure": {"dim_eval": 7, "max_iter": 1}}
    cfg = write_config(tmp_path, data)
    out = tmp_path / "run"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 3
    assert last_error(capsys)["error"] == "solver"
    assert (out / "sweep.json.partial").exists()
    assert (out / "points" / "m0.99_lo1" / "measures.json.partial").exists()
    assert not (out / "sweep.json").exists()


def test_reconstruct_failure_keeps_partial_povm(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")])
    data = {**TINY, "reconstruction": {"dim": 7, "band": 2, "max_iter": 1}}
    bad = write_config(tmp_path, data, "bad.json")
    out = tmp_path / "povm.json"
    assert main(["reconstruct", str(tmp_path / "sim" / "records_m0.99_lo1.csv"), "--config", str(bad),
                 "--out", str(out)]) == 3
    assert (tmp_path / "povm.json.partial").exists() and not out.exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cohmeter", "quantify", str(tmp_path / "none.json"),
                           "--out", str(tmp_path / "m.json")], capture_output=True, text=True)
    assert proc.returncode == 2
    err = json.loads(proc.stderr.strip().splitlines()[-1])
    assert err["exit_code"] == 2
