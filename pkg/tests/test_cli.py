import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dyndisc.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, sha256
from dyndisc.data_io import read_dataset
from dyndisc.dynamics import RealityParams, SolverConfig, solve_reality


def artifacts(d: Path) -> dict:
    """All output files except the manifest (which records wall time and paths)."""
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out)]) == EXIT_OK
    return out


def test_gen_data_outputs(dataset):
    assert sorted(p.name for p in dataset.glob("series_*.csv")) == [f"series_{k:02d}.csv" for k in range(5)]
    manifest = json.loads((dataset / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    for name, digest in manifest["outputs"].items():
        assert sha256(dataset / name) == digest
    series, meta = read_dataset(dataset)
    assert meta["n_total"] == 305 and meta["noise_sd"] == 1e-4
    assert not list(dataset.glob(".manifest.*"))


def test_gen_data_noiseless_column_matches_reality_solve(dataset):
    series, meta = read_dataset(dataset)
    truth = RealityParams.from_array(meta["truth_theta"])
    for s in series:
        ref = solve_reality(truth, s.profile, solver_cfg=SolverConfig(substeps=256))
        np.testing.assert_allclose(s.w_true, ref.w, rtol=1e-12, atol=1e-15)
        assert np.std(s.w_obs - s.w_true) == pytest.approx(1e-4, rel=0.3)


def test_gen_data_byte_identical(dataset, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == EXIT_OK
    assert artifacts(tmp_path) == artifacts(dataset)
    assert main(["gen-data", "--out", str(tmp_path / "other"), "--seed", "5"]) == EXIT_OK
    assert artifacts(tmp_path / "other")["series_00.csv"] != artifacts(dataset)["series_00.csv"]


def test_calibrate_smoke(dataset, tmp_path, capsys):
    start = time.perf_counter()
    rc = main(["calibrate", "--data", str(dataset), "--out", str(tmp_path), "--n-iter", "100", "--seed", "3"])
    assert rc == EXIT_OK
    assert time.perf_counter() - start < 60.0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    assert rows[0] == ["parameter", "mean", "hpd_lo", "hpd_hi"]
    assert names[:5] == ["dH", "dS", "dHk", "gamma", "nv"] and names[-1] == "sigma2"
    assert sum(n.startswith("tau2[") for n in names) == 9
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_records"] == 50
    assert len((tmp_path / "chain.ndjson").read_text().splitlines()) == 50

    assert main(["summarize", "--chain", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "parameter,mean,hpd_lo,hpd_hi" and len(out) == 1 + 5 + 9 + 1


def test_calibrate_without_discrepancy(dataset, tmp_path):
    rc = main(["calibrate", "--data", str(dataset), "--out", str(tmp_path), "--n-iter", "20", "--no-discrepancy"])
    assert rc == EXIT_OK
    with open(tmp_path / "summary.csv") as fh:
        assert [r[0] for r in csv.reader(fh)][1:] == ["dH", "dS", "dHk", "gamma", "nv", "sigma2"]
    assert not (tmp_path / "chain.basis.json").exists()


def test_pipeline_deterministic_and_worker_independent(dataset, tmp_path):
    runs = []
    for name, workers in (("a", "1"), ("b", "4")):
        root = tmp_path / name
        assert main(["gen-data", "--out", str(root / "data"), "--workers", workers]) == EXIT_OK
        assert main(["calibrate", "--data", str(root / "data"), "--out", str(root / "cal"), "--n-iter", "100",
                     "--workers", workers]) == EXIT_OK
        assert main(["predict", "--chain", str(root / "cal"), "--data", str(root / "data"), "--n-draws", "10",
                     "--out", str(root / "pred"), "--workers", workers]) == EXIT_OK
        assert main(["upscale", "--chain", str(root / "cal"), "--n-samples", "10", "--reality",
                     "--out", str(root / "up"), "--workers", workers]) == EXIT_OK
        runs.append(artifacts(root))
    assert runs[0] == runs[1]
    assert any(k.endswith(".csv") for k in runs[0])


def test_predict_and_upscale_schema(dataset, tmp_path):
    cal = tmp_path / "cal"
    assert main(["calibrate", "--data", str(dataset), "--out", str(cal), "--n-iter", "80", "--seed", "1"]) == 0
    assert main(["predict", "--chain", str(cal / "chain.json"), "--data", str(dataset), "--n-draws", "30",
                 "--out", str(tmp_path / "pred")]) == EXIT_OK
    with open(tmp_path / "pred" / "predict_00.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:5] == ["t", "y_obs", "mean", "lo", "hi"]
    assert sum(h.startswith("draw_") for h in header) == 30
    cover = json.loads((tmp_path / "pred" / "coverage.json").read_text())
    assert len(cover) == 5

    assert main(["upscale", "--chain", str(cal), "--n-samples", "12", "--reality",
                 "--out", str(tmp_path / "up")]) == EXIT_OK
    summary = json.loads((tmp_path / "up" / "summary.json").read_text())
    assert summary["n_ok"] + summary["n_failed"] == 12
    assert summary["reality_capture"] == pytest.approx(0.844, abs=0.01)
    with open(tmp_path / "up" / "bands.csv") as fh:
        assert next(csv.reader(fh)) == ["z", "t", "T_lo", "T_med", "T_hi", "p_lo", "p_med", "p_hi"]
    with open(tmp_path / "up" / "capture.csv") as fh:
        assert len(list(csv.reader(fh))) == 13


def test_exit_codes(dataset, tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 2}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["calibrate", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["calibrate"])
    assert info.value.code == EXIT_USAGE

    # a chain stuck in an unsolvable region aborts with the numerical exit code
    import dyndisc.calibration as cal
    from dyndisc.dynamics import SolverFailure

    real = cal.solve_sorbent
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 5:
            raise SolverFailure("stub", 1)
        return real(*a, **k)

    monkeypatch.setattr(cal, "solve_sorbent", flaky)
    cfg = tmp_path / "mcmc.json"
    cfg.write_text(json.dumps({"schema_version": 1, "n_iter": 3000, "n_burn": 100, "failure_window": 50}))
    rc = main(["calibrate", "--data", str(dataset), "--config", str(cfg), "--no-discrepancy",
               "--out", str(tmp_path / "z"), "--workers", "1"])
    assert rc == EXIT_NUMERIC


def test_log_level_env(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("DYNDISC_LOG", "nonsense")
    assert main(["gen-data", "--out", str(tmp_path)]) == EXIT_OK
