import csv
import json

import numpy as np
import pytest

from myoperf import io
from myoperf.cli import main
from myoperf.kinetics import AcquisitionConfig, SampledCurve, concentration_to_enhancement


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def outputs(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.name != "timing.json"}


@pytest.fixture(scope="module")
def stress_noise_free(tmp_path_factory):
    out = tmp_path_factory.mktemp("stress")
    assert main(["simulate", "--scenario", "stress", "--snr", "inf", "--out", str(out)]) == 0
    return out


def test_simulate_rest_layout(tmp_path):
    assert main(["simulate", "--scenario", "rest", "--seed", "3", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "curves.csv")
    assert len(rows) == 36 * 177
    assert list(rows[0]) == list(io.CURVES_HEADER)
    assert len(read_csv(tmp_path / "aif.csv")) == 177
    assert len(read_csv(tmp_path / "mask.csv")) == 36
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["config"]["scenario"] == "rest"
    assert "version" in manifest


def test_ischaemia_truth_values(tmp_path):
    assert main(["simulate", "--scenario", "ischaemia", "--out", str(tmp_path)]) == 0
    truth = read_csv(tmp_path / "truth.csv")
    assert {float(r["f_b"]) for r in truth} == {1.0, 3.5}
    assert {r["status"] for r in truth} == {"truth"}


def test_rows_sorted(tmp_path):
    main(["simulate", "--scenario", "stress", "--out", str(tmp_path)])
    keys = [(int(r["voxel_id"]), int(r["t_index"])) for r in read_csv(tmp_path / "curves.csv")]
    assert keys == sorted(keys)


def test_simulate_rerun_from_manifest_is_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenario", "ischaemia", "--seed", "5", "--out", str(first)]) == 0
    assert main(["simulate", "--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    assert outputs(first) == outputs(second)


def test_fit_nlls_noise_free(stress_noise_free, tmp_path):
    code = main(["fit", "--input", str(stress_noise_free), "--method", "nlls",
                 "--out", str(tmp_path)])
    assert code == 0
    f_b = np.array([float(r["f_b"]) for r in read_csv(tmp_path / "maps.csv")])
    assert f_b.size == 36
    np.testing.assert_allclose(f_b, 3.5, rtol=0.01)
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["failed_fraction"] == 0.0
    assert "wall_time_s" in json.loads((tmp_path / "timing.json").read_text())


def test_fit_bayes_writes_cov_and_rhat(stress_noise_free, tmp_path):
    code = main(["fit", "--input", str(stress_noise_free), "--method", "bayes", "--steps", "200",
                 "--burn-in", "50", "--dump-chains", "--out", str(tmp_path)])
    assert code == 0
    cov = read_csv(tmp_path / "cov.csv")
    assert len(cov) == 36
    assert all(float(v) >= 0 for row in cov for k, v in row.items() if k != "voxel_id")
    assert len(read_csv(tmp_path / "rhat.csv")) == 36
    assert len(read_csv(tmp_path / "chains.csv")) == 2 * 200 * 36
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert "converged" in stats and "acceptance_mean" in stats


def test_fit_rerun_identical_across_workers(stress_noise_free, tmp_path):
    args = ["fit", "--input", str(stress_noise_free), "--method", "bayes-nonhier", "--steps", "120",
            "--burn-in", "40"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(["fit", "--manifest", str(tmp_path / "a" / "manifest.json"), "--workers", "2",
                 "--out", str(tmp_path / "b")]) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_unknown_method_is_usage_error(stress_noise_free, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--input", str(stress_noise_free), "--method", "magic", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_missing_input_is_io_error(tmp_path):
    code = main(["fit", "--input", str(tmp_path / "nowhere"), "--method", "nlls", "--out", str(tmp_path / "o")])
    assert code == 4


def test_malformed_curves_report_line(stress_noise_free, tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("aif.csv", "mask.csv"):
        (bad / name).write_bytes((stress_noise_free / name).read_bytes())
    lines = (stress_noise_free / "curves.csv").read_text().splitlines()
    lines[3] = "0,2,0.024,abc"
    (bad / "curves.csv").write_text("\n".join(lines) + "\n")
    code = main(["fit", "--input", str(bad), "--method", "nlls", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "curves.csv:4" in capsys.readouterr().err


def test_evaluate_smoke(tmp_path):
    code = main(["evaluate", "--realizations", "2", "--method", "nlls", "--method", "bayes",
                 "--steps", "60", "--burn-in", "20", "--starts", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "nmse_report.csv")
    assert [r["parameter"] for r in rows] == ["All", "F_b", "v_p", "v_e", "PS"]
    for r in rows:
        values = [float(v) for k, v in r.items() if k != "parameter"]
        assert np.all(np.isfinite(values))
    assert "p_bayes_vs_nlls" in rows[0]


def test_evaluate_single_method_empty_p(tmp_path):
    code = main(["evaluate", "--realizations", "2", "--method", "nlls", "--starts", "2",
                 "--scenario", "stress", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "nmse_report.csv")
    assert all(r["p_value"] == "" for r in rows)


def test_evaluate_rerun_identical(tmp_path):
    args = ["evaluate", "--realizations", "2", "--method", "bayes", "--method", "bayes-nonhier",
            "--steps", "60", "--burn-in", "20"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(["evaluate", "--manifest", str(tmp_path / "a" / "manifest.json"), "--workers", "2",
                 "--out", str(tmp_path / "b")]) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def write_signal(path, ids, times, values):
    io.write_curves(path, ids, times, values, header=io.SIGNAL_HEADER)


def test_convert_constant_signal(tmp_path):
    times = np.arange(20) * 0.012
    write_signal(tmp_path / "s.csv", [0, 1], times, np.full((2, 20), 5.0))
    assert main(["convert", "--signal", str(tmp_path / "s.csv"), "--s-lv0", "2", "--out", str(tmp_path / "o")]) == 0
    _, _, conc = io.read_curves(tmp_path / "o" / "curves.csv")
    assert np.all(conc == 0)


def test_convert_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    times = np.arange(30) * 0.012
    signal = 100 + rng.random((3, 30)) * 50
    write_signal(tmp_path / "s.csv", [4, 7, 9], times, signal)
    assert main(["convert", "--signal", str(tmp_path / "s.csv"), "--s-lv0", "80", "--out", str(tmp_path / "o")]) == 0
    ids, t, conc = io.read_curves(tmp_path / "o" / "curves.csv")
    assert list(ids) == [4, 7, 9]
    written = np.array([[float(io.fmt(v)) for v in row] for row in signal])
    for row, s in zip(conc, written):
        enh = concentration_to_enhancement(SampledCurve(t, row), 80.0, AcquisitionConfig())
        # nine significant digits in the file bound the round-trip error
        np.testing.assert_allclose(enh, s - s[:5].mean(), atol=1e-6)


def test_convert_baseline_rows(tmp_path):
    times = np.arange(10) * 0.012
    signal = np.array([[1.0, 2, 3, 4, 5, 10, 10, 10, 10, 10]])
    write_signal(tmp_path / "s.csv", [0], times, signal)
    main(["convert", "--signal", str(tmp_path / "s.csv"), "--s-lv0", "1", "--out", str(tmp_path / "o")])
    _, _, conc = io.read_curves(tmp_path / "o" / "curves.csv")
    assert conc[0, 5] == pytest.approx(7 / (4.5 * 1.736), rel=1e-8)


def test_convert_needs_s_lv0(tmp_path):
    write_signal(tmp_path / "s.csv", [0], np.arange(10) * 0.012, np.ones((1, 10)))
    assert main(["convert", "--signal", str(tmp_path / "s.csv"), "--out", str(tmp_path / "o")]) == 2


def test_surface_small(tmp_path):
    assert main(["surface", "--dt", "0.05", "--out", str(tmp_path)]) == 0
    best = json.loads((tmp_path / "surface_min.json").read_text())
    assert (best["f_b"], best["tau0"]) == (1.0, 0.1)
    assert len(read_csv(tmp_path / "cost_surface.csv")) == 60 * 21
