import csv
import json

import pytest

from photonic_engine.cli import EXIT_CONFIG, EXIT_CRITERION, EXIT_OK, main


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def fanout_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    codes = [main(["fanout", "--seed", "7", "--out", str(d)]) for d in (a, b)]
    return codes, a, b


class TestFanout:
    def test_uniformity_trajectory(self, fanout_runs):
        codes, a, _ = fanout_runs
        assert codes == [EXIT_OK, EXIT_OK]
        traj = rows(a / "uniformity_trajectory.csv")
        assert len(traj) == 13
        assert float(traj[-1]["sigma_pkpk"]) <= 0.01

    def test_byte_identical_reruns(self, fanout_runs):
        _, a, b = fanout_runs
        assert snapshot(a) == snapshot(b)

    def test_manifest(self, fanout_runs):
        _, a, _ = fanout_runs
        m = json.loads((a / "manifest.json").read_text())
        assert m["seed"] == 7
        assert len(m["config_sha256"]) == 64
        assert set(m["versions"]) == {"photonic_engine", "numpy", "scipy"}
        assert "uniformity_trajectory.csv" in m["scenarios"]["fanout"]["files"]
        assert all(c["passed"] for c in m["scenarios"]["fanout"]["criteria"])


@pytest.mark.slow
def test_steer_hex(tmp_path):
    assert main(["steer", "--pattern", "hex", "--seed", "7", "--out", str(tmp_path), "--strict"]) == EXIT_OK
    res = rows(tmp_path / "residuals.csv")
    last = max(int(r["iteration"]) for r in res)
    assert last <= 4
    assert all(float(r["residual_px"]) < 0.5 for r in res if int(r["iteration"]) == last)
    fill = rows(tmp_path / "fill_factor.csv")
    assert [round(float(r["eta_o"]), 3) for r in fill] == [0.05, 0.2, 0.707]


@pytest.mark.slow
def test_lock_pulse_report(tmp_path):
    assert main(["lock", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    dev = [abs(float(r["deviation"])) for r in rows(tmp_path / "pulse_report.csv")]
    assert max(dev) < 0.01
    control = [abs(float(r["deviation"])) for r in rows(tmp_path / "control_report.csv")]
    assert max(control) > 0.01


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("channels:\n  v_pi: -1\n  nonsense: 3\n")
        assert main(["fanout", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "channels.v_pi" in err and "channels.nonsense" in err

    def test_criterion_violation_strict(self, tmp_path, capsys):
        cfg = tmp_path / "tight.yaml"
        cfg.write_text("fanout:\n  iterations: 0\n  slm_size: 64\n  gs_iterations: 20\nthresholds:\n  sigma_pkpk: 1.0e-6\n")
        args = ["fanout", "--config", str(cfg), "--out", str(tmp_path / "o")]
        assert main(args + ["--strict"]) == EXIT_CRITERION
        assert "fanout.sigma_pkpk" in capsys.readouterr().err
        assert main(args) == EXIT_OK

    def test_unknown_scenario(self):
        with pytest.raises(SystemExit) as info:
            main(["teleport"])
        assert info.value.code == 2
