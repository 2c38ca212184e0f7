import json
import subprocess
import sys

import numpy as np
import pytest

from mldoa import cli
from mldoa.cli import COLUMNS, load_config, main, parse_config, read_table, write_table
from mldoa.errors import ConfigError, NumericalError, RegimeError

SMALL = {
    "scenario": {"elements": 8, "doas": [-20.0, 25.0], "units": "degrees", "snapshots": 20},
    "methods": ["CML", "UML"],
    "snr_db": [-5.0, 5.0],
    "trials": 300,
    "seed": 3,
    "qmc_budget": 4096,
    "search": {"starts": 40},
    "mse": {"starts": 8, "trials": 40},
    "validate": {"clt_trials": 300},
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def run_cli(tmp_path, command, data, *extra, out="out"):
    cfg = write_config(tmp_path, data)
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def with_(base, **kw):
    d = json.loads(json.dumps(base))
    d.update(kw)
    return d


class TestConfig:
    def test_defaults(self):
        cfg = parse_config({"scenario": {"elements": 10, "doas": [16, 18, 60, -50], "snapshots": 100}})
        assert cfg.methods == ["CML", "UML"]
        assert cfg.snr_db == [0.0]
        assert cfg.trials == 0
        assert np.all(np.diff(cfg.scenario.doas) > 0)
        assert cfg.scenario.doas[0] == pytest.approx(np.pi * np.sin(np.deg2rad(-50)))

    def test_radians(self):
        cfg = parse_config({"scenario": {"elements": 6, "doas": [0.4, -1.0], "units": "radians", "snapshots": 5}})
        assert np.allclose(cfg.scenario.doas, [-1.0, 0.4])

    def test_correlation_follows_sort(self):
        corr = [[1, 0.5], [0.5, 1]]
        corr_c = [[[1, 0], [0.3, 0.4]], [[0.3, -0.4], [1, 0]]]
        cfg = parse_config({"scenario": {"elements": 6, "doas": [0.4, -1.0], "units": "radians",
                                         "snapshots": 5, "correlation": corr_c}})
        # the source listed first (0.4) moves to index 1 after sorting
        assert cfg.scenario.correlation[1, 0] == pytest.approx(0.3 + 0.4j)
        cfg = parse_config({"scenario": {"elements": 6, "doas": [0.4, -1.0], "units": "radians",
                                         "snapshots": 5, "correlation": corr}})
        assert np.allclose(cfg.scenario.correlation, corr)

    def test_boundary_regime(self):
        with pytest.raises(RegimeError, match="boundary regime"):
            parse_config({"scenario": {"elements": 6, "doas": [10, 20], "snapshots": 2}})

    @pytest.mark.parametrize("patch, field", [
        ({"snr_db": [5, 0]}, "snr_db"),
        ({"snr_db": []}, "snr_db"),
        ({"methods": ["MUSIC"]}, "methods"),
        ({"trials": -1}, "trials"),
        ({"trials": 2.5}, "trials"),
        ({"qmc_budget": 10}, "qmc_budget"),
        ({"search": {"eps": -1}}, "eps"),
        ({"validate": {"tolerances": {"nope": 1}}}, "tolerances"),
        ({"seed": -4}, "seed"),
    ])
    def test_rejects(self, patch, field):
        with pytest.raises(ConfigError, match=field):
            parse_config(with_(SMALL, **patch))

    @pytest.mark.parametrize("scen, field", [
        ({"doas": [10], "snapshots": 4}, "elements"),
        ({"elements": 4, "doas": [10, 20, 30, 40], "snapshots": 10}, "elements"),
        ({"elements": 4, "doas": [95], "snapshots": 10}, "doas"),
        ({"elements": 4, "doas": [10.0, 10.1], "snapshots": 10}, "doas"),
        ({"elements": 4, "doas": [10], "snapshots": 10, "units": "grad"}, "units"),
        ({"elements": 4, "doas": [10, 20], "snapshots": 10, "correlation": [[1, 0]]}, "correlation"),
    ])
    def test_rejects_scenario(self, scen, field):
        with pytest.raises(ConfigError, match=field):
            parse_config({"scenario": scen})

    def test_invalid_json_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "scenario": {\n    "elements": 8,\n  }\n}')
        with pytest.raises(ConfigError, match="line 4"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")


class TestTable:
    def test_round_trip(self, tmp_path, rng):
        rows = [{"method": "CML", "snr_db": float(s), "p_res_pred": float(rng.random()),
                 "p_res_err": float(rng.random() * 1e-7), "p_res_emp": None, "ci_lo": 1 / 3,
                 "ci_hi": float(np.nextafter(1.0, 0.0)), "mse_pred": float(rng.lognormal()),
                 "mse_emp": float("nan"), "L_minima": int(rng.integers(0, 9))}
                for s in rng.normal(size=5)]
        path = tmp_path / "t.csv"
        write_table(path, rows)
        back = read_table(path)
        assert path.read_text().splitlines()[0] == ",".join(COLUMNS)
        for a, b in zip(rows, back):
            for c in COLUMNS:
                if a[c] is None or (isinstance(a[c], float) and np.isnan(a[c])):
                    assert b[c] is None
                else:
                    assert b[c] == a[c]
                    assert type(b[c]) is type(a[c])


class TestPredict:
    def test_single_snr(self, tmp_path):
        code, out = run_cli(tmp_path, "predict", with_(SMALL, snr_db=[0.0], methods=["CML"]))
        assert code == 0
        rows = read_table(out / "predict.csv")
        assert len(rows) == 1
        r = rows[0]
        assert 0 <= r["p_res_pred"] <= 1
        assert r["p_res_emp"] is None and r["mse_emp"] is None
        assert r["L_minima"] >= 0 and r["mse_pred"] > 0

    def test_monotone_reference_scenario(self, tmp_path):
        data = {"scenario": {"elements": 10, "doas": [16, 18, 60, -50], "snapshots": 100},
                "methods": ["CML"], "snr_db": [-10, -5, 0, 5], "search": {"starts": 150}}
        code, out = run_cli(tmp_path, "predict", data)
        assert code == 0
        rows = read_table(out / "predict.csv")
        p = np.array([r["p_res_pred"] for r in rows])
        err = np.array([r["p_res_err"] for r in rows])
        assert np.all(np.diff(p) >= -3 * (err[1:] + err[:-1]))
        assert p[-1] > p[0]

    def test_boundary_regime_exit(self, tmp_path, capsys):
        data = with_(SMALL, scenario={"elements": 8, "doas": [-20.0, 25.0], "snapshots": 2})
        code, _ = run_cli(tmp_path, "predict", data)
        assert code == 2
        assert "boundary regime unsupported" in capsys.readouterr().err

    def test_invalid_json_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{"scenario": [1,\n 2')
        assert main(["predict", "--config", str(p)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_numerical_failure_exit(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **kw):
            raise NumericalError("manifold degenerate")
        monkeypatch.setattr(cli, "analyze", boom)
        code, _ = run_cli(tmp_path, "predict", SMALL)
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_sidecar(self, tmp_path):
        code, out = run_cli(tmp_path, "predict", with_(SMALL, methods=["UML"]), "--seed", "9", "--threads", "2")
        meta = json.loads((out / "predict.json").read_text())
        assert meta["seed"] == 9 and meta["threads"] == 2
        assert meta["config"]["scenario"]["elements"] == 8
        assert {"mldoa", "numpy", "scipy", "python"} <= set(meta["versions"])
        assert meta["timings_s"]["total"] > 0
        assert len(meta["rows"]) == 2


class TestSimulate:
    def test_deterministic(self, tmp_path):
        data = with_(SMALL, methods=["CML"])
        code_a, a = run_cli(tmp_path, "simulate", data, out="a")
        code_b, b = run_cli(tmp_path, "simulate", data, "--threads", "3", out="b")
        assert code_a == code_b == 0
        assert (a / "simulate.csv").read_text() == (b / "simulate.csv").read_text()
        rows = read_table(a / "simulate.csv")
        for r in rows:
            assert r["p_res_pred"] is None
            assert 0 <= r["p_res_emp"] <= 1

    def test_needs_trials(self, tmp_path, capsys):
        code, _ = run_cli(tmp_path, "simulate", with_(SMALL, trials=0))
        assert code == 2
        assert "trials" in capsys.readouterr().err

    def test_sweep_high_snr_agreement(self, tmp_path):
        code, out = run_cli(tmp_path, "sweep", with_(SMALL, snr_db=[20.0]))
        assert code == 0
        for r in read_table(out / "sweep.csv"):
            assert abs(r["p_res_pred"] - r["p_res_emp"]) <= 0.05
            assert r["p_res_emp"] >= 0.95


class TestOtherCommands:
    def test_minima(self, tmp_path):
        code, out = run_cli(tmp_path, "minima", with_(SMALL, methods=["CML"], snr_db=[0.0]))
        assert code == 0
        rows = read_table(out / "minima.csv")
        assert [r["index"] for r in rows] == list(range(len(rows)))
        assert sum(r["global"] for r in rows) == 1.0
        costs = [r["cost"] for r in rows]
        assert costs == sorted(costs)
        assert {"theta_1", "theta_2"} <= set(rows[0])

    def test_mse(self, tmp_path):
        code, out = run_cli(tmp_path, "mse", with_(SMALL, methods=["CML"], snr_db=[10.0]))
        assert code == 0
        r = read_table(out / "mse.csv")[0]
        assert r["mse_emp"] >= 0 and r["mse_pred"] > 0
        meta = json.loads((out / "mse.json").read_text())
        assert meta["rows"][0]["mse_fail_fraction"] == 0.0


class TestValidate:
    def test_passes(self, tmp_path, capsys):
        code, out = run_cli(tmp_path, "validate", SMALL)
        printed = capsys.readouterr().out
        assert code == 0, printed
        rows = read_table(out / "validate.csv")
        names = {r["check"] for r in rows}
        assert {"prop1_contour", "eta_bar_cml_contour", "eta_bar_uml_contour", "gamma_c_oracle",
                "gamma1_oracle", "gamma2_oracle", "clt_mean_cml", "clt_mean_uml"} == names
        assert all(r["seconds"] >= 0 for r in rows)
        assert printed.count("PASS") == len(rows)

    def test_undersampled_passes(self, tmp_path):
        data = with_(SMALL, scenario={"elements": 8, "doas": [-20.0, 0.0, 25.0], "snapshots": 2})
        code, _ = run_cli(tmp_path, "validate", data)
        assert code == 0

    def test_corrupted_tolerance(self, tmp_path, capsys):
        data = with_(SMALL, validate={"tolerances": {"gamma": -1.0}, "clt_trials": 300})
        code, out = run_cli(tmp_path, "validate", data)
        assert code == 4
        assert "FAIL gamma_c_oracle" in capsys.readouterr().out
        meta = json.loads((out / "validate.json").read_text())
        assert not all(c["passed"] for c in meta["checks"])


class TestThreads:
    def test_flag_overrides_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MLDOA_THREADS", "not-a-number")
        code, out = run_cli(tmp_path, "predict", with_(SMALL, methods=["CML"], snr_db=[0.0]), "--threads", "2")
        assert code == 0
        assert json.loads((out / "predict.json").read_text())["threads"] == 2

    def test_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MLDOA_THREADS", "3")
        code, out = run_cli(tmp_path, "predict", with_(SMALL, methods=["CML"], snr_db=[0.0]))
        assert json.loads((out / "predict.json").read_text())["threads"] == 3

    def test_bad_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MLDOA_THREADS", "0")
        code, _ = run_cli(tmp_path, "predict", SMALL)
        assert code == 2

    def test_bad_flag(self, tmp_path):
        code, _ = run_cli(tmp_path, "predict", SMALL, "--threads", "0")
        assert code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mldoa", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "validate" in res.stdout
