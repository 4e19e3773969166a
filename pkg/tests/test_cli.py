import copy
import csv
import json

import numpy as np
import pytest

from nmsse.cli import main
from nmsse.config import build, config_hash
from nmsse.ensemble import run_ensemble

REF_PAIR = {"x": [{"type": "white", "weight": 0.5}], "y": [{"type": "exp", "c": 1.0, "a": 1.0}]}


def config(**over):
    c = {
        "model": {"type": "spin_boson", "omega": 1.0, "g": 1.0},
        "noise": copy.deepcopy(REF_PAIR),
        "grid": {"t_max": 1.0, "dt": 0.005},
        "ensemble": {"n_trajectories": 256, "master_seed": 11, "integrator": "em_ito", "n_snapshots": 10},
        "experiment": {},
    }
    for key, val in over.items():
        c[key] = val
    return c


def run(tmp_path, cmd, cfg, *extra, name="out"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main([cmd, "--config", str(path), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def test_simulate_zero_noise(tmp_path):
    cfg = config(noise={"x": [], "y": []},
                 ensemble={"n_trajectories": 10, "master_seed": 1, "integrator": "heun_strat"})
    code, out = run(tmp_path, "simulate", cfg)
    assert code == 0
    header, rows = read_csv(out / "ensemble_stats.csv")
    assert header[:3] == ["t", "mean_norm_sq", "se_norm_sq"] and header[-1] == "raw_trace"
    assert "rho_re_01" in header and "rho_im_10" in header
    assert all(abs(r[1] - 1) <= 1e-8 for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "simulate" and manifest["config_hash"] == config_hash(cfg)


def test_simulate_csv_is_round_trip_exact(tmp_path):
    cfg = config()
    code, out = run(tmp_path, "simulate", cfg, "--workers", "1")
    assert code == 0
    ecfg, _ = build(cfg)
    st = run_ensemble(ecfg, workers=1)
    header, rows = read_csv(out / "ensemble_stats.csv")
    col = header.index("mean_norm_sq")
    assert [r[col] for r in rows] == st.mean_norm_sq.tolist()
    col = header.index("rho_im_01")
    assert [r[col] for r in rows] == st.rho[:, 0, 1].imag.tolist()
    se = np.array([r[2] for r in rows])
    assert np.all(np.abs(np.array([r[1] for r in rows]) - 1) <= 3 * se + 1e-12)


def test_outputs_identical_across_workers(tmp_path):
    cfg = config()
    _, a = run(tmp_path, "simulate", cfg, "--workers", "1", name="a")
    _, b = run(tmp_path, "simulate", cfg, "--workers", "2", name="b")
    assert (a / "ensemble_stats.csv").read_bytes() == (b / "ensemble_stats.csv").read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    ma.pop("wall_time"), mb.pop("wall_time")
    assert ma == mb


def test_env_workers(tmp_path, monkeypatch):
    monkeypatch.setenv("NMSSE_WORKERS", "2")
    code, _ = run(tmp_path, "simulate", config())
    assert code == 0


def test_seed_override(tmp_path):
    cfg = config()
    _, a = run(tmp_path, "simulate", cfg, name="a")
    _, b = run(tmp_path, "simulate", cfg, "--seed", "12", name="b")
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["master_seed"] == 11 and mb["master_seed"] == 12
    assert ma["config_hash"] != mb["config_hash"]
    assert (a / "ensemble_stats.csv").read_bytes() != (b / "ensemble_stats.csv").read_bytes()


def test_config_hash_is_canonical():
    a = config()
    b = json.loads(json.dumps(a, sort_keys=False, indent=4))
    b = dict(reversed(list(b.items())))
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64


@pytest.mark.parametrize("mutate", [
    lambda c: c["grid"].update(dt=0.3),
    lambda c: c["noise"]["y"].append({"type": "exp", "c": -1.0, "a": 1.0}),
    lambda c: c["noise"]["x"].append({"type": "exp", "c": 1.0, "a": 1.0}),
    lambda c: c["ensemble"].update(integrator="rk4"),
    lambda c: c.pop("grid"),
    lambda c: c.update(extra=1),
    lambda c: c["model"].update(type="ising"),
    lambda c: c["experiment"].update(kind="convergence"),
])
def test_config_errors_exit_2(tmp_path, mutate):
    cfg = config()
    mutate(cfg)
    code, _ = run(tmp_path, "simulate", cfg)
    assert code == 2


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


def test_abort_exit_4(tmp_path):
    cfg = config(model={"type": "custom", "H": [[0, 0], [0, 0]], "L": [[40, 0], [0, -40]], "psi0": [1, 0]},
                 noise={"x": [{"type": "exp", "c": 4.0, "a": 0.1}]},
                 grid={"t_max": 20.0, "dt": 0.01},
                 ensemble={"n_trajectories": 64, "master_seed": 1, "integrator": "heun_strat"})
    code, _ = run(tmp_path, "simulate", cfg)
    assert code == 4


def branch_config(noise, model, expected, integrator="em_ito"):
    return config(model=model, noise=noise, grid={"t_max": 1.0, "dt": 0.005},
                  ensemble={"n_trajectories": 1, "master_seed": 5, "integrator": integrator},
                  experiment={"expected_verdict": expected,
                              "branch": {"s": 0.5, "m": 200, "n_prefixes": 16, "offsets": [0.1, 0.5]}})


def test_martingale_pass_expected_pass(tmp_path):
    cfg = branch_config(REF_PAIR, {"type": "spin_boson"}, "pass")
    code, out = run(tmp_path, "martingale-test", cfg)
    assert code == 0
    report = json.loads((out / "branching_report.json").read_text())
    assert report["verdict"] == "PASS" and report["n_prefixes"] == 16


def test_martingale_mismatch_exit_3(tmp_path):
    cfg = branch_config(REF_PAIR, {"type": "spin_boson"}, "fail")
    code, out = run(tmp_path, "martingale-test", cfg)
    assert code == 3
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 3


def test_martingale_expected_fail_with_oracle(tmp_path):
    cfg = branch_config({"x": [{"type": "exp", "c": 1.0, "a": 1.0}]}, {"type": "dephasing"}, "fail",
                        integrator="dephasing_exact")
    code, out = run(tmp_path, "martingale-test", cfg)
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verdicts"]["branching"] == "FAIL"
    header, rows = read_csv(out / "branching_summary.csv")
    assert header == ["t", "mc_ratio", "oracle_ratio", "oracle_z"]
    assert all(abs(r[3]) <= 3 for r in rows)
    header, rows = read_csv(out / "branching.csv")
    assert len(rows) == 32 and all(np.isfinite(r[header.index("oracle")]) for r in rows)


def test_martingale_needs_branch(tmp_path):
    cfg = config()
    assert run(tmp_path, "martingale-test", cfg)[0] == 2
    cfg = branch_config(REF_PAIR, {"type": "spin_boson"}, "pass")
    cfg["experiment"]["branch"]["m"] = 10
    assert run(tmp_path, "martingale-test", cfg)[0] == 2


def test_validate_noise(tmp_path):
    code, out = run(tmp_path, "validate-noise", config())
    assert code == 0
    rep = json.loads((out / "noise_validation.json").read_text())
    assert rep["accepted"] and rep["kappa"] == 1.0 and rep["residual"] == 0.0
    bad = config(noise={"x": [{"type": "white", "weight": 0.5}], "y": [{"type": "exp", "c": -1.0, "a": 1.0}]})
    code, out = run(tmp_path, "validate-noise", bad, name="bad")
    assert code == 2
    assert not json.loads((out / "noise_validation.json").read_text())["accepted"]


def test_validate_noise_statistics(tmp_path):
    cfg = config(grid={"t_max": 4.0, "dt": 0.02},
                 experiment={"n_realizations": 2000, "lags": [0.0, 0.2, 0.5, 1.0, 2.0]})
    code, out = run(tmp_path, "validate-noise", cfg)
    assert code == 0
    header, rows = read_csv(out / "noise_statistics.csv")
    assert header[0] == "lag" and len(rows) == 5


def test_compare_gksl_white_dephasing(tmp_path):
    cfg = config(model={"type": "dephasing"}, noise={"x": [{"type": "white", "weight": 0.5}]},
                 ensemble={"n_trajectories": 2000, "master_seed": 3, "integrator": "em_ito"})
    code, out = run(tmp_path, "compare-gksl", cfg)
    assert code == 0
    header, rows = read_csv(out / "gksl_comparison.csv")
    assert header == ["t", "trace_distance", "se", "envelope"]
    assert all(r[1] <= r[3] + 1e-8 for r in rows)


def test_compare_gksl_memory_expected_fail(tmp_path):
    cfg = config(model={"type": "dephasing"}, grid={"t_max": 2.0, "dt": 0.01},
                 ensemble={"n_trajectories": 8000, "master_seed": 3, "integrator": "dephasing_exact"},
                 experiment={"gksl_rate": 1.0, "expected_verdict": "fail"})
    code, out = run(tmp_path, "compare-gksl", cfg)
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["verdicts"]["gksl"] == "FAIL"


@pytest.mark.slow
def test_convergence_em_order(tmp_path):
    cfg = config(grid={"t_max": 2.0, "dt": 0.0025},
                 ensemble={"n_trajectories": 20000, "master_seed": 2, "integrator": "em_ito"},
                 experiment={"dt_levels": [0.02, 0.01, 0.005, 0.0025], "expected_order": [0.7, 1.3]})
    code, out = run(tmp_path, "convergence", cfg)
    assert code == 0
    header, rows = read_csv(out / "convergence.csv")
    assert header == ["dt", "mean", "se", "diff", "diff_se"] and len(rows) == 4


def test_convergence_needs_levels(tmp_path):
    assert run(tmp_path, "convergence", config())[0] == 2
    cfg = config(experiment={"dt_levels": [0.01, 0.005]})
    assert run(tmp_path, "convergence", cfg)[0] == 2


def test_bad_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["plot", "--config", "x.json"])
    assert exc.value.code == 2
