import json
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dkobs.errors import ConfigError, InternalInvariantViolation, IoError, StepError, UnobservableScenario
from dkobs.harness.cli import main
from dkobs.harness.config import (
    ScenarioConfig,
    config_from_dict,
    format_config,
    load_config,
    parse_config_text,
)
from dkobs.harness.export import (
    CSV_HEADER,
    SCHEMA,
    export,
    load_run_config,
    read_json,
    read_trace_csv,
    summarize,
    write_trace_csv,
)
from dkobs.harness.scenario import generate_scenario
from dkobs.harness.simulate import Simulation, run
from dkobs.model import is_observable

from _support import reference_config

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CFG = ROOT / "configs" / "default.cfg"
GOLDEN = Path(__file__).parent / "data" / "summary_golden.json"


def small(**kw) -> ScenarioConfig:
    """Four agents, a short horizon: fast enough for every plumbing test."""
    base = dict(n_agents=4, n_anchors=2, steps=25, seed=7, radius=6.0)
    base.update(kw)
    return reference_config(**base)


# -- configuration -------------------------------------------------------------------


class TestConfig:
    def test_defaults(self):
        c = ScenarioConfig()
        assert (c.n_agents, c.n_anchors, c.Ts, c.eps) == (10, 3, 0.05, 1.0)
        assert (c.alpha_r, c.rho, c.alpha, c.h_iters) == (0.05, 1.0, 0.95, 1)
        np.testing.assert_allclose(c.gamma_diag, [math.exp(-0.25)] * 2 + [math.exp(-2.5)] * 2)
        np.testing.assert_array_equal(c.p0_diag, [1.0, 1.0, 0.1, 0.1])
        assert (c.weight_local, c.weight_relative) == (0.2, 2.0)

    def test_inverse_reading(self):
        c = ScenarioConfig(r_as_inverse=True)
        assert (c.weight_local, c.weight_relative) == pytest.approx((5.0, 0.5))

    def test_shipped_file(self):
        c = load_config(DEFAULT_CFG)
        assert c.r_as_inverse and c.weight_local == pytest.approx(5.0)
        assert c.solver == "admm" and c.forgetting == "matrix" and c.steps == 6000

    def test_round_trip(self):
        c = ScenarioConfig(gamma=0.7, edges="0-1, 2-3", bidirectional=False, eps=0.3, seed=2**63 + 5)
        assert parse_config_text(format_config(c)) == c
        assert config_from_dict(c.to_dict()) == c

    def test_comments_and_whitespace(self):
        c = parse_config_text("# comment\n  steps = 12   # trailing\nsolver=centralized\n")
        assert c.steps == 12 and c.solver == "centralized"

    @pytest.mark.parametrize(
        "text",
        [
            "stpes = 3",  # typo in a key
            "steps = three",
            "bidirectional = maybe",
            "n_anchors = 11",
            "alpha = 1.0",
            "eps = 1.5",
            "solver = gauss",
            "gamma = 1.2",
            "p0 = 1, 1, 0.1",
            "edges = 0:1",
            "steps = -1",
        ],
    )
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_missing_file_names_path(self, tmp_path):
        p = tmp_path / "nope.cfg"
        with pytest.raises(ConfigError, match="nope.cfg"):
            load_config(p)

    def test_overrides(self):
        c = ScenarioConfig().with_overrides(seed=3, solver=None)
        assert c.seed == 3 and c.solver == "admm"
        with pytest.raises(ConfigError):
            ScenarioConfig().with_overrides(colour="blue")

    def test_digest(self):
        assert ScenarioConfig().digest() == ScenarioConfig().digest()
        assert ScenarioConfig().digest() != ScenarioConfig(seed=1).digest()

    def test_edge_list(self):
        assert ScenarioConfig(edges="0-1; 1-2").edge_list == [(0, 1), (1, 2)]
        assert ScenarioConfig().edge_list is None


# -- scenario ------------------------------------------------------------------------


class TestScenario:
    def test_deterministic(self):
        a, b = generate_scenario(ScenarioConfig()), generate_scenario(ScenarioConfig())
        assert a.x0.tobytes() == b.x0.tobytes()
        assert a.x_hat0.tobytes() == b.x_hat0.tobytes()
        assert a.topology.sensing_edges == b.topology.sensing_edges
        assert a.topology.anchors == b.topology.anchors

    def test_solver_choice_does_not_move_scenario(self):
        a = generate_scenario(ScenarioConfig(solver="admm"))
        b = generate_scenario(ScenarioConfig(solver="richardson", noise_local=0.1, alpha_r=0.01))
        assert a.x0.tobytes() == b.x0.tobytes() and a.positions.tobytes() == b.positions.tobytes()
        assert a.topology.sensing_edges == b.topology.sensing_edges

    def test_seed_changes_scenario(self):
        assert not np.array_equal(generate_scenario(ScenarioConfig()).x0, generate_scenario(ScenarioConfig(seed=1)).x0)

    def test_anchor_count(self):
        sc = generate_scenario(ScenarioConfig())
        assert len(sc.topology.anchors) == 3

    def test_all_anchored_no_edges(self):
        sc = generate_scenario(ScenarioConfig(n_anchors=10, radius=0.0))
        assert sc.topology.comm_edges == ()
        assert len(sc.topology.anchors) == 10
        assert is_observable(sc.model, 2)

    def test_explicit_edges(self):
        sc = generate_scenario(ScenarioConfig(n_agents=3, n_anchors=1, edges="0-1, 1-2"))
        assert sc.topology.comm_edges == ((0, 1), (1, 2))

    def test_unobservable_gives_up(self):
        with pytest.raises(UnobservableScenario):
            generate_scenario(ScenarioConfig(n_anchors=0, max_retries=2))

    def test_initial_estimate_perturbed_by_prior(self):
        sc = generate_scenario(ScenarioConfig())
        err = (sc.x_hat0 - sc.x0).reshape(10, 4)
        assert np.all(err != 0)
        # velocity variance 0.1 versus position variance 1
        assert np.std(err[:, 2:]) < np.std(err[:, :2])


# -- simulation ----------------------------------------------------------------------


class TestRun:
    def test_zero_steps(self):
        tr = run(small(steps=0))
        assert tr.steps == 0 and tr.err_state_norm.shape == (0,)

    def test_lengths_and_finiteness(self):
        tr = run(small())
        for a in (tr.err_state_norm, tr.err_corr_norm, tr.lyapunov_v, tr.dist_qeq):
            assert a.shape == (25,) and np.all(np.isfinite(a))
        assert tr.err_agents.shape == (25, 4)
        assert tr.err_state_norm[0] == pytest.approx(tr.initial_err_norm)

    def test_centralized_has_exact_correction(self):
        tr = run(small(solver="centralized"))
        assert not np.any(tr.err_corr_norm) and not np.any(tr.dist_qeq)
        np.testing.assert_allclose(tr.err_state_norm, tr.baseline_err_norm, rtol=0, atol=0)

    def test_baseline_is_solver_independent(self):
        cfgs = [small(solver=s, noise_local=0.05, noise_relative=0.05) for s in ("admm", "richardson", "admm_direct")]
        base = [run(c).baseline_err_norm for c in cfgs]
        assert base[0].tobytes() == base[1].tobytes() == base[2].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the divergence is the point
    def test_step_error_carries_index(self):
        with pytest.raises(StepError) as exc:
            run(small(solver="richardson", alpha_r=50.0, steps=400))
        assert exc.value.k > 0

    def test_callback_sees_every_step(self):
        seen = []
        run(small(steps=5), callback=lambda r, sim: seen.append((r.k, sim.k)))
        assert seen == [(k, k + 1) for k in range(5)]

    def test_simulation_is_steppable(self):
        cfg = small()
        sim = Simulation(cfg)
        recs = [sim.step() for _ in range(cfg.steps)]
        tr = run(cfg)
        np.testing.assert_array_equal([np.linalg.norm(r.x_tilde) for r in recs], tr.err_state_norm)


# -- export --------------------------------------------------------------------------


class TestExport:
    def test_header_only_for_empty_trace(self, tmp_path):
        p = write_trace_csv(run(small(steps=0)), tmp_path / "t.csv")
        assert p.read_text() == ",".join(CSV_HEADER) + "\n"

    def test_csv_round_trip_is_exact(self, tmp_path):
        tr = run(small())
        cols = read_trace_csv(write_trace_csv(tr, tmp_path / "t.csv"))
        np.testing.assert_array_equal(cols["k"], np.arange(25))
        for name in CSV_HEADER[1:5]:
            assert cols[name].tobytes() == getattr(tr, name).tobytes()
        assert set(cols["solver"]) == {"admm"} and set(cols["seed"]) == {7}

    def test_export_and_summary_round_trip(self, tmp_path):
        tr = run(small())
        paths = export(tr, tmp_path / "run")
        assert sorted(p.name for p in paths.values()) == ["config.cfg", "summary.json", "trace.csv"]
        assert read_json(paths["summary"]) == json.loads(json.dumps(summarize(tr)))
        assert load_run_config(tmp_path / "run") == tr.config

    def test_summary_of_empty_run(self):
        s = summarize(run(small(steps=0)))
        assert s["steps"] == 0 and s["max_err_corr_norm"] is None
        assert all(v is None for v in s["final"].values())

    def test_golden_summary(self):
        s = json.loads(json.dumps(summarize(run(small()))))
        s["wall_time"] = 0.0
        golden = json.loads(GOLDEN.read_text())
        assert s["schema"] == golden["schema"] == SCHEMA
        assert _flatten(s).keys() == _flatten(golden).keys()
        for key, want in _flatten(golden).items():
            got = _flatten(s)[key]
            if isinstance(want, float):
                assert got == pytest.approx(want, rel=1e-9), key
            else:
                assert got == want, key

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoError):
            export(run(small(steps=2)), blocker / "sub")
        with pytest.raises(IoError):
            write_trace_csv(run(small(steps=2)), blocker / "t.csv")

    def test_non_finite_refused(self, tmp_path):
        tr = run(small(steps=3))
        bad = replace(tr, lyapunov_v=np.array([1.0, np.nan, 2.0]))
        with pytest.raises(InternalInvariantViolation):
            write_trace_csv(bad, tmp_path / "t.csv")

    def test_read_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(IoError):
            read_trace_csv(p)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


# -- command line --------------------------------------------------------------------


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(format_config(small(steps=40)))
    return p


class TestCli:
    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["simulate", "--bogus"], ["sweep", "--param", "rho"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 2
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("cmd", [[], ["simulate"], ["analyze"], ["sweep"]])
    def test_help(self, cmd, capsys):
        assert main([*cmd, "--help"]) == 0
        assert "usage" in capsys.readouterr().out

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "absent.cfg"
        assert main(["simulate", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_simulate(self, small_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(small_cfg), "--steps", "30", "--out", str(out)]) == 0
        lines = (out / "trace.csv").read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 31
        assert read_json(out / "summary.json")["steps"] == 30

    def test_analyze_centralized(self, small_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(small_cfg), "--solver", "centralized", "--out", str(out)]) == 0
        assert main(["analyze", "--trace", str(out)]) == 0
        rep = read_json(out / "analysis.json")
        assert rep["lyapunov"]["applies"]
        assert rep["lyapunov"]["max_ratio"] <= rep["lyapunov"]["gamma"]
        assert rep["error_dynamics"]["passed"]
        assert read_json(out / "summary.json")["analysis"]["lyapunov_passed"] is True

    def test_analyze_admm(self, small_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(small_cfg), "--out", str(out)]) == 0
        assert main(["analyze", "--trace", str(out), "--operators", "5"]) == 0
        rep = read_json(out / "analysis.json")
        assert rep["kernel"]["invariant"]
        assert rep["contraction"]["mu"] < 1
        assert {"matrix", "spectral_radius", "schur", "eps_bound"} <= set(rep["certificate"])
        assert rep["error_dynamics"]["passed"]

    def test_analyze_without_trace(self, tmp_path, capsys):
        assert main(["analyze", "--trace", str(tmp_path / "none")]) == 1
        assert "none" in capsys.readouterr().err

    def test_sweep(self, small_cfg, tmp_path, capsys):
        out = tmp_path / "sw"
        assert main(["sweep", "--param", "H_iters", "--values", "1,3", "--config", str(small_cfg), "--out", str(out)]) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[0].split()[0] == "h_iters" and len(table) == 3
        rows = (out / "sweep.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["1", "3"]

    def test_sweep_unknown_param(self, small_cfg, capsys):
        assert main(["sweep", "--param", "warp", "--values", "1", "--config", str(small_cfg)]) == 1
        assert "warp" in capsys.readouterr().err

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "dkobs.harness.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "simulate" in res.stdout
