"""Simulation loop binding scenario, observer and correction solver."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError

from ..analysis import EquilibriumTracker
from ..errors import DkobsError, InternalInvariantViolation, StepError
from ..model import Measurements, measure, step_truth
from ..observer import (
    InfoContributions,
    forgetting_prediction,
    initial_contributions,
    make_forgetting,
    measurement_update,
    predict_state,
)
from ..solvers import AdmmSolver, ResidualSplitSolver, RichardsonSolver, solve_centralized
from ..topology import build_dual_layout
from .config import ScenarioConfig
from .scenario import Scenario, generate_scenario, stream


@dataclass
class SimTrace:
    """Per-step metrics of one run.

    ``err_state_norm`` is the prior estimation error, ``err_corr_norm`` the
    gap between the applied and the exact correction of the same step,
    ``lyapunov_v`` is ``x~^T S_prior x~`` and ``dist_qeq`` the distance of the
    warm-started duals to the step's equilibrium set (zero for non-ADMM
    solvers). ``records`` holds matrices when the run was recorded.
    """

    config: ScenarioConfig
    err_state_norm: np.ndarray
    err_corr_norm: np.ndarray
    lyapunov_v: np.ndarray
    dist_qeq: np.ndarray
    err_agents: np.ndarray
    baseline_err_norm: np.ndarray | None
    initial_err_norm: float
    wall_time: float
    attempt: int = 0
    records: dict | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.err_state_norm)

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.steps)

    @property
    def solver(self) -> str:
        return self.config.solver

    @property
    def seed(self) -> int:
        return self.config.seed


def make_solver(cfg: ScenarioConfig, topology):
    if cfg.solver == "richardson":
        return RichardsonSolver(alpha_r=cfg.alpha_r, h_iters=cfg.h_iters)
    if cfg.solver in ("admm", "admm_direct"):
        admm = AdmmSolver(build_dual_layout(topology), rho=cfg.rho, alpha=cfg.alpha, h_iters=cfg.h_iters)
        return admm if cfg.solver == "admm" else ResidualSplitSolver(admm)
    return None


def _noisy(meas: Measurements, cfg: ScenarioConfig, rng: np.random.Generator | None) -> Measurements:
    if rng is None:
        return meas
    local = {i: y + cfg.noise_local * rng.standard_normal(y.shape) for i, y in meas.local.items()}
    relative = {e: y + cfg.noise_relative * rng.standard_normal(y.shape) for e, y in meas.relative.items()}
    return Measurements(local, relative)


def _admm_of(solver):
    if isinstance(solver, ResidualSplitSolver):
        return solver.admm
    return solver if isinstance(solver, AdmmSolver) else None


@dataclass
class StepRecord:
    """Everything one observer step produced, for callbacks and recording.

    ``x_true`` and ``x_tilde`` are the true state and the prior error
    entering step ``k``; ``xi_exact`` and ``xi_hat`` are the exact and
    applied corrections; ``S_prior`` and ``S_post`` are the assembled
    information matrices around the measurement update (block sparse; call
    ``to_dense`` as needed).
    """

    k: int
    x_true: np.ndarray
    x_tilde: np.ndarray
    x_prior: np.ndarray
    meas: Measurements
    S_prior: object
    S_post: object
    b: np.ndarray
    contrib_post: InfoContributions
    xi_exact: np.ndarray
    xi_hat: np.ndarray
    lyapunov_v: float
    dist_qeq: float
    baseline_err: float | None = None

    @property
    def xi_tilde(self) -> np.ndarray:
        return self.xi_exact - self.xi_hat


class Simulation:
    """Steppable observer run over one scenario.

    Per step: measure, fold measurements into the information contributions,
    solve for the correction with the configured solver, apply it, then
    predict state and information. With ``cfg.baseline`` an exact-correction
    observer runs alongside on the same measurements.
    """

    def __init__(self, cfg: ScenarioConfig, scenario: Scenario | None = None):
        self.cfg = cfg
        self.scenario = sc = scenario if scenario is not None else generate_scenario(cfg)
        self.model, self.topology = sc.model, sc.topology
        self.forgetting = make_forgetting(cfg.forgetting_value, self.topology)
        self.solver = make_solver(cfg, self.topology)
        self.admm = _admm_of(self.solver)
        self.tracker = (
            EquilibriumTracker(self.admm.layout, self.admm.rho)
            if self.admm is not None and cfg.track_dist
            else None
        )
        noisy = cfg.noise_local > 0 or cfg.noise_relative > 0
        self._noise_rng = stream(cfg.seed, "noise") if noisy else None
        self.k = 0
        self.x = sc.x0.copy()
        self.x_hat = sc.x_hat0.copy()
        self.contrib = initial_contributions(self.topology, sc.P0, cfg.eps)
        self.base_hat = sc.x_hat0.copy() if cfg.baseline else None
        self.base_contrib = self.contrib.copy() if cfg.baseline else None

    @property
    def error(self) -> np.ndarray:
        """Current prior estimation error ``x - x_hat``."""
        return self.x - self.x_hat

    def step(self) -> StepRecord:
        """Advance one step.

        Raises
        ------
        StepError
            Wrapping any failure, with the step index attached.
        """
        k = self.k
        try:
            rec = self._step(k)
        except (DkobsError, LinAlgError, FloatingPointError, ValueError) as exc:
            raise StepError(k, exc) from exc
        self.k += 1
        return rec

    def _step(self, k: int) -> StepRecord:
        cfg, model, eps = self.cfg, self.model, self.cfg.eps
        x, x_hat = self.x, self.x_hat
        x_tilde = x - x_hat
        S_prior, _ = self.contrib.assemble()
        V = float(x_tilde @ S_prior.matvec(x_tilde))

        meas = _noisy(measure(model, x, k), cfg, self._noise_rng)
        contrib = measurement_update(self.contrib, model, x_hat, meas, k, eps)
        S_post, b = contrib.assemble()
        xi_exact = solve_centralized(S_post.to_dense(), b)
        xi_hat = xi_exact if self.solver is None else self.solver.solve(contrib).xi
        if not np.all(np.isfinite(xi_hat)):
            raise InternalInvariantViolation("non-finite correction (solver diverged)")
        dist = 0.0
        if self.tracker is not None and self.admm.last_problems is not None:
            dist = self.tracker.distance(self.admm.last_problems, self.admm.last_q0)

        A_blocks = model.A_blocks(k)
        self.contrib = forgetting_prediction(contrib, A_blocks, self.forgetting, k)
        self.x_hat = predict_state(model, x_hat + eps * xi_hat, k)

        base_err = None
        if self.base_contrib is not None:
            base_err = float(np.linalg.norm(x - self.base_hat))
            bc = measurement_update(self.base_contrib, model, self.base_hat, meas, k, eps)
            Sb, bb = bc.assemble()
            base_post = self.base_hat + eps * solve_centralized(Sb.to_dense(), bb)
            self.base_contrib = forgetting_prediction(bc, A_blocks, self.forgetting, k)
            self.base_hat = predict_state(model, base_post, k)

        self.x = step_truth(model, x, k)
        return StepRecord(
            k=k,
            x_true=x,
            x_tilde=x_tilde,
            x_prior=x_hat,
            meas=meas,
            S_prior=S_prior,
            S_post=S_post,
            b=b,
            contrib_post=contrib,
            xi_exact=xi_exact,
            xi_hat=xi_hat,
            lyapunov_v=V,
            dist_qeq=dist,
            baseline_err=base_err,
        )


def run(
    cfg: ScenarioConfig,
    record: bool = False,
    scenario: Scenario | None = None,
    callback: Callable[[StepRecord, Simulation], None] | None = None,
) -> SimTrace:
    """Simulate ``cfg.steps`` observer steps and collect the metrics.

    Parameters
    ----------
    record : bool
        Keep dense matrices and solver snapshots for offline analysis.
    callback : callable, optional
        Called as ``callback(step_record, simulation)`` after every step.
    """
    t_start = time.perf_counter()
    sim = Simulation(cfg, scenario)
    N, d = sim.topology.n_agents, sim.topology.state_dim
    n = cfg.steps
    err_state = np.zeros(n)
    err_corr = np.zeros(n)
    V = np.zeros(n)
    dist = np.zeros(n)
    err_agents = np.zeros((n, N))
    base_err = np.zeros(n) if cfg.baseline else None
    rec = _empty_records() if record else None

    for k in range(n):
        r = sim.step()
        err_state[k] = np.linalg.norm(r.x_tilde)
        err_agents[k] = np.linalg.norm(r.x_tilde.reshape(N, d), axis=1)
        err_corr[k] = np.linalg.norm(r.xi_tilde)
        V[k] = r.lyapunov_v
        dist[k] = r.dist_qeq
        if base_err is not None:
            base_err[k] = r.baseline_err
        if rec is not None:
            rec["x"].append(r.x_true)
            rec["x_tilde"].append(r.x_tilde)
            rec["xi_tilde"].append(r.xi_tilde)
            rec["S_prior"].append(r.S_prior.to_dense())
            rec["S_post"].append(r.S_post.to_dense())
            rec["A"].append(sim.model.A_global(k))
            if sim.admm is not None:
                rec["solved"].append(sim.admm.last_solved)
                rec["q0"].append(sim.admm.last_q0.copy())
        if callback is not None:
            callback(r, sim)

    if rec is not None:
        rec["x_tilde"].append(sim.error)
    for name, arr in (("err_state_norm", err_state), ("err_corr_norm", err_corr), ("lyapunov_v", V), ("dist_qeq", dist)):
        if not np.all(np.isfinite(arr)):
            raise InternalInvariantViolation(f"non-finite values in {name}")
    sc = sim.scenario
    return SimTrace(
        config=cfg,
        err_state_norm=err_state,
        err_corr_norm=err_corr,
        lyapunov_v=V,
        dist_qeq=dist,
        err_agents=err_agents,
        baseline_err_norm=base_err,
        initial_err_norm=float(np.linalg.norm(sc.x0 - sc.x_hat0)),
        wall_time=time.perf_counter() - t_start,
        attempt=sc.attempt,
        records=rec,
    )


def _empty_records() -> dict:
    return {"x": [], "x_tilde": [], "xi_tilde": [], "S_prior": [], "S_post": [], "A": [], "solved": [], "q0": []}


def contributions_trace(trace: SimTrace) -> list[InfoContributions]:
    """Problems the ADMM solved at each recorded step (residual problems for the split variant)."""
    if trace.records is None:
        raise ValueError("trace was not recorded")
    return trace.records["solved"]
