"""Cooperative-localization scenario generation.

Randomness comes from independent Philox streams derived from the seed, one
per purpose, so changing the solver (or turning on noise) never shifts the
graph, the initial conditions or the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UnobservableScenario
from ..model import AgentModel, NetworkModel, RelativeMeasurement, double_integrator, is_observable
from ..topology import SensingTopology, build_topology
from .config import ScenarioConfig

STREAMS = {"graph": 0, "init": 1, "noise": 2, "input": 3}


def stream(seed: int, name: str, sub: int = 0) -> np.random.Generator:
    """Counter-based generator for one named purpose (and retry index)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], int(sub)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    model: NetworkModel
    topology: SensingTopology
    x0: np.ndarray
    x_hat0: np.ndarray
    positions: np.ndarray
    attempt: int
    prior_cov: np.ndarray | None = None

    @property
    def P0(self) -> np.ndarray:
        """Initial covariance: ``prior_cov`` if given, else the config's diagonal."""
        return self.config.p0_diag if self.prior_cov is None else self.prior_cov


def proximity_edges(positions: np.ndarray, radius: float, bidirectional: bool = True) -> list[tuple[int, int]]:
    """Directed sensing pairs of agents closer than ``radius``."""
    n = len(positions)
    diff = positions[:, None, :] - positions[None, :, :]
    close = np.linalg.norm(diff, axis=-1) <= radius
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if close[i, j]:
                out.append((i, j))
                if bidirectional:
                    out.append((j, i))
    return out


def build_model(cfg: ScenarioConfig, topology: SensingTopology, inputs: np.ndarray | None) -> NetworkModel:
    A, B = double_integrator(cfg.Ts)
    H_pos = np.hstack([np.eye(2), np.zeros((2, 2))])
    R_loc = cfg.weight_local * np.eye(2)
    R_rel = cfg.weight_relative * np.eye(2)
    agents = []
    for i in range(topology.n_agents):
        u = None
        if inputs is not None:
            series = inputs[:, i, :]
            last = len(series) - 1
            u = (lambda s, n: (lambda k: s[min(k, n)]))(series, last)
        anchored = i in topology.anchor_set
        agents.append(
            AgentModel(
                A=A,
                B=B,
                u=u,
                H_local=H_pos if anchored else None,
                R_local=R_loc if anchored else None,
            )
        )
    relative = {e: RelativeMeasurement(H_pos, -H_pos, R_rel) for e in topology.sensing_edges}
    return NetworkModel(topology, tuple(agents), relative)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Draw graph, anchors and initial states; retry until observable.

    Raises
    ------
    UnobservableScenario
        If no observable draw is found within ``max_retries`` extra attempts.
    """
    N = cfg.n_agents
    d = 4
    inputs = None
    if cfg.input == "random" and cfg.input_scale > 0:
        rng_u = stream(cfg.seed, "input")
        inputs = rng_u.uniform(-cfg.input_scale, cfg.input_scale, size=(max(cfg.steps, 1), N, 2))
    explicit = cfg.edge_list
    for attempt in range(cfg.max_retries + 1):
        rng = stream(cfg.seed, "graph", attempt)
        pos = rng.uniform(0.0, cfg.workspace, size=(N, 2))
        vel = rng.normal(0.0, cfg.velocity_scale, size=(N, 2))
        anchors = rng.permutation(N)[: cfg.n_anchors]
        edges = explicit if explicit is not None else proximity_edges(pos, cfg.radius, cfg.bidirectional)
        topo = build_topology(N, edges, anchors, d)
        model = build_model(cfg, topo, inputs)
        if is_observable(model, cfg.gramian_window):
            break
        if explicit is not None:
            raise UnobservableScenario("the explicit sensing graph is not observable with these anchors")
    else:
        raise UnobservableScenario(f"no observable scenario after {cfg.max_retries + 1} draws")
    x0 = np.concatenate([pos, vel], axis=1).reshape(-1)
    rng_init = stream(cfg.seed, "init")
    nu = rng_init.normal(size=(N, d)) * np.sqrt(cfg.p0_diag)
    x_hat0 = x0 + nu.reshape(-1)
    return Scenario(cfg, model, topo, x0, x_hat0, pos, attempt)
