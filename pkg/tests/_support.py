"""Independent dense references and instance builders shared by the tests.

The references here deliberately avoid the package's index bookkeeping: they
embed blocks with explicit selection matrices and solve with plain numpy, so
agreement is evidence rather than tautology.
"""

from __future__ import annotations

import numpy as np

from dkobs.harness.config import ScenarioConfig
from dkobs.harness.scenario import Scenario
from dkobs.model import AgentModel, NetworkModel, RelativeMeasurement
from dkobs.observer import InfoContributions
from dkobs.topology import build_topology


def reference_config(**overrides) -> ScenarioConfig:
    """The cooperative-localization setup used throughout the suite.

    Measurement weights 5 (absolute) and 0.5 (relative), i.e. the listed
    0.2 / 2 read as inverse weights.
    """
    base = dict(r_as_inverse=True)
    base.update(overrides)
    return ScenarioConfig(**base)


# -- selection matrices -------------------------------------------------------------


def E(i: int, N: int, d: int) -> np.ndarray:
    """``E_i``: ``E_i^T x = x_i``."""
    M = np.zeros((N * d, d))
    M[i * d : (i + 1) * d] = np.eye(d)
    return M


def E_pair(i: int, j: int, N: int, d: int) -> np.ndarray:
    return np.hstack([E(i, N, d), E(j, N, d)])


# -- T2: two agents, one edge, scalar states ----------------------------------------


def t2_model(a=(1.0, 1.0)) -> NetworkModel:
    """Agent 0 anchored with ``H = 1``; edge (0, 1) with ``H = [1, -1]``; unit weights."""
    topo = build_topology(2, [(0, 1)], anchor_set=[0], state_dim=1)
    one = np.eye(1)
    agents = (
        AgentModel(A=a[0] * one, H_local=one, R_local=one),
        AgentModel(A=a[1] * one),
    )
    rel = {(0, 1): RelativeMeasurement(one, -one, one)}
    return NetworkModel(topo, agents, rel)


def t2_scenario(x0=(1.0, -2.0), x_hat0=(0.0, 0.0), prior=(1.0, 1.0), a=(1.0, 1.0), **cfg) -> Scenario:
    """Runnable T2 scenario; ``cfg`` overrides the (scalar-forgetting) configuration."""
    base = dict(n_agents=2, n_anchors=1, forgetting="scalar", steps=100, baseline=False)
    base.update(cfg)
    model = t2_model(a)
    x0 = np.asarray(x0, dtype=float)
    return Scenario(
        config=ScenarioConfig(**base),
        model=model,
        topology=model.topology,
        x0=x0,
        x_hat0=np.asarray(x_hat0, dtype=float),
        positions=np.zeros((2, 2)),
        attempt=0,
        prior_cov=np.asarray(prior, dtype=float).reshape(2, 1, 1),
    )


T2_H = np.array([[1.0, 0.0], [1.0, -1.0]])
T2_R = np.eye(2)


# -- random frozen problems ---------------------------------------------------------


def random_psd(rng: np.random.Generator, n: int, rank: int | None = None, scale: float = 1.0) -> np.ndarray:
    rank = n if rank is None else rank
    G = rng.standard_normal((n, rank))
    return scale * G @ G.T / max(rank, 1)


def random_topology(rng: np.random.Generator, N: int, d: int, p_edge: float = 0.6):
    edges = [(i, j) for i in range(N) for j in range(N) if i != j and rng.random() < p_edge / 2]
    if not edges:
        edges = [(0, 1)]
    anchors = [int(a) for a in rng.choice(N, size=max(1, N // 3), replace=False)]
    return build_topology(N, edges, anchors, d)


def random_contributions(rng: np.random.Generator, topo, prior: float = 0.3) -> InfoContributions:
    """PSD local and edge blocks with an SPD total (``prior`` on every local block)."""
    d = topo.state_dim
    c = InfoContributions.zeros(topo)
    for i in range(topo.n_agents):
        c.S_loc[i] = prior * np.eye(d)
        if i in topo.anchor_set:
            c.S_loc[i] += random_psd(rng, d)
    for e in range(topo.n_edges):
        c.S_edge[e] = random_psd(rng, 2 * d, rank=d)
    c.b_loc[:] = rng.standard_normal(c.b_loc.shape)
    c.b_edge[:] = rng.standard_normal(c.b_edge.shape)
    return c


def dense_from_contributions(c: InfoContributions) -> tuple[np.ndarray, np.ndarray]:
    """Global ``(S, b)`` by explicit embedding ``E_i S_i E_i^T + E_ij S_ij E_ij^T``."""
    topo = c.topology
    N, d = topo.n_agents, topo.state_dim
    S = np.zeros((N * d, N * d))
    b = np.zeros(N * d)
    for i in range(N):
        Ei = E(i, N, d)
        S += Ei @ c.S_loc[i] @ Ei.T
        b += Ei @ c.b_loc[i]
    for e, (i, j) in enumerate(topo.comm_edges):
        Eij = E_pair(i, j, N, d)
        S += Eij @ c.S_edge[e] @ Eij.T
        b += Eij @ c.b_edge[e]
    return S, b


# -- dense ADMM reference (slot enumeration from the definitions) -------------------


def reference_slots(topo) -> list[tuple[int, int, int]]:
    """``(owner, neighbour, variable)`` per dual block: own variables first, then neighbours'."""
    out = []
    for i in range(topo.n_agents):
        nb = sorted({b if a == i else a for a, b in topo.comm_edges if i in (a, b)})
        out += [(i, j, i) for j in nb]
        out += [(i, j, j) for j in nb]
    return out


def reference_pairing(topo) -> np.ndarray:
    slots = reference_slots(topo)
    d = topo.state_dim
    n = len(slots) * d
    P = np.zeros((n, n))
    for s, (o, j, v) in enumerate(slots):
        t = slots.index((j, o, v))
        P[s * d : (s + 1) * d, t * d : (t + 1) * d] = np.eye(d)
    return P


def reference_local_qp(c: InfoContributions, i: int, rho: float, q_i: np.ndarray) -> np.ndarray:
    """Minimizer of agent ``i``'s augmented local cost, built term by term.

    Variables ``z = [z_i; z_j for j in N_i]``. Cost: local quadratic, half of
    every incident edge quadratic, ``-q^T (A_qi z)`` and ``rho/2 ||A_qi z||^2``
    where ``A_qi z`` lists ``z_i`` once per neighbour, then the ``z_j``.
    """
    topo = c.topology
    d = topo.state_dim
    nb = sorted({b if a == i else a for a, b in topo.comm_edges if i in (a, b)})
    m = len(nb)
    n = (1 + m) * d

    def sel(p):  # picks block p of z
        M = np.zeros((d, n))
        M[:, p * d : (p + 1) * d] = np.eye(d)
        return M

    Q = sel(0).T @ c.S_loc[i] @ sel(0)
    lin = sel(0).T @ c.b_loc[i]
    for p, j in enumerate(nb, start=1):
        e = topo.comm_edges.index((min(i, j), max(i, j)))
        first, second = (sel(0), sel(p)) if i < j else (sel(p), sel(0))
        Z = np.vstack([first, second])
        Q += 0.5 * Z.T @ c.S_edge[e] @ Z
        lin += 0.5 * Z.T @ c.b_edge[e]
    rows = [sel(0)] * m + [sel(p) for p in range(1, m + 1)]
    Aq = np.vstack(rows) if rows else np.zeros((0, n))
    Q += rho * Aq.T @ Aq
    lin += Aq.T @ q_i
    return np.linalg.solve(Q, lin)
