"""Agent dynamics, measurement maps and the checks on them.

Every time-varying quantity may be given either as a constant array or as a
pure function of the step index ``k``. Agent dynamics never couple: the
global transition matrix is block diagonal, and each measurement row touches
one agent (local) or two agents (relative).

Global measurement ordering: local rows for the anchors in index order,
then relative rows for the sensing edges in lexicographic ``(i, j)`` order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.linalg import block_diag

from .errors import (
    DimensionError,
    InvalidParameter,
    InvalidWindow,
    SingularDynamics,
    TopologyMismatch,
)
from .topology import SensingTopology

MatrixLike = Union[np.ndarray, Callable[[int], np.ndarray]]


def _at(value, k: int) -> np.ndarray:
    return np.asarray(value(k) if callable(value) else value, dtype=float)


@dataclass(frozen=True)
class AgentModel:
    """Dynamics and (optional) absolute measurement of one agent.

    Parameters
    ----------
    A : array or callable
        ``d x d`` dynamics block.
    B : array or callable, optional
        ``d x m`` input block. Omitted means no input.
    u : array or callable, optional
        Input signal ``u_i(k)``; defaults to zero.
    H_local, R_local : array or callable, optional
        Local measurement map and its information weight. Present exactly
        for anchors.
    """

    A: MatrixLike
    B: MatrixLike | None = None
    u: MatrixLike | None = None
    H_local: MatrixLike | None = None
    R_local: MatrixLike | None = None

    @property
    def anchored(self) -> bool:
        return self.H_local is not None

    def A_at(self, k: int) -> np.ndarray:
        return _at(self.A, k)

    def drive_at(self, k: int, d: int) -> np.ndarray:
        """``B_i u_i(k)`` as a ``d``-vector."""
        if self.B is None or self.u is None:
            return np.zeros(d)
        return _at(self.B, k) @ _at(self.u, k)

    def H_at(self, k: int) -> np.ndarray:
        return _at(self.H_local, k)

    def R_at(self, k: int) -> np.ndarray:
        return _at(self.R_local, k)


@dataclass(frozen=True)
class RelativeMeasurement:
    """Map of one directed relative measurement ``y_ij = H_i x_i + H_j x_j``."""

    H_i: MatrixLike
    H_j: MatrixLike
    R: MatrixLike

    def at(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _at(self.H_i, k), _at(self.H_j, k), _at(self.R, k)


@dataclass(frozen=True)
class Measurements:
    """Measurements of one step, keyed by anchor index and directed edge."""

    local: dict[int, np.ndarray] = field(default_factory=dict)
    relative: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.local and not self.relative


@dataclass(frozen=True)
class NetworkModel:
    """Agents, relative measurement maps and the sensing topology."""

    topology: SensingTopology
    agents: tuple[AgentModel, ...]
    relative: dict[tuple[int, int], RelativeMeasurement]

    def __post_init__(self):
        topo = self.topology
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) != topo.n_agents:
            raise DimensionError(f"{len(self.agents)} agent models for {topo.n_agents} agents")
        anchored = {i for i, a in enumerate(self.agents) if a.anchored}
        if anchored != set(topo.anchors):
            raise TopologyMismatch(
                f"agents with local maps {sorted(anchored)} differ from anchors {list(topo.anchors)}"
            )
        if set(self.relative) != set(topo.sensing_edges):
            raise TopologyMismatch("relative measurement maps must match the sensing edges")
        d = topo.state_dim
        A0 = self.agents[0].A_at(0) if self.agents else np.zeros((d, d))
        if A0.shape != (d, d):
            raise DimensionError(f"A has shape {A0.shape}, expected ({d}, {d})")

    @property
    def state_dim(self) -> int:
        return self.topology.state_dim

    @property
    def dim(self) -> int:
        return self.topology.dim

    def A_blocks(self, k: int) -> np.ndarray:
        """Stack of per-agent dynamics blocks, shape ``(N, d, d)``."""
        return np.stack([a.A_at(k) for a in self.agents])

    def A_global(self, k: int) -> np.ndarray:
        return block_diag(*self.A_blocks(k))

    def drive(self, k: int) -> np.ndarray:
        d = self.state_dim
        return np.concatenate([a.drive_at(k, d) for a in self.agents])

    def H_global(self, k: int) -> np.ndarray:
        """Dense stacked measurement map."""
        return _stack_measurements(self, k)[0]

    def R_global(self, k: int) -> np.ndarray:
        return _stack_measurements(self, k)[1]

    def stack(self, meas: Measurements) -> np.ndarray:
        """Stacked measurement vector in global row order."""
        parts = [np.atleast_1d(meas.local[i]) for i in self.topology.anchors]
        parts += [np.atleast_1d(meas.relative[e]) for e in self.topology.sensing_edges]
        return np.concatenate(parts) if parts else np.zeros(0)


def _stack_measurements(model: NetworkModel, k: int) -> tuple[np.ndarray, np.ndarray]:
    topo = model.topology
    d, n = topo.state_dim, topo.dim
    rows, weights = [], []
    for i in topo.anchors:
        H = model.agents[i].H_at(k)
        block = np.zeros((H.shape[0], n))
        block[:, topo.agent_slice(i)] = H
        rows.append(block)
        weights.append(model.agents[i].R_at(k))
    for i, j in topo.sensing_edges:
        Hi, Hj, R = model.relative[(i, j)].at(k)
        block = np.zeros((Hi.shape[0], n))
        block[:, topo.agent_slice(i)] = Hi
        block[:, topo.agent_slice(j)] = Hj
        rows.append(block)
        weights.append(R)
    if not rows:
        return np.zeros((0, n)), np.zeros((0, 0))
    return np.vstack(rows), block_diag(*weights)


def step_truth(model: NetworkModel, x: np.ndarray, k: int) -> np.ndarray:
    """Propagate the true state one step: ``x_{k+1} = A_k x_k + B_k u_k``."""
    x = np.asarray(x, dtype=float)
    N, d = model.topology.n_agents, model.state_dim
    if x.shape != (N * d,):
        raise DimensionError(f"state has shape {x.shape}, expected ({N * d},)")
    xb = x.reshape(N, d)
    return np.einsum("nij,nj->ni", model.A_blocks(k), xb).reshape(-1) + model.drive(k)


def measure(model: NetworkModel, x: np.ndarray, k: int) -> Measurements:
    """Noiseless local and relative measurements of state ``x`` at step ``k``."""
    x = np.asarray(x, dtype=float)
    topo = model.topology
    if x.shape != (topo.dim,):
        raise DimensionError(f"state has shape {x.shape}, expected ({topo.dim},)")
    xb = x.reshape(topo.n_agents, topo.state_dim)
    local = {i: model.agents[i].H_at(k) @ xb[i] for i in topo.anchors}
    relative = {}
    for i, j in topo.sensing_edges:
        Hi, Hj, _ = model.relative[(i, j)].at(k)
        relative[(i, j)] = Hi @ xb[i] + Hj @ xb[j]
    return Measurements(local=local, relative=relative)


def double_integrator(Ts: float, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Sampled double integrator with state ``[p; v]`` in ``dims`` axes.

    Returns
    -------
    A : ndarray, shape (2 dims, 2 dims)
        ``[[1, Ts], [0, 1]] kron I``.
    B : ndarray, shape (2 dims, dims)
        ``[[Ts^2 / 2], [Ts]] kron I``.
    """
    if not Ts > 0:
        raise InvalidParameter(f"sampling time must be positive, got {Ts}")
    eye = np.eye(dims)
    A = np.kron(np.array([[1.0, Ts], [0.0, 1.0]]), eye)
    B = np.kron(np.array([[0.5 * Ts**2], [Ts]]), eye)
    return A, B


def transition(model: NetworkModel, k: int, k0: int) -> np.ndarray:
    """Open-loop transition ``Phi(k, k0) = A_{k-1} ... A_{k0}``, dense."""
    if k < k0:
        raise InvalidWindow(f"transition needs k >= k0, got k={k}, k0={k0}")
    Phi = np.eye(model.dim)
    for t in range(k0, k):
        Phi = model.A_global(t) @ Phi
    return Phi


@dataclass(frozen=True)
class GramianResult:
    G: np.ndarray
    lam_min: float
    lam_max: float


def observability_gramian(model: NetworkModel, k: int, K: int) -> GramianResult:
    """Unweighted observability Gramian over the window ``[k - K, k]``."""
    if K < 0 or k < K:
        raise InvalidWindow(f"window needs 0 <= K <= k, got k={k}, K={K}")
    n = model.dim
    G = np.zeros((n, n))
    Phi = np.eye(n)
    for t in range(k - K, k + 1):
        H = model.H_global(t)
        HPhi = H @ Phi
        G += HPhi.T @ HPhi
        Phi = model.A_global(t) @ Phi
    G = 0.5 * (G + G.T)
    eig = np.linalg.eigvalsh(G)
    return GramianResult(G=G, lam_min=float(eig[0]), lam_max=float(eig[-1]))


def is_observable(model: NetworkModel, K: int, k: int | None = None, tol: float = 1e-9) -> bool:
    """Whether the Gramian over ``K`` samples ending at ``k`` is positive definite."""
    res = observability_gramian(model, K if k is None else k, K)
    return res.lam_min > tol * max(res.lam_max, 1.0)


def smallest_observable_window(model: NetworkModel, k_max: int = 200, tol: float = 1e-9) -> int | None:
    """Smallest ``K`` for which the Gramian at ``k = K`` is positive definite."""
    for K in range(k_max + 1):
        if is_observable(model, K, tol=tol):
            return K
    return None


@dataclass
class AssumptionReport:
    """Measured bounds over a horizon and the observability verdict.

    Attributes
    ----------
    a_bar, a_inv, b_bar, h_bar : float
        Sup norms of ``A_k``, ``A_k^{-1}``, ``B_k u_k`` and ``H_k``.
    a_delta, h_delta : float
        Sup norms of successive differences of ``A_k`` and ``H_k``.
    alpha1, alpha2 : float
        Min and max Gramian eigenvalue over sliding windows.
    worst_k : int or None
        Window end with the smallest Gramian eigenvalue.
    observable : bool
    """

    a_bar: float
    a_inv: float
    b_bar: float
    h_bar: float
    a_delta: float
    h_delta: float
    alpha1: float
    alpha2: float
    worst_k: int | None
    observable: bool

    @property
    def passed(self) -> bool:
        return self.observable and np.isfinite(self.a_inv)


def verify_assumptions(model: NetworkModel, horizon: int, K: int, tol: float = 1e-9) -> AssumptionReport:
    """Measure boundedness, invertibility and uniform observability over ``[0, horizon]``."""
    if horizon < K:
        raise InvalidWindow(f"horizon {horizon} shorter than window {K}")
    a_bar = a_inv = b_bar = h_bar = a_delta = h_delta = 0.0
    A_prev = H_prev = None
    for k in range(horizon + 1):
        blocks = model.A_blocks(k)
        for i, Ai in enumerate(blocks):
            try:
                inv = np.linalg.inv(Ai)
            except np.linalg.LinAlgError as exc:
                raise SingularDynamics(k, agent=i) from exc
            if not np.all(np.isfinite(inv)) or np.linalg.cond(Ai) > 1e14:
                raise SingularDynamics(k, agent=i)
            a_inv = max(a_inv, np.linalg.norm(inv, 2))
        A = block_diag(*blocks)
        H = model.H_global(k)
        a_bar = max(a_bar, np.linalg.norm(A, 2))
        b_bar = max(b_bar, float(np.linalg.norm(model.drive(k))))
        if H.size:
            h_bar = max(h_bar, np.linalg.norm(H, 2))
        if A_prev is not None:
            a_delta = max(a_delta, np.linalg.norm(A - A_prev, 2))
            if H.size:
                h_delta = max(h_delta, np.linalg.norm(H - H_prev, 2))
        A_prev, H_prev = A, H
    alpha1, alpha2, worst = np.inf, 0.0, None
    for k in range(K, horizon + 1):
        res = observability_gramian(model, k, K)
        if res.lam_min < alpha1:
            alpha1, worst = res.lam_min, k
        alpha2 = max(alpha2, res.lam_max)
    observable = alpha1 > tol * max(alpha2, 1.0)
    return AssumptionReport(
        a_bar=float(a_bar),
        a_inv=float(a_inv),
        b_bar=float(b_bar),
        h_bar=float(h_bar),
        a_delta=float(a_delta),
        h_delta=float(h_delta),
        alpha1=float(alpha1),
        alpha2=float(alpha2),
        worst_k=worst,
        observable=bool(observable),
    )
