"""Information-form observer with graph-sparse storage.

The information matrix is never stored densely. It lives as a set of
contributions: one ``d x d`` block per agent, holding its prior share and its
absolute measurements, and one ``2d x 2d`` block per undirected edge, holding
relative measurements in either direction. Summing them gives the global
matrix. Its sparsity pattern is the communication graph by construction.

Prediction uses exponential forgetting in place of a Riccati step, either
with a scalar ``gamma`` or with a per-component diagonal ``Gamma``. Both map
every stored block by congruence, so the pattern is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DimensionError, InvalidParameter, SingularDynamics, TopologyMismatch
from .model import Measurements, NetworkModel
from .topology import SensingTopology

# -- storage ----------------------------------------------------------------------


@dataclass
class BlockSparseInfoMatrix:
    """Symmetric block matrix with the communication graph as its pattern.

    ``diag[i]`` is the ``(i, i)`` block; ``off[e]`` is the ``(i, j)`` block of
    the canonical edge ``e = (i, j)``, ``i < j``. The ``(j, i)`` block is its
    transpose and is not stored.
    """

    topology: SensingTopology
    diag: np.ndarray
    off: np.ndarray

    @classmethod
    def zeros(cls, topology: SensingTopology) -> "BlockSparseInfoMatrix":
        d = topology.state_dim
        return cls(topology, np.zeros((topology.n_agents, d, d)), np.zeros((topology.n_edges, d, d)))

    def to_dense(self) -> np.ndarray:
        topo = self.topology
        d = topo.state_dim
        N = topo.n_agents
        S = np.zeros((N * d, N * d))
        for i in range(N):
            S[i * d : (i + 1) * d, i * d : (i + 1) * d] = self.diag[i]
        for e, (i, j) in enumerate(topo.comm_edges):
            S[i * d : (i + 1) * d, j * d : (j + 1) * d] = self.off[e]
            S[j * d : (j + 1) * d, i * d : (i + 1) * d] = self.off[e].T
        return S

    def block(self, i: int, j: int) -> np.ndarray:
        """``(i, j)`` block; raises ``KeyError`` off the pattern."""
        if i == j:
            return self.diag[i]
        e = self.topology.edge_id(i, j)
        return self.off[e] if i < j else self.off[e].T

    def row_product(self, i: int, x: np.ndarray) -> np.ndarray:
        """Block row ``i`` of ``S x`` using only ``x_i`` and neighbour blocks."""
        topo = self.topology
        xb = np.asarray(x).reshape(topo.n_agents, topo.state_dim)
        out = self.diag[i] @ xb[i]
        for j in topo.neighbors[i]:
            out = out + self.block(i, j) @ xb[j]
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        topo = self.topology
        xb = np.asarray(x, dtype=float).reshape(topo.n_agents, topo.state_dim)
        out = np.einsum("nij,nj->ni", self.diag, xb)
        if topo.n_edges:
            e = np.array(topo.comm_edges)
            np.add.at(out, e[:, 0], np.einsum("eij,ej->ei", self.off, xb[e[:, 1]]))
            np.add.at(out, e[:, 1], np.einsum("eji,ej->ei", self.off, xb[e[:, 0]]))
        return out.reshape(-1)

    def __add__(self, other: "BlockSparseInfoMatrix") -> "BlockSparseInfoMatrix":
        return BlockSparseInfoMatrix(self.topology, self.diag + other.diag, self.off + other.off)


@dataclass
class InfoContributions:
    """Per-agent and per-edge information contributions with their innovations.

    Attributes
    ----------
    S_loc : ndarray, shape (N, d, d)
        Local contribution of each agent; also carries its prior share.
    b_loc : ndarray, shape (N, d)
        Local innovation ``H^T R (y - H x_prior)``.
    S_edge : ndarray, shape (E, 2d, 2d)
        Pairwise contribution of each canonical edge ``(i, j)``, ordered
        ``[x_i; x_j]``.
    b_edge : ndarray, shape (E, 2d)
        Pairwise innovation in the same ordering.
    """

    topology: SensingTopology
    S_loc: np.ndarray
    b_loc: np.ndarray
    S_edge: np.ndarray
    b_edge: np.ndarray

    @classmethod
    def zeros(cls, topology: SensingTopology) -> "InfoContributions":
        N, E, d = topology.n_agents, topology.n_edges, topology.state_dim
        return cls(
            topology,
            np.zeros((N, d, d)),
            np.zeros((N, d)),
            np.zeros((E, 2 * d, 2 * d)),
            np.zeros((E, 2 * d)),
        )

    def copy(self) -> "InfoContributions":
        return InfoContributions(
            self.topology, self.S_loc.copy(), self.b_loc.copy(), self.S_edge.copy(), self.b_edge.copy()
        )

    def with_innovation(self, b_loc: np.ndarray, b_edge: np.ndarray) -> "InfoContributions":
        """Same information blocks, different innovation (arrays are shared)."""
        return InfoContributions(self.topology, self.S_loc, np.asarray(b_loc), self.S_edge, np.asarray(b_edge))

    # Accessors used by the distributed solvers. Keeping every read behind
    # these two methods lets tests audit which agents and edges were touched.

    def local(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.S_loc[i], self.b_loc[i]

    def edge_block(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Edge contribution of ``{i, j}`` reordered as ``[x_i; x_j]``."""
        e = self.topology.edge_id(i, j)
        S, b = self.S_edge[e], self.b_edge[e]
        if i < j:
            return S, b
        d = self.topology.state_dim
        idx = np.r_[d : 2 * d, 0:d]
        return S[np.ix_(idx, idx)], b[idx]

    def has_innovation(self) -> bool:
        return bool(np.any(self.b_loc) or np.any(self.b_edge))

    def assemble(self) -> tuple[BlockSparseInfoMatrix, np.ndarray]:
        """Sum contributions into the global block-sparse ``S`` and stacked ``b``."""
        topo = self.topology
        d = topo.state_dim
        diag = self.S_loc.copy()
        b = self.b_loc.copy()
        off = np.zeros((topo.n_edges, d, d))
        for e, (i, j) in enumerate(topo.comm_edges):
            Se, be = self.S_edge[e], self.b_edge[e]
            diag[i] += Se[:d, :d]
            diag[j] += Se[d:, d:]
            off[e] = Se[:d, d:]
            b[i] += be[:d]
            b[j] += be[d:]
        return BlockSparseInfoMatrix(topo, diag, off), b.reshape(-1)


def assemble_dense(
    contributions: InfoContributions, prior: BlockSparseInfoMatrix | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Dense global ``(S, b)`` from the contributions plus an optional extra prior."""
    S, b = contributions.assemble()
    if prior is not None:
        S = S + prior
    dense = S.to_dense()
    return 0.5 * (dense + dense.T), b


def initial_contributions(topology: SensingTopology, P0: np.ndarray, eps: float = 1.0) -> InfoContributions:
    """Block-diagonal start ``S_loc[i] = eps * inv(P0_i)``.

    ``P0`` is either a length-``d`` diagonal shared by all agents or a stack
    of ``(N, d, d)`` covariance blocks. Scaling the prior by ``eps`` keeps
    the whole information trajectory proportional to ``eps``.
    """
    N, d = topology.n_agents, topology.state_dim
    P0 = np.asarray(P0, dtype=float)
    if P0.shape == (d,):
        blocks = np.broadcast_to(np.diag(P0), (N, d, d))
    elif P0.shape == (N, d, d):
        blocks = P0
    else:
        raise DimensionError(f"P0 has shape {P0.shape}, expected ({d},) or ({N}, {d}, {d})")
    contrib = InfoContributions.zeros(topology)
    contrib.S_loc[:] = eps * np.linalg.inv(blocks)
    return contrib


# -- gains ------------------------------------------------------------------------


@dataclass(frozen=True)
class Forgetting:
    """Scalar ``gamma`` or per-agent diagonal ``Gamma`` (shape ``(N, d)``)."""

    gamma: float | None = None
    diag: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_scalar(self) -> bool:
        return self.diag is None

    def dense(self, topology: SensingTopology) -> np.ndarray:
        """Global ``Gamma`` as a dense diagonal matrix."""
        if self.is_scalar:
            return self.gamma * np.eye(topology.dim)
        return np.diag(self.diag.reshape(-1))


ForgettingLike = Union[float, np.ndarray, Forgetting]


def make_forgetting(value: ForgettingLike, topology: SensingTopology) -> Forgetting:
    """Validate a forgetting factor.

    A float gives the scalar form; a length-``d`` vector is shared across
    agents; an ``(N, d)`` array sets each agent separately.
    """
    if isinstance(value, Forgetting):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        g = float(arr)
        if not 0.0 < g < 1.0:
            raise InvalidParameter(f"gamma must lie in (0, 1), got {g}")
        return Forgetting(gamma=g)
    N, d = topology.n_agents, topology.state_dim
    if arr.shape == (d,):
        arr = np.broadcast_to(arr, (N, d)).copy()
    if arr.shape != (N, d):
        raise DimensionError(f"Gamma has shape {arr.shape}, expected ({d},) or ({N}, {d})")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise InvalidParameter("Gamma entries must lie in (0, 1)")
    return Forgetting(diag=arr)


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not 0.0 < eps <= 1.0:
        raise InvalidParameter(f"eps must lie in (0, 1], got {eps}")
    return eps


# -- update and prediction --------------------------------------------------------


def measurement_update(
    contributions: InfoContributions,
    model: NetworkModel,
    x_prior: np.ndarray,
    meas: Measurements,
    k: int,
    eps: float = 1.0,
) -> InfoContributions:
    """Fold one step of measurements into the contributions.

    Information blocks accumulate ``eps * H^T R H``; innovations are replaced
    by ``H^T R (y - H x_prior)`` for this step (zero where nothing was
    measured).
    """
    eps = _check_eps(eps)
    topo = model.topology
    d = topo.state_dim
    x_prior = np.asarray(x_prior, dtype=float)
    if x_prior.shape != (topo.dim,):
        raise DimensionError(f"prior estimate has shape {x_prior.shape}, expected ({topo.dim},)")
    for i in meas.local:
        if i not in topo.anchor_set:
            raise TopologyMismatch(f"local measurement for non-anchor agent {i}")
    for e in meas.relative:
        if e not in topo.sensing_set:
            raise TopologyMismatch(f"relative measurement on edge {e} not in the sensing graph")
    out = contributions.copy()
    out.b_loc[:] = 0.0
    out.b_edge[:] = 0.0
    xb = x_prior.reshape(topo.n_agents, d)
    for i, y in meas.local.items():
        H, R = model.agents[i].H_at(k), model.agents[i].R_at(k)
        HtR = H.T @ R
        out.S_loc[i] += eps * (HtR @ H)
        out.b_loc[i] = HtR @ (np.atleast_1d(y) - H @ xb[i])
    for (i, j), y in meas.relative.items():
        Hi, Hj, R = model.relative[(i, j)].at(k)
        e = topo.edge_id(i, j)
        # columns ordered as the canonical edge (min, max)
        Hp = np.hstack([Hi, Hj]) if i < j else np.hstack([Hj, Hi])
        lo, hi = (i, j) if i < j else (j, i)
        HtR = Hp.T @ R
        out.S_edge[e] += eps * (HtR @ Hp)
        out.b_edge[e] += HtR @ (np.atleast_1d(y) - Hp @ np.concatenate([xb[lo], xb[hi]]))
    return out


def innovation_vector(
    model: NetworkModel, x_prior: np.ndarray, meas: Measurements, k: int
) -> np.ndarray:
    """Global ``b = H^T R (y - H x_prior)``, built block by block from local terms."""
    contrib = measurement_update(InfoContributions.zeros(model.topology), model, x_prior, meas, k)
    return contrib.assemble()[1]


def _inverse_dynamics(A_blocks: np.ndarray, k: int) -> np.ndarray:
    inv = np.empty_like(A_blocks)
    for i, Ai in enumerate(A_blocks):
        try:
            inv[i] = np.linalg.inv(Ai)
        except np.linalg.LinAlgError as exc:
            raise SingularDynamics(k, agent=i) from exc
        if not np.all(np.isfinite(inv[i])):
            raise SingularDynamics(k, agent=i)
    return inv


def forgetting_prediction(
    contributions: InfoContributions,
    A_blocks: np.ndarray,
    forgetting: ForgettingLike,
    k: int = 0,
) -> InfoContributions:
    """Predict every contribution with the forgetting recursion.

    Scalar: ``S <- gamma A^{-T} S A^{-1}``. Matrix: ``S <- A^{-T} G S G A^{-1}``
    with ``G`` the diagonal forgetting block of the agents involved. Innovations
    are cleared.
    """
    topo = contributions.topology
    d = topo.state_dim
    A_blocks = np.asarray(A_blocks, dtype=float)
    if A_blocks.shape != (topo.n_agents, d, d):
        raise DimensionError(f"A blocks have shape {A_blocks.shape}, expected ({topo.n_agents}, {d}, {d})")
    fg = make_forgetting(forgetting, topo)
    Ainv = _inverse_dynamics(A_blocks, k)
    if fg.is_scalar:
        left = Ainv
    else:
        # G A^{-1}: scale rows of A^{-1}
        left = fg.diag[:, :, None] * Ainv
    S_loc = np.einsum("nki,nkl,nlj->nij", left, contributions.S_loc, left)
    if fg.is_scalar:
        S_loc *= fg.gamma
    S_edge = contributions.S_edge
    if topo.n_edges:
        e = np.array(topo.comm_edges)
        pair = np.zeros((topo.n_edges, 2 * d, 2 * d))
        pair[:, :d, :d] = left[e[:, 0]]
        pair[:, d:, d:] = left[e[:, 1]]
        S_edge = np.einsum("eki,ekl,elj->eij", pair, S_edge, pair)
        if fg.is_scalar:
            S_edge *= fg.gamma
    return InfoContributions(
        topo,
        S_loc,
        np.zeros_like(contributions.b_loc),
        S_edge.copy(),
        np.zeros_like(contributions.b_edge),
    )


# -- state ------------------------------------------------------------------------


@dataclass
class ObserverState:
    """Prior estimate, contributions and gains at step ``k``."""

    x_prior: np.ndarray
    contributions: InfoContributions
    eps: float
    forgetting: Forgetting
    k: int = 0

    def __post_init__(self):
        self.eps = _check_eps(self.eps)
        self.forgetting = make_forgetting(self.forgetting, self.contributions.topology)


def apply_correction(state: ObserverState, xi_hat: np.ndarray) -> np.ndarray:
    """Posterior ``x_post = x_prior + eps * xi_hat``."""
    xi_hat = np.asarray(xi_hat, dtype=float)
    if xi_hat.shape != state.x_prior.shape:
        raise DimensionError(f"correction has shape {xi_hat.shape}, expected {state.x_prior.shape}")
    return state.x_prior + state.eps * xi_hat


def predict_state(model: NetworkModel, x_post: np.ndarray, k: int) -> np.ndarray:
    """Blockwise state prediction ``A_i x_i + B_i u_i``."""
    N, d = model.topology.n_agents, model.state_dim
    x_post = np.asarray(x_post, dtype=float)
    if x_post.shape != (N * d,):
        raise DimensionError(f"estimate has shape {x_post.shape}, expected ({N * d},)")
    return np.einsum("nij,nj->ni", model.A_blocks(k), x_post.reshape(N, d)).reshape(-1) + model.drive(k)


class InformationObserver:
    """Stateful wrapper running update, correction and prediction in order.

    The correction itself is external: call :meth:`update`, solve
    ``S xi = b`` with any solver, then :meth:`correct` and :meth:`predict`.
    """

    def __init__(
        self,
        model: NetworkModel,
        x0: np.ndarray,
        P0: np.ndarray,
        eps: float = 1.0,
        forgetting: ForgettingLike = 0.9,
    ):
        self.model = model
        eps = _check_eps(eps)
        self.state = ObserverState(
            x_prior=np.asarray(x0, dtype=float).copy(),
            contributions=initial_contributions(model.topology, P0, eps),
            eps=eps,
            forgetting=make_forgetting(forgetting, model.topology),
        )

    @property
    def contributions(self) -> InfoContributions:
        return self.state.contributions

    def update(self, meas: Measurements) -> InfoContributions:
        st = self.state
        st.contributions = measurement_update(st.contributions, self.model, st.x_prior, meas, st.k, st.eps)
        return st.contributions

    def correct(self, xi_hat: np.ndarray) -> np.ndarray:
        self.x_post = apply_correction(self.state, xi_hat)
        return self.x_post

    def predict(self) -> np.ndarray:
        st = self.state
        A = self.model.A_blocks(st.k)
        st.contributions = forgetting_prediction(st.contributions, A, st.forgetting, st.k)
        st.x_prior = predict_state(self.model, self.x_post, st.k)
        st.k += 1
        return st.x_prior


def z_form_posterior(
    S_prior: np.ndarray,
    x_prior: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
    eps: float = 1.0,
) -> np.ndarray:
    """Posterior through the information vector: ``S_post^{-1} z_post``.

    ``z_post = S_prior x_prior + eps H^T R y`` and ``S_post = S_prior + eps H^T R H``.
    Reference path used to cross-check the correction form.
    """
    S_post = S_prior + eps * H.T @ R @ H
    z_post = S_prior @ x_prior + eps * H.T @ R @ y
    return np.linalg.solve(S_post, z_post)


__all__ = [
    "BlockSparseInfoMatrix",
    "Forgetting",
    "InfoContributions",
    "InformationObserver",
    "ObserverState",
    "apply_correction",
    "assemble_dense",
    "forgetting_prediction",
    "initial_contributions",
    "innovation_vector",
    "make_forgetting",
    "measurement_update",
    "predict_state",
    "z_form_posterior",
]
