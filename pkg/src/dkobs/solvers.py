"""Correction-step solvers for ``S xi = b``.

Four variants share one result type:

* ``solve_centralized``: dense Cholesky; the reference for everything else.
* Richardson: ``xi <- xi - alpha_R (S xi - b)``, one-hop products only.
* Partition-based ADMM: every agent keeps a copy of its own and its
  neighbours' variables and agrees with neighbours through edge duals.
* Residual split: each agent absorbs its own absolute measurements in closed
  form and ADMM only resolves the relative-measurement residual.

All iterative solvers carry their state across observer steps (warm start).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    DimensionError,
    InconsistentLocalInfo,
    InternalInvariantViolation,
    InvalidParameter,
    NotSPD,
    ProtocolError,
)
from .observer import BlockSparseInfoMatrix, InfoContributions, assemble_dense
from .topology import DualLayout, aq_transpose, build_dual_layout


@dataclass
class CorrectionResult:
    """Output of one correction solve.

    Attributes
    ----------
    xi : ndarray, shape (N d,)
        Correction estimate, agent blocks in index order.
    copies : list of ndarray or None
        ADMM only: each agent's extended vector ``[own; neighbour copies]``.
    iterations : int
        Inner iterations performed (0 for direct solves and vacuous steps).
    residual : float
        ``||S xi - b||``.
    """

    xi: np.ndarray
    copies: list[np.ndarray] | None = None
    iterations: int = 0
    residual: float = 0.0


# -- centralized ------------------------------------------------------------------


def solve_centralized(S: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``S xi = b`` by Cholesky; ``NotSPD`` if ``S`` is not positive definite."""
    S = np.asarray(S, dtype=float)
    b = np.asarray(b, dtype=float)
    if S.shape != (b.size, b.size):
        raise DimensionError(f"S has shape {S.shape} but b has length {b.size}")
    if not np.any(b):
        return np.zeros_like(b)
    try:
        factor = cho_factor(S)
    except LinAlgError as exc:
        raise NotSPD(f"information matrix is not positive definite: {exc}") from exc
    return cho_solve(factor, b)


def centralized_correction(contributions: InfoContributions) -> CorrectionResult:
    S, b = assemble_dense(contributions)
    xi = solve_centralized(S, b)
    return CorrectionResult(xi=xi, residual=float(np.linalg.norm(S @ xi - b)))


# -- Richardson -------------------------------------------------------------------


def _as_block_sparse(data) -> tuple[BlockSparseInfoMatrix, np.ndarray | None]:
    if isinstance(data, InfoContributions):
        return data.assemble()
    return data, None


def richardson_agent_update(
    S: BlockSparseInfoMatrix, i: int, xi: np.ndarray, b: np.ndarray, alpha_r: float
) -> np.ndarray:
    """Agent ``i``'s share of one Richardson step, from one-hop data only."""
    sl = S.topology.agent_slice(i)
    return xi[sl] - alpha_r * (S.row_product(i, xi) - b[sl])


def richardson_step(S, xi: np.ndarray, b: np.ndarray | None, alpha_r: float) -> np.ndarray:
    """One Richardson step ``xi - alpha_R (S xi - b)``.

    ``S`` is a :class:`BlockSparseInfoMatrix` or an :class:`InfoContributions`
    (in which case ``b`` may be ``None`` and is taken from the contributions).
    The product is the stacked form of :func:`richardson_agent_update`.
    """
    if alpha_r <= 0:
        raise InvalidParameter(f"alpha_R must be positive, got {alpha_r}")
    S, b_assembled = _as_block_sparse(S)
    if b is None:
        b = b_assembled
    xi = np.asarray(xi, dtype=float)
    return xi - alpha_r * (S.matvec(xi) - b)


@dataclass
class RichardsonSolver:
    """Warm-started Richardson iteration with a fixed step."""

    alpha_r: float = 0.05
    h_iters: int = 1
    xi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_r <= 0:
            raise InvalidParameter(f"alpha_R must be positive, got {self.alpha_r}")
        if self.h_iters < 1:
            raise InvalidParameter(f"h_iters must be at least 1, got {self.h_iters}")

    def solve(self, contributions: InfoContributions, h_iters: int | None = None) -> CorrectionResult:
        S, b = contributions.assemble()
        if not np.any(b):
            self.xi = np.zeros_like(b)
            return CorrectionResult(xi=self.xi.copy())
        xi = np.zeros_like(b) if self.xi is None else self.xi
        n = self.h_iters if h_iters is None else h_iters
        for _ in range(n):
            xi = xi - self.alpha_r * (S.matvec(xi) - b)
        self.xi = xi
        return CorrectionResult(xi=xi.copy(), iterations=n, residual=float(np.linalg.norm(S.matvec(xi) - b)))


# -- ADMM -------------------------------------------------------------------------


@dataclass
class LocalProblem:
    """Agent ``i``'s frozen subproblem ``min 1/2 z^T H1 z - bbar^T z`` with penalty.

    ``hessian`` is ``rho H0 + H1`` with ``H0 = blkdiag(|N_i| I, I)``.
    """

    agent: int
    neighbors: tuple[int, ...]
    hessian: np.ndarray
    b_bar: np.ndarray
    factor: tuple = field(repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, rhs)


def local_problem(contributions: InfoContributions, i: int, rho: float) -> LocalProblem:
    """Assemble agent ``i``'s penalized Hessian and linear term from one-hop data.

    Each incident edge contributes half of its block to each endpoint, so the
    local costs add back up to the global quadratic at consensus. The same
    halving applies to the edge innovation on both the own and the copied
    variable.
    """
    topo = contributions.topology
    d = topo.state_dim
    nbrs = topo.neighbors[i]
    m = len(nbrs)
    n = (1 + m) * d
    S_l, b_l = contributions.local(i)
    H1 = np.zeros((n, n))
    b_bar = np.zeros(n)
    H1[:d, :d] = S_l
    b_bar[:d] = b_l
    for p, j in enumerate(nbrs):
        Se, be = contributions.edge_block(i, j)
        sl = slice((1 + p) * d, (2 + p) * d)
        H1[:d, :d] += 0.5 * Se[:d, :d]
        H1[:d, sl] += 0.5 * Se[:d, d:]
        H1[sl, :d] += 0.5 * Se[d:, :d]
        H1[sl, sl] += 0.5 * Se[d:, d:]
        b_bar[:d] += 0.5 * be[:d]
        b_bar[sl] += 0.5 * be[d:]
    H0 = np.concatenate([np.full(d, float(m)), np.ones(m * d)])
    hessian = H1 + rho * np.diag(H0)
    hessian = 0.5 * (hessian + hessian.T)
    try:
        factor = cho_factor(hessian)
    except LinAlgError as exc:
        raise InternalInvariantViolation(f"local Hessian of agent {i} is not positive definite") from exc
    return LocalProblem(agent=i, neighbors=nbrs, hessian=hessian, b_bar=b_bar, factor=factor)


def admm_primal(layout: DualLayout, problem: LocalProblem, q_i: np.ndarray) -> np.ndarray:
    """Closed-form primal ``H^{-1} (bbar + A_qi^T q_i)``: the agent's extended copies."""
    return problem.solve(problem.b_bar + aq_transpose(layout, problem.agent, q_i))


@dataclass(frozen=True)
class EtaMessage:
    """Dual message sent over one edge in one ADMM round.

    ``eta_sender = -q_{ij,i} + 2 rho xi_i^{(i)}`` and
    ``eta_receiver = -q_{ij,j} + 2 rho xi_j^{(i)}`` for sender ``i`` and
    receiver ``j``.
    """

    edge: int
    sender: int
    receiver: int
    h: int
    eta_sender: np.ndarray
    eta_receiver: np.ndarray


def emit_messages(
    layout: DualLayout, i: int, q_i: np.ndarray, copies_i: np.ndarray, rho: float, h: int
) -> list[EtaMessage]:
    """Messages agent ``i`` sends to each neighbour after its primal update."""
    topo = layout.topology
    d = topo.state_dim
    nbrs = topo.neighbors[i]
    m = len(nbrs)
    qb = np.asarray(q_i).reshape(2 * m, d)
    cb = np.asarray(copies_i).reshape(1 + m, d)
    out = []
    for p, j in enumerate(nbrs):
        out.append(
            EtaMessage(
                edge=topo.edge_id(i, j),
                sender=i,
                receiver=j,
                h=h,
                eta_sender=-qb[p] + 2.0 * rho * cb[0],
                eta_receiver=-qb[m + p] + 2.0 * rho * cb[1 + p],
            )
        )
    return out


def admm_dual_agent(
    layout: DualLayout, i: int, q_i: np.ndarray, inbox: dict[int, EtaMessage], alpha: float, h: int
) -> np.ndarray:
    """Relaxed dual update of agent ``i`` from its neighbours' messages."""
    topo = layout.topology
    d = topo.state_dim
    nbrs = topo.neighbors[i]
    m = len(nbrs)
    qb = np.asarray(q_i, dtype=float).reshape(2 * m, d)
    new = np.empty_like(qb)
    for p, j in enumerate(nbrs):
        msg = inbox.get(j)
        if msg is None or msg.h != h or msg.receiver != i:
            raise ProtocolError(f"agent {i} is missing the round-{h} message from agent {j}")
        # q_{ij,i} pairs with q_{ji,i}: the neighbour's message about our variable
        new[p] = (1.0 - alpha) * qb[p] + alpha * msg.eta_receiver
        new[m + p] = (1.0 - alpha) * qb[m + p] + alpha * msg.eta_sender
    return new.reshape(-1)


def exchange(messages: list[EtaMessage]) -> dict[int, dict[int, EtaMessage]]:
    """Deliver messages: ``inbox[receiver][sender]``."""
    inbox: dict[int, dict[int, EtaMessage]] = {}
    for msg in messages:
        inbox.setdefault(msg.receiver, {})[msg.sender] = msg
    return inbox


def admm_dual(
    layout: DualLayout, q: np.ndarray, copies: list[np.ndarray], rho: float, alpha: float, h: int = 0
) -> np.ndarray:
    """One synchronous dual round over all agents."""
    q = np.asarray(q, dtype=float)
    if q.shape != (layout.size,):
        raise DimensionError(f"dual vector has shape {q.shape}, expected ({layout.size},)")
    N = layout.topology.n_agents
    msgs = []
    for i in range(N):
        msgs.extend(emit_messages(layout, i, q[layout.agent_slice(i)], copies[i], rho, h))
    inbox = exchange(msgs)
    out = np.empty_like(q)
    for i in range(N):
        out[layout.agent_slice(i)] = admm_dual_agent(layout, i, q[layout.agent_slice(i)], inbox.get(i, {}), alpha, h)
    return out


@dataclass
class AdmmSolver:
    """Partition-based relaxed ADMM with dual warm start across observer steps.

    Parameters
    ----------
    layout : DualLayout
    rho : float
        Penalty, positive.
    alpha : float
        Relaxation, in ``(0, 1)``.
    h_iters : int
        Full (primal, dual) rounds per observer step; a final primal read-out
        follows them.
    """

    layout: DualLayout
    rho: float = 1.0
    alpha: float = 0.95
    h_iters: int = 1
    q: np.ndarray | None = field(default=None, repr=False)
    # problem data of the most recent solve, kept for diagnostics
    last_problems: list | None = field(default=None, init=False, repr=False)
    last_q0: np.ndarray | None = field(default=None, init=False, repr=False)
    last_solved: InfoContributions | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidParameter(f"rho must be positive, got {self.rho}")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.h_iters < 1:
            raise InvalidParameter(f"h_iters must be at least 1, got {self.h_iters}")
        if self.q is None:
            self.q = np.zeros(self.layout.size)
        else:
            self.q = np.asarray(self.q, dtype=float)
            if self.q.shape != (self.layout.size,):
                raise DimensionError(f"dual vector has shape {self.q.shape}, expected ({self.layout.size},)")

    @classmethod
    def for_topology(cls, topology, **kwargs) -> "AdmmSolver":
        return cls(layout=build_dual_layout(topology), **kwargs)

    def local_problems(self, contributions: InfoContributions) -> list[LocalProblem]:
        return [local_problem(contributions, i, self.rho) for i in range(contributions.topology.n_agents)]

    def primal_all(self, problems: list[LocalProblem], q: np.ndarray) -> list[np.ndarray]:
        lay = self.layout
        return [admm_primal(lay, p, q[lay.agent_slice(p.agent)]) for p in problems]

    def solve(
        self,
        contributions: InfoContributions,
        h_iters: int | None = None,
        problems: list[LocalProblem] | None = None,
    ) -> CorrectionResult:
        """Run ``h_iters`` rounds from the stored duals and read out the correction."""
        topo = contributions.topology
        d = topo.state_dim
        if problems is None:
            problems = self.local_problems(contributions)
        self.last_problems, self.last_q0, self.last_solved = problems, self.q, contributions
        if not contributions.has_innovation():
            return CorrectionResult(xi=np.zeros(topo.dim))
        n = self.h_iters if h_iters is None else h_iters
        q = self.q
        for h in range(n):
            copies = self.primal_all(problems, q)
            q = admm_dual(self.layout, q, copies, self.rho, self.alpha, h)
        copies = self.primal_all(problems, q)
        self.q = q
        xi = np.concatenate([c[:d] for c in copies])
        S, b = contributions.assemble()
        return CorrectionResult(
            xi=xi, copies=copies, iterations=n, residual=float(np.linalg.norm(S.matvec(xi) - b))
        )


def local_closed_form(contributions: InfoContributions) -> np.ndarray:
    """Per-agent ``xi_loc = inv(S_loc_i) b_loc_i``; zero where there is no local innovation."""
    topo = contributions.topology
    out = np.zeros((topo.n_agents, topo.state_dim))
    for i in range(topo.n_agents):
        S_l, b_l = contributions.local(i)
        if not np.any(b_l):
            continue
        try:
            out[i] = cho_solve(cho_factor(S_l), b_l)
        except LinAlgError as exc:
            raise InconsistentLocalInfo(
                f"agent {i} has local innovation but a singular local information block"
            ) from exc
    return out


def residual_innovation(contributions: InfoContributions, xi_loc: np.ndarray) -> InfoContributions:
    """Contributions carrying the residual innovation ``b - S xi_loc``, blockwise.

    The local part vanishes up to rounding; each edge needs only the local
    solutions of its two endpoints.
    """
    topo = contributions.topology
    b_loc = contributions.b_loc - np.einsum("nij,nj->ni", contributions.S_loc, xi_loc)
    b_edge = contributions.b_edge.copy()
    if topo.n_edges:
        e = np.array(topo.comm_edges)
        pair = np.concatenate([xi_loc[e[:, 0]], xi_loc[e[:, 1]]], axis=1)
        b_edge = b_edge - np.einsum("eij,ej->ei", contributions.S_edge, pair)
    return contributions.with_innovation(b_loc, b_edge)


@dataclass
class ResidualSplitSolver:
    """Closed-form local integration followed by ADMM on the residual."""

    admm: AdmmSolver

    @classmethod
    def for_topology(cls, topology, **kwargs) -> "ResidualSplitSolver":
        return cls(AdmmSolver.for_topology(topology, **kwargs))

    @property
    def layout(self) -> DualLayout:
        return self.admm.layout

    def residual_problem(self, contributions: InfoContributions) -> tuple[np.ndarray, InfoContributions]:
        xi_loc = local_closed_form(contributions)
        return xi_loc, residual_innovation(contributions, xi_loc)

    def solve(self, contributions: InfoContributions, h_iters: int | None = None) -> CorrectionResult:
        if not contributions.has_innovation():
            return self.admm.solve(contributions, h_iters)
        xi_loc, residual = self.residual_problem(contributions)
        res = self.admm.solve(residual, h_iters)
        xi = xi_loc.reshape(-1) + res.xi
        S, b = contributions.assemble()
        return CorrectionResult(
            xi=xi, copies=res.copies, iterations=res.iterations, residual=float(np.linalg.norm(S.matvec(xi) - b))
        )


def residual_split_solve(
    contributions: InfoContributions, solver: AdmmSolver, h_iters: int | None = None
) -> CorrectionResult:
    """Functional form of :class:`ResidualSplitSolver` sharing ``solver``'s duals."""
    return ResidualSplitSolver(solver).solve(contributions, h_iters)


def admm_run(contributions: InfoContributions, solver: AdmmSolver, h_iters: int | None = None) -> CorrectionResult:
    """Functional form of :meth:`AdmmSolver.solve`."""
    return solver.solve(contributions, h_iters)
