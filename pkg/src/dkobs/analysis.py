"""Numerical stability diagnostics.

Dense, desk-scale checks over frozen solver problems and finished runs:
the stacked ADMM operator and its equilibrium set, measured contraction,
Lyapunov decay under exact correction, the two-time-scale small-gain
certificate, sufficient conditions for a matrix forgetting factor, and the
closed-loop error identity.

For a frozen problem the ADMM dual recursion reads ``q' = (I - alpha F) q +
alpha c`` with::

    F = I + P - 2 rho P A_q H^{-1} A_q^T,    c = 2 rho P A_q H^{-1} bbar

where ``P`` is the edge pairing permutation, ``A_q`` the block-diagonal copy
selector and ``H`` the block-diagonal penalized local Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import block_diag, null_space, subspace_angles
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

from .errors import DimensionError, InsufficientData, InternalInvariantViolation, NotSPD
from .observer import InfoContributions
from .solvers import LocalProblem, local_problem
from .topology import DualLayout, aq_apply, dense_aq, dense_pairing

RANK_RTOL = 1e-10

# -- frozen operator --------------------------------------------------------------


@dataclass
class FrozenAdmmOperator:
    """Dense stacked ADMM dual map of one frozen correction problem."""

    layout: DualLayout
    rho: float
    alpha: float
    F: np.ndarray
    c: np.ndarray
    P: np.ndarray = field(repr=False)
    Aq: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)
    b_bar: np.ndarray = field(repr=False)

    @property
    def T(self) -> np.ndarray:
        return np.eye(self.F.shape[0]) - self.alpha * self.F

    def step(self, q: np.ndarray) -> np.ndarray:
        return q - self.alpha * (self.F @ q - self.c)

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.linalg.svd(self.F)

    @cached_property
    def rank_tol(self) -> float:
        s = self.svd[1]
        return RANK_RTOL * (s[0] if s.size else 0.0)

    @cached_property
    def F_pinv(self) -> np.ndarray:
        U, s, Vt = self.svd
        keep = s > self.rank_tol
        return (Vt[keep].T / s[keep]) @ U[:, keep].T

    def kernel(self) -> np.ndarray:
        """Orthonormal basis (columns) of ``ker F``."""
        _, s, Vt = self.svd
        return Vt[np.sum(s > self.rank_tol) :].T

    def sigma_min_plus(self) -> float:
        s = self.svd[1]
        pos = s[s > self.rank_tol]
        return float(pos[-1]) if pos.size else 0.0


def build_frozen_operator(
    contributions: InfoContributions, rho: float, alpha: float, layout: DualLayout
) -> FrozenAdmmOperator:
    """Assemble ``F``, ``c`` (and ``T = I - alpha F``) densely from the local problems."""
    if contributions.topology is not layout.topology and contributions.topology != layout.topology:
        raise DimensionError("contributions and layout refer to different topologies")
    problems = [local_problem(contributions, i, rho) for i in range(layout.topology.n_agents)]
    H = block_diag(*[p.hessian for p in problems])
    b_bar = np.concatenate([p.b_bar for p in problems])
    P = dense_pairing(layout)
    Aq = dense_aq(layout)
    HinvAqT = np.linalg.solve(H, Aq.T) if H.size else np.zeros((0, Aq.shape[0]))
    n = layout.size
    F = np.eye(n) + P - 2.0 * rho * P @ Aq @ HinvAqT
    c = 2.0 * rho * P @ Aq @ np.linalg.solve(H, b_bar) if H.size else np.zeros(n)
    return FrozenAdmmOperator(layout, rho, alpha, F, c, P, Aq, H, b_bar)


def structural_kernel(layout: DualLayout) -> np.ndarray:
    """Orthonormal basis of ``ker(I + P) ∩ ker(A_q^T)``."""
    n = layout.size
    if n == 0:
        return np.zeros((0, 0))
    M = np.vstack([np.eye(n) + dense_pairing(layout), dense_aq(layout).T])
    return null_space(M, rcond=RANK_RTOL)


def equilibrium_projection(op: FrozenAdmmOperator, q: np.ndarray, rtol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Nearest equilibrium ``q - F^+ (F q - c)`` and the distance to it."""
    q = np.asarray(q, dtype=float)
    if q.shape != op.c.shape:
        raise DimensionError(f"dual vector has shape {q.shape}, expected {op.c.shape}")
    q_eq = q - op.F_pinv @ (op.F @ q - op.c)
    scale = max(np.linalg.norm(op.c), np.linalg.norm(op.F, 2) * np.linalg.norm(q_eq), 1.0)
    if np.linalg.norm(op.F @ q_eq - op.c) > rtol * scale:
        raise InternalInvariantViolation("equilibrium equation F q = c is inconsistent")
    return q_eq, float(np.linalg.norm(q_eq - q))


class EquilibriumTracker:
    """Sparse distance-to-equilibrium for long runs.

    ``ker F`` and ``ker F^T`` both equal the structural kernel, which is
    fixed by the graph. The minimum-norm correction is then the unique
    solution of the bordered system ``[[F, K], [K^T, 0]]``, so no SVD is
    needed per step. Agrees with :func:`equilibrium_projection`.
    """

    def __init__(self, layout: DualLayout, rho: float):
        self.layout = layout
        self.rho = rho
        n = layout.size
        self.kernel = structural_kernel(layout)
        self._P = sp.csr_matrix((np.ones(n), (np.arange(n), layout.perm)), shape=(n, n))
        self._K = sp.csr_matrix(self.kernel) if self.kernel.size else None

    def operator(self, problems: list[LocalProblem]) -> tuple[sp.csr_matrix, np.ndarray]:
        lay = self.layout
        d = lay.topology.state_dim
        blocks, y = [], []
        for p in problems:
            m = len(p.neighbors)
            if m == 0:
                continue
            Hinv = p.solve(np.eye(p.hessian.shape[0]))
            # A_qi H^{-1} A_qi^T via row/column selection
            sel = np.concatenate([np.tile(np.arange(d), m), d + np.arange(m * d)])
            AHi = Hinv[sel]
            Aq_i = np.zeros((2 * m * d, (1 + m) * d))
            Aq_i[np.arange(2 * m * d), sel] = 1.0
            blocks.append(AHi @ Aq_i.T)
            y.append(aq_apply(lay, p.agent, p.solve(p.b_bar)))
        n = lay.size
        M = sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((n, n))
        F = sp.identity(n, format="csr") + self._P - 2.0 * self.rho * (self._P @ M)
        c = 2.0 * self.rho * np.concatenate(y)[lay.perm] if y else np.zeros(n)
        return F.tocsr(), c

    def distance(self, problems: list[LocalProblem], q: np.ndarray) -> float:
        n = self.layout.size
        if n == 0:
            return 0.0
        F, c = self.operator(problems)
        r = F @ q - c
        if self._K is None:
            z = splu(F.tocsc()).solve(r)
        else:
            kdim = self._K.shape[1]
            A = sp.bmat([[F, self._K], [self._K.T, None]], format="csc")
            z = splu(A).solve(np.concatenate([r, np.zeros(kdim)]))[:n]
        return float(np.linalg.norm(z))


# -- kernel invariance ------------------------------------------------------------


def _max_angle(A: np.ndarray, B: np.ndarray) -> float:
    if A.shape[1] != B.shape[1]:
        return float(np.pi / 2)
    if A.shape[1] == 0:
        return 0.0
    return float(np.max(subspace_angles(A, B)))


@dataclass
class KernelReport:
    kernel_dims: list[int]
    structural_dim: int
    angles: list[float]
    sigma_min_plus: list[float]
    max_angle: float
    min_sigma_plus: float

    @property
    def invariant(self) -> bool:
        return self.max_angle < 1e-8 and all(k == self.structural_dim for k in self.kernel_dims)


def verify_kernel_invariance(ops: list[FrozenAdmmOperator]) -> KernelReport:
    """Compare ``ker F_k`` against the structural kernel at every step."""
    if len(ops) < 2:
        raise InsufficientData("kernel invariance needs operators from at least two steps")
    K = structural_kernel(ops[0].layout)
    dims, angles, sig = [], [], []
    for op in ops:
        ker = op.kernel()
        dims.append(int(ker.shape[1]))
        angles.append(_max_angle(ker, K))
        sig.append(op.sigma_min_plus())
    return KernelReport(
        kernel_dims=dims,
        structural_dim=int(K.shape[1]),
        angles=angles,
        sigma_min_plus=sig,
        max_angle=float(max(angles)),
        min_sigma_plus=float(min(sig)),
    )


# -- contraction ------------------------------------------------------------------


@dataclass
class ContractionReport:
    """Distance to the equilibrium set along a frozen ADMM run.

    ``mu_hat`` is the worst one-step ratio (0 if the start is already an
    equilibrium); ``fit_rate`` is ``exp`` of the least-squares slope of
    ``log dist``.
    """

    dists: np.ndarray
    ratios: np.ndarray
    mu_hat: float
    fit_rate: float
    nonincreasing: bool

    @property
    def contractive(self) -> bool:
        return self.mu_hat < 1.0


def measure_contraction(
    op: FrozenAdmmOperator, q0: np.ndarray, n_iters: int, floor: float = 1e-12
) -> ContractionReport:
    """Iterate the frozen dual map and track the distance to equilibria."""
    q = np.asarray(q0, dtype=float)
    dists = [equilibrium_projection(op, q)[1]]
    for _ in range(n_iters):
        q = op.step(q)
        dists.append(equilibrium_projection(op, q)[1])
    dists = np.array(dists)
    valid = dists[:-1] >= floor
    ratios = np.where(valid, dists[1:] / np.where(valid, dists[:-1], 1.0), np.nan)
    mu_hat = float(np.nanmax(ratios)) if np.any(valid) else 0.0
    pos = np.flatnonzero(dists >= floor)
    if pos.size >= 2:
        slope = np.polyfit(pos, np.log(dists[pos]), 1)[0]
        fit_rate = float(np.exp(slope))
    else:
        fit_rate = 0.0
    nonincreasing = bool(np.all(dists[1:][valid] <= dists[:-1][valid] * (1 + 1e-12)))
    return ContractionReport(dists, ratios, mu_hat, fit_rate, nonincreasing)


# -- Lyapunov decay ---------------------------------------------------------------


@dataclass
class LyapunovReport:
    ratios: np.ndarray
    worst_ratio: float
    worst_excess: float
    gamma: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_excess <= self.tol


def lyapunov_decay_check(
    V: np.ndarray, gamma: float, tol: float = 1e-12, ratio_floor: float = 1e-16
) -> LyapunovReport:
    """Check ``V_{k+1} <= gamma V_k + tol`` over a series.

    ``worst_ratio`` only counts steps with ``V_k > ratio_floor * max(V)``;
    below that the error is rounding noise and the ratio says nothing.
    """
    V = np.asarray(V, dtype=float)
    if V.size < 2:
        return LyapunovReport(np.zeros(0), 0.0, -np.inf, gamma, tol)
    prev, nxt = V[:-1], V[1:]
    meaningful = prev > max(ratio_floor * float(np.max(V)), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(meaningful, nxt / prev, np.nan)
    worst_ratio = float(np.nanmax(ratios)) if np.any(meaningful) else 0.0
    return LyapunovReport(ratios, worst_ratio, float(np.max(nxt - gamma * prev)), gamma, tol)


# -- small-gain certificate -------------------------------------------------------


@dataclass
class Envelope:
    """Least-squares fit ``log(w + d) ~ a + k log(lam)`` over a window."""

    k0: int
    k1: int
    slope: float
    lam: float
    C: float
    residual: float


def exponential_envelope(w: np.ndarray, d: np.ndarray, k0: int = 0, k1: int | None = None) -> Envelope:
    s = np.asarray(w, dtype=float) + np.asarray(d, dtype=float)
    k1 = len(s) if k1 is None else min(k1, len(s))
    ks = np.arange(k0, k1)
    vals = s[k0:k1]
    ok = vals > 0
    if ok.sum() < 2:
        raise InsufficientData("envelope fit needs at least two positive samples")
    ks, logs = ks[ok], np.log(vals[ok])
    slope, intercept = np.polyfit(ks, logs, 1)
    resid = float(np.sqrt(np.mean((logs - (intercept + slope * ks)) ** 2)))
    lam = float(np.exp(slope))
    C = float(np.max(vals[ok] / (lam ** (ks - ks[0]) * vals[ok][0])))
    return Envelope(int(k0), int(k1), float(slope), lam, C, resid)


@dataclass
class StabilityCertificate:
    """Two-time-scale comparison system with trace-fitted gains.

    ``matrix = [[sqrt(gamma), eps c12], [c21, mu^H + eps c22]]``.
    """

    gamma: float
    mu: float
    h_iters: int
    eps: float
    c12: float
    c21: float
    c22: float
    matrix: np.ndarray
    spectral_radius: float
    schur: bool
    entrywise: bool
    eps_bound: float
    envelope: Envelope | None

    def as_dict(self) -> dict:
        out = {
            "gamma": self.gamma,
            "mu": self.mu,
            "h_iters": self.h_iters,
            "eps": self.eps,
            "c12": self.c12,
            "c21": self.c21,
            "c22": self.c22,
            "matrix": self.matrix.tolist(),
            "spectral_radius": self.spectral_radius,
            "schur": self.schur,
            "entrywise": self.entrywise,
            "eps_bound": self.eps_bound,
        }
        if self.envelope is not None:
            out["envelope"] = {
                "k0": self.envelope.k0,
                "k1": self.envelope.k1,
                "slope": self.envelope.slope,
                "lam": self.envelope.lam,
                "C": self.envelope.C,
                "residual": self.envelope.residual,
            }
        return out


def _fit_slow_gain(w: np.ndarray, d: np.ndarray, a11: float, eps: float, rtol: float) -> float:
    excess = w[1:] - a11 * w[:-1]
    slack = rtol * np.maximum(w[1:], w[:-1])
    pos = d[:-1] > 0
    if np.any((~pos) & (excess > slack)):
        return float("inf")
    if not np.any(pos):
        return 0.0
    return float(max(0.0, np.max(excess[pos] / (eps * d[:-1][pos]))))


def _fit_fast_gains(w: np.ndarray, d: np.ndarray, a22: float, eps: float, rtol: float) -> tuple[float, float]:
    target = d[1:] - a22 * d[:-1]
    slack = rtol * np.maximum(d[1:], d[:-1])
    active = target > slack
    if not np.any(active):
        return 0.0, 0.0
    wa, da, ta = w[:-1][active], d[:-1][active], target[active]
    if np.any((wa == 0) & (da == 0)):
        return float("inf"), float("inf")
    res = linprog(
        c=[np.mean(w), eps * np.mean(d)],
        A_ub=-np.column_stack([wa, eps * da]),
        b_ub=-ta,
        bounds=[(0, None), (0, None)],
        method="highs",
    )
    if not res.success:
        return float("inf"), float("inf")
    return float(res.x[0]), float(res.x[1])


def small_gain_certificate(
    w: np.ndarray,
    d: np.ndarray,
    eps: float,
    gamma: float,
    h_iters: int,
    mu: float,
    envelope_window: tuple[int, int] | None = None,
    rtol: float = 1e-9,
) -> StabilityCertificate:
    """Fit the comparison-system gains on a trace and test Schur stability.

    Parameters
    ----------
    w : ndarray
        Slow state ``sqrt(V_k)``.
    d : ndarray
        Fast state: distance of the warm-started duals to the step's
        equilibrium set.
    eps, gamma : float
        Correction gain and (scalar or bounding) forgetting factor.
    h_iters : int
        ADMM rounds per step.
    mu : float
        Per-round contraction factor of the frozen ADMM, measured separately.
    envelope_window : (int, int), optional
        Range of ``k`` for the exponential envelope fit; whole trace by default.

    Notes
    -----
    ``c12`` is the smallest constant with ``w_{k+1} <= sqrt(gamma) w_k +
    eps c12 d_k`` on the trace. ``(c21, c22)`` minimize the mean bound subject
    to ``d_{k+1} <= c21 w_k + (mu^H + eps c22) d_k`` at every step (a small
    linear program).
    """
    w = np.asarray(w, dtype=float)
    d = np.asarray(d, dtype=float)
    if w.shape != d.shape:
        raise DimensionError("w and d must have the same length")
    if len(w) < 10:
        raise InsufficientData(f"certificate needs at least 10 steps, got {len(w)}")
    a11 = float(np.sqrt(gamma))
    muH = float(mu) ** int(h_iters)
    c12 = _fit_slow_gain(w, d, a11, eps, rtol)
    c21, c22 = _fit_fast_gains(w, d, muH, eps, rtol)
    M = np.array([[a11, eps * c12], [c21, muH + eps * c22]])
    finite = bool(np.all(np.isfinite(M)))
    rho = float(np.max(np.abs(np.linalg.eigvals(M)))) if finite else float("inf")
    entrywise = finite and M[0, 0] < 1 and M[1, 1] < 1 and np.linalg.det(np.eye(2) - M) > 0
    denom = c12 * c21 + (1 - a11) * c22
    eps_bound = float((1 - a11) * (1 - muH) / denom) if denom > 0 else float("inf")
    env = None
    try:
        k0, k1 = envelope_window if envelope_window else (0, len(w))
        env = exponential_envelope(w, d, k0, k1)
    except InsufficientData:
        pass
    return StabilityCertificate(
        gamma=float(gamma),
        mu=float(mu),
        h_iters=int(h_iters),
        eps=float(eps),
        c12=c12,
        c21=c21,
        c22=c22,
        matrix=M,
        spectral_radius=rho,
        schur=bool(rho < 1),
        entrywise=bool(entrywise),
        eps_bound=eps_bound,
        envelope=env,
    )


# -- matrix forgetting factor -----------------------------------------------------


@dataclass
class MatrixForgettingReport:
    """Per-step values of the three sufficient conditions and their worst case.

    ``cond_congruence``: ``||S^{1/2} G S^{-1/2}||^2``;
    ``cond_condition_number``: ``||G||^2 kappa(S)``;
    ``cond_run_bounds``: ``||G||^2 s_max / s_min`` with run-level eigen bounds.
    """

    cond_congruence: np.ndarray
    cond_condition_number: np.ndarray
    cond_run_bounds: np.ndarray
    gamma_bar: dict[str, float]
    ordered: bool

    @property
    def holds(self) -> dict[str, bool]:
        return {k: v < 1.0 for k, v in self.gamma_bar.items()}


def matrix_ff_conditions(S_trace, Gamma) -> MatrixForgettingReport:
    """Evaluate the congruence, condition-number and run-bound tests per step."""
    S_trace = [np.asarray(S, dtype=float) for S in S_trace]
    if not S_trace:
        raise InsufficientData("empty information trace")
    n = S_trace[0].shape[0]
    G = np.asarray(Gamma, dtype=float)
    if G.ndim == 0:
        G = float(G) * np.eye(n)
    elif G.ndim == 1:
        G = np.diag(G)
    if G.shape != (n, n):
        raise DimensionError(f"Gamma has shape {G.shape}, expected ({n}, {n})")
    g2 = np.linalg.norm(G, 2) ** 2
    c1, c2, lmins, lmaxs = [], [], [], []
    for k, S in enumerate(S_trace):
        lam, V = np.linalg.eigh(0.5 * (S + S.T))
        if lam[0] <= 0:
            raise NotSPD(f"information matrix not positive definite at step {k}", k=k)
        r = np.sqrt(lam)
        # ||D^{1/2} V^T G V D^{-1/2}|| is invariant to the outer rotations
        M = (r[:, None] * (V.T @ G @ V)) / r[None, :]
        c1.append(np.linalg.norm(M, 2) ** 2)
        c2.append(g2 * lam[-1] / lam[0])
        lmins.append(lam[0])
        lmaxs.append(lam[-1])
    c1, c2 = np.array(c1), np.array(c2)
    c3 = np.full(len(S_trace), g2 * max(lmaxs) / min(lmins))
    tol = 1e-12
    ordered = bool(np.all(c1 <= c2 * (1 + tol) + tol) and np.all(c2 <= c3 * (1 + tol) + tol))
    return MatrixForgettingReport(
        cond_congruence=c1,
        cond_condition_number=c2,
        cond_run_bounds=c3,
        gamma_bar={
            "congruence": float(c1.max()),
            "condition_number": float(c2.max()),
            "run_bounds": float(c3.max()),
        },
        ordered=ordered,
    )


# -- closed-loop error identity ---------------------------------------------------


@dataclass
class ErrorDynamicsReport:
    residuals: np.ndarray
    relative: np.ndarray
    worst_relative: float
    rtol: float

    @property
    def passed(self) -> bool:
        return self.worst_relative <= self.rtol


def error_dynamics_check(
    x_tilde: np.ndarray,
    xi_tilde: np.ndarray,
    S_post: list[np.ndarray],
    S_prior: list[np.ndarray],
    A: list[np.ndarray],
    eps: float,
    rtol: float = 1e-9,
    atol: float = 0.0,
) -> ErrorDynamicsReport:
    """Check ``x~_{k+1} = A_k S_post^{-1} S_prior x~_k + eps A_k xi~_k`` step by step.

    ``x_tilde`` holds prior errors (rows), ``xi_tilde`` the correction errors
    ``S^{-1} b - xi_hat``. The relative residual is taken against the sum of
    the norms of the terms; ``atol`` absorbs rounding in forming ``x - x_hat``
    when the states themselves are large.
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    xi_tilde = np.asarray(xi_tilde, dtype=float)
    n_steps = len(x_tilde) - 1
    res, rel = [], []
    for k in range(n_steps):
        Phi = A[k] @ np.linalg.solve(S_post[k], S_prior[k])
        t1 = Phi @ x_tilde[k]
        t2 = eps * A[k] @ xi_tilde[k]
        r = np.linalg.norm(x_tilde[k + 1] - t1 - t2)
        scale = np.linalg.norm(x_tilde[k + 1]) + np.linalg.norm(t1) + np.linalg.norm(t2)
        res.append(r)
        rel.append(0.0 if r <= atol else r / max(scale, np.finfo(float).tiny))
    rel = np.array(rel)
    return ErrorDynamicsReport(np.array(res), rel, float(rel.max()) if rel.size else 0.0, rtol)
