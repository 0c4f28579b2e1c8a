"""Sensing/communication graphs and the index bookkeeping built on them.

Agents are indexed ``0 .. N-1``. Undirected edges are stored canonically as
``(min, max)`` and sorted lexicographically; every stacked vector in the
package uses that order.

Stacked dual vector layout
--------------------------
For every agent ``i`` (in index order) with sorted neighbours ``j_1 < ... < j_m``
the dual slice is::

    q_i = [q_{i j_1, i}, ..., q_{i j_m, i}, q_{i j_1, j_1}, ..., q_{i j_m, j_m}]

where ``q_{ij, v}`` is held by agent ``i`` and multiplies its copy of the
variable of agent ``v``. Each slot is a ``d``-vector, so the full vector has
``sum_i 2 |N_i| d = 4 |E_c| d`` entries. The pairing permutation swaps
``q_{ij, v}`` with ``q_{ji, v}``: the two endpoint duals that act on the same
variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, InvalidAgentIndex, InvalidEdge, InvalidParameter

Edge = tuple[int, int]


@dataclass(frozen=True)
class SensingTopology:
    """Directed sensing graph, its undirected closure and the anchor set.

    Build instances with :func:`build_topology`; the constructor does not
    symmetrize.
    """

    n_agents: int
    sensing_edges: tuple[Edge, ...]
    comm_edges: tuple[Edge, ...]
    anchors: tuple[int, ...]
    state_dim: int

    def __post_init__(self):
        expected = _symmetrize(self.sensing_edges)
        if tuple(self.comm_edges) != expected:
            raise InvalidEdge("comm_edges must be the undirected closure of sensing_edges")

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_agents)]
        for i, j in self.comm_edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def edge_index(self) -> dict[Edge, int]:
        """Map from canonical undirected edge to its position in ``comm_edges``."""
        return {e: n for n, e in enumerate(self.comm_edges)}

    @cached_property
    def sensing_set(self) -> frozenset[Edge]:
        return frozenset(self.sensing_edges)

    @cached_property
    def anchor_set(self) -> frozenset[int]:
        return frozenset(self.anchors)

    @property
    def n_edges(self) -> int:
        return len(self.comm_edges)

    @property
    def dim(self) -> int:
        """Dimension of the stacked global state."""
        return self.n_agents * self.state_dim

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def edge_id(self, i: int, j: int) -> int:
        """Index of the undirected edge ``{i, j}``; raises ``KeyError`` if absent."""
        return self.edge_index[(i, j) if i < j else (j, i)]

    def has_sensing(self, i: int, j: int) -> bool:
        return (i, j) in self.sensing_set

    def agent_slice(self, i: int) -> slice:
        d = self.state_dim
        return slice(i * d, (i + 1) * d)

    def components(self) -> list[list[int]]:
        """Connected components of the communication graph, each sorted."""
        seen = [False] * self.n_agents
        comps = []
        for root in range(self.n_agents):
            if seen[root]:
                continue
            stack, comp = [root], []
            seen[root] = True
            while stack:
                v = stack.pop()
                comp.append(v)
                for w in self.neighbors[v]:
                    if not seen[w]:
                        seen[w] = True
                        stack.append(w)
            comps.append(sorted(comp))
        return comps


def _symmetrize(sensing_edges: Iterable[Edge]) -> tuple[Edge, ...]:
    return tuple(sorted({(min(i, j), max(i, j)) for i, j in sensing_edges}))


def build_topology(
    n_agents: int,
    sensing_edges: Iterable[Sequence[int]],
    anchor_set: Iterable[int] = (),
    state_dim: int = 1,
) -> SensingTopology:
    """Validate a sensing graph and derive the communication graph.

    Parameters
    ----------
    n_agents : int
        Number of agents ``N``.
    sensing_edges : iterable of pairs
        Directed pairs ``(i, j)``: agent ``i`` measures relative to ``j``.
        Duplicates collapse.
    anchor_set : iterable of int
        Agents carrying a local (absolute) measurement.
    state_dim : int
        Per-agent state dimension ``d``.
    """
    if int(n_agents) < 1:
        raise InvalidParameter(f"n_agents must be positive, got {n_agents}")
    if int(state_dim) < 1:
        raise InvalidParameter(f"state_dim must be positive, got {state_dim}")
    n_agents = int(n_agents)
    edges = set()
    for e in sensing_edges:
        i, j = (int(v) for v in e)
        for v in (i, j):
            if not 0 <= v < n_agents:
                raise InvalidAgentIndex(f"agent index {v} outside 0..{n_agents - 1}")
        if i == j:
            raise InvalidEdge(f"self-loop on agent {i}")
        edges.add((i, j))
    anchors = set()
    for a in anchor_set:
        a = int(a)
        if not 0 <= a < n_agents:
            raise InvalidAgentIndex(f"anchor index {a} outside 0..{n_agents - 1}")
        anchors.add(a)
    sensing = tuple(sorted(edges))
    return SensingTopology(
        n_agents=n_agents,
        sensing_edges=sensing,
        comm_edges=_symmetrize(sensing),
        anchors=tuple(sorted(anchors)),
        state_dim=int(state_dim),
    )


@dataclass(frozen=True)
class DualLayout:
    """Slot bookkeeping for the stacked dual vector.

    Attributes
    ----------
    slot_owner, slot_neighbor, slot_var : ndarray of int
        For every ``d``-block slot ``s``: the agent holding it, the neighbour
        of the edge it belongs to, and the agent whose variable it multiplies.
    slot_pair : ndarray of int
        Block-level pairing, ``slot_pair[slot_pair] == arange``.
    perm : ndarray of int
        Entry-level pairing, ``(P q) == q[perm]``.
    """

    topology: SensingTopology
    offsets: np.ndarray
    slot_owner: np.ndarray
    slot_neighbor: np.ndarray
    slot_var: np.ndarray
    slot_pair: np.ndarray
    perm: np.ndarray = field(repr=False)

    @property
    def n_slots(self) -> int:
        return len(self.slot_owner)

    @property
    def size(self) -> int:
        return self.n_slots * self.topology.state_dim

    def agent_slice(self, i: int) -> slice:
        """Entry range of agent ``i``'s dual slice ``q_i``."""
        d = self.topology.state_dim
        return slice(self.offsets[i] * d, self.offsets[i + 1] * d)

    def slot(self, owner: int, neighbor: int, var: int) -> int:
        """Block index of ``q_{owner neighbor, var}``."""
        nbrs = self.topology.neighbors[owner]
        pos = nbrs.index(neighbor)
        if var == owner:
            return int(self.offsets[owner] + pos)
        if var == neighbor:
            return int(self.offsets[owner] + len(nbrs) + pos)
        raise InvalidAgentIndex(f"variable {var} is not an endpoint of ({owner}, {neighbor})")

    def entries(self, slot: int) -> slice:
        d = self.topology.state_dim
        return slice(slot * d, (slot + 1) * d)


def build_dual_layout(topology: SensingTopology) -> DualLayout:
    """Enumerate dual slots in canonical order and build the pairing map."""
    owners, nbrs_, vars_ = [], [], []
    offsets = [0]
    for i in range(topology.n_agents):
        nbrs = topology.neighbors[i]
        for j in nbrs:
            owners.append(i)
            nbrs_.append(j)
            vars_.append(i)
        for j in nbrs:
            owners.append(i)
            nbrs_.append(j)
            vars_.append(j)
        offsets.append(offsets[-1] + 2 * len(nbrs))
    owner = np.array(owners, dtype=np.intp)
    neighbor = np.array(nbrs_, dtype=np.intp)
    var = np.array(vars_, dtype=np.intp)
    lookup = {(int(o), int(n), int(v)): s for s, (o, n, v) in enumerate(zip(owner, neighbor, var))}
    pair = np.array(
        [lookup[(int(n), int(o), int(v))] for o, n, v in zip(owner, neighbor, var)], dtype=np.intp
    )
    d = topology.state_dim
    perm = (pair[:, None] * d + np.arange(d)[None, :]).reshape(-1)
    return DualLayout(
        topology=topology,
        offsets=np.array(offsets, dtype=np.intp),
        slot_owner=owner,
        slot_neighbor=neighbor,
        slot_var=var,
        slot_pair=pair,
        perm=perm,
    )


def apply_pairing(layout: DualLayout, q: np.ndarray) -> np.ndarray:
    """Return ``P q``: each dual entry swapped with its partner across the edge."""
    q = np.asarray(q, dtype=float)
    if q.shape != (layout.size,):
        raise DimensionError(f"dual vector has shape {q.shape}, expected ({layout.size},)")
    return q[layout.perm]


# -- selection maps (E_i, E_ij, A_qi, Sigma_i) as index operations ----------------


def aq_transpose(layout: DualLayout, i: int, q_i: np.ndarray) -> np.ndarray:
    """``A_qi^T q_i = [sum_j q_{ij,i}; col_j q_{ij,j}]`` for agent ``i``."""
    d = layout.topology.state_dim
    m = layout.topology.degree(i)
    blocks = np.asarray(q_i, dtype=float).reshape(2 * m, d)
    return np.concatenate([blocks[:m].sum(axis=0), blocks[m:].reshape(-1)])


def aq_apply(layout: DualLayout, i: int, xi_ext: np.ndarray) -> np.ndarray:
    """``A_qi xi_Ni``: own copy repeated once per neighbour, then neighbour copies."""
    d = layout.topology.state_dim
    m = layout.topology.degree(i)
    xi_ext = np.asarray(xi_ext, dtype=float)
    own = np.tile(xi_ext[:d], m)
    return np.concatenate([own, xi_ext[d:]])


def sigma_select(layout_or_topology, xi_ext: np.ndarray) -> np.ndarray:
    """Agent's own copy: the first ``d`` entries of its extended local vector."""
    topo = getattr(layout_or_topology, "topology", layout_or_topology)
    return np.asarray(xi_ext)[: topo.state_dim]


def dense_aq(layout: DualLayout) -> np.ndarray:
    """Block-diagonal ``A_q`` as a dense matrix (analysis use only)."""
    topo = layout.topology
    d = topo.state_dim
    blocks = []
    for i in range(topo.n_agents):
        m = topo.degree(i)
        if m == 0:
            blocks.append(np.zeros((0, d)))
            continue
        top = np.hstack([np.kron(np.ones((m, 1)), np.eye(d)), np.zeros((m * d, m * d))])
        bottom = np.hstack([np.zeros((m * d, d)), np.eye(m * d)])
        blocks.append(np.vstack([top, bottom]))
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def dense_pairing(layout: DualLayout) -> np.ndarray:
    """Pairing permutation ``P`` as a dense matrix."""
    n = layout.size
    P = np.zeros((n, n))
    P[np.arange(n), layout.perm] = 1.0
    return P


def extended_offsets(topology: SensingTopology) -> np.ndarray:
    """Offsets of each agent's extended local vector within the stacked primal."""
    d = topology.state_dim
    sizes = [(1 + topology.degree(i)) * d for i in range(topology.n_agents)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
