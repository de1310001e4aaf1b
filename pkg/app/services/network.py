"""Communication graphs, the pairwise averaging operator and spectral analysis."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterable, List, MutableSequence, Tuple

import networkx as nx
import numpy as np

from ..errors import ConfigurationError, DataError, GenerationError, PreconditionError
from .lda_core import SufficientStats


logger = logging.getLogger(__name__)

WATTS_STROGATZ_TRIES = 100

Edge = Tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph over agents ``0..n-1``."""

    n: int
    edges: FrozenSet[Edge]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigurationError("a graph needs at least one node")
        normalized = set()
        for i, j in self.edges:
            if i == j:
                raise ConfigurationError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ConfigurationError(f"edge ({i}, {j}) references a node outside [0, {self.n})")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_networkx(cls, graph: nx.Graph) -> "Graph":
        return cls(graph.number_of_nodes(), frozenset((int(i), int(j)) for i, j in graph.edges()))

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(self.edges)
        return graph

    def edge_list(self) -> List[Edge]:
        """Edges in a canonical order, used for uniform sampling."""

        return sorted(self.edges)

    def degrees(self) -> np.ndarray:
        degrees = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            degrees[i] += 1
            degrees[j] += 1
        return degrees

    def is_connected(self) -> bool:
        return self.n == 1 or nx.is_connected(self.to_networkx())

    def is_regular(self) -> bool:
        degrees = self.degrees()
        return bool(np.all(degrees == degrees[0]))

    def require_connected(self) -> None:
        if not self.is_connected():
            raise PreconditionError("the communication graph must be connected")


@dataclass(frozen=True, eq=False)
class AveragingMatrix:
    w: np.ndarray


@dataclass(frozen=True)
class SpectralSummary:
    lambda2: float
    gap: float


def complete_graph(n: int) -> Graph:
    if n < 2:
        raise ConfigurationError("complete graph requires n >= 2")
    return Graph.from_networkx(nx.complete_graph(n))


def watts_strogatz(n: int, k: int, p: float, rng: np.random.Generator) -> Graph:
    """Connected Watts-Strogatz graph with ``n * k / 2`` edges.

    Rewiring that disconnects the graph triggers a whole-graph regeneration,
    up to ``WATTS_STROGATZ_TRIES`` attempts.
    """

    if k < 2 or k % 2 or n <= k:
        raise ConfigurationError(f"watts_strogatz requires n > k >= 2 with k even, got n={n}, k={k}")
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"rewiring probability must lie in [0, 1], got {p}")
    seed = int(rng.integers(2**32))
    try:
        graph = nx.connected_watts_strogatz_graph(n, k, p, tries=WATTS_STROGATZ_TRIES, seed=seed)
    except nx.NetworkXError as exc:
        raise GenerationError(f"no connected Watts-Strogatz graph after {WATTS_STROGATZ_TRIES} tries") from exc
    return Graph.from_networkx(graph)


def averaging_operator(n: int, i: int, j: int) -> np.ndarray:
    """The realized W = I - (e_i - e_j)(e_i - e_j)^T / 2 for the active pair (i, j)."""

    _check_pair(n, i, j)
    difference = np.zeros(n)
    difference[i] = 1.0
    difference[j] = -1.0
    return np.eye(n) - 0.5 * np.outer(difference, difference)


def expected_averaging_matrix(graph: Graph) -> AveragingMatrix:
    """E[W] under uniform edge sampling: I - L / (2|E|) with L the graph Laplacian."""

    graph.require_connected()
    if not graph.edges:
        raise PreconditionError("the graph has no edges to average over")
    laplacian = nx.laplacian_matrix(graph.to_networkx(), nodelist=list(range(graph.n))).toarray().astype(float)
    w = np.eye(graph.n) - laplacian / (2.0 * len(graph.edges))
    return AveragingMatrix(w=w)


def spectral_gap(graph: Graph) -> SpectralSummary:
    """Second largest eigenvalue of E[W] and the gap ``1 - lambda2``."""

    matrix = expected_averaging_matrix(graph).w
    eigenvalues = np.linalg.eigvalsh(matrix)
    lambda2 = float(max(eigenvalues[-2], 0.0))
    return SpectralSummary(lambda2=lambda2, gap=1.0 - lambda2)


def _check_pair(n: int, i: int, j: int) -> None:
    if i == j:
        raise PreconditionError(f"cannot average node {i} with itself")
    if not (0 <= i < n and 0 <= j < n):
        raise PreconditionError(f"pair ({i}, {j}) is outside [0, {n})")


def apply_pairwise_average(states: MutableSequence[SufficientStats], i: int, j: int) -> MutableSequence[SufficientStats]:
    """Replace ``states[i]`` and ``states[j]`` by their entrywise mean, in place."""

    _check_pair(len(states), i, j)
    mean = SufficientStats(0.5 * (states[i].counts + states[j].counts))
    states[i] = mean
    states[j] = mean
    return states


def save_graph(path: str | Path, graph: Graph) -> None:
    lines = [f"n={graph.n}"]
    lines.extend(f"{i} {j}" for i, j in graph.edge_list())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> Graph:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("n="):
        raise DataError(f"{path}: missing 'n=<int>' header")
    try:
        n = int(lines[0][2:])
        edges: Iterable[Edge] = [tuple(int(token) for token in line.split()) for line in lines[1:] if line.strip()]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if any(len(edge) != 2 for edge in edges):
        raise DataError(f"{path}: edge lines must hold exactly two node indices")
    return Graph(n, frozenset(edges))  # type: ignore[arg-type]
