"""Decentralized LDA training loops (synchronous and asynchronous gossip) and the centralized G-OEM baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Sequence

import numpy as np
from prometheus_client import Counter

from ..errors import ConfigurationError, DataError, PreconditionError
from ..models import EStepConfig, ScheduleConfig
from .lda_core import (
    DEFAULT_SMOOTHING,
    DirichletParams,
    Document,
    SufficientStats,
    goem_step,
    initial_stats,
    load_matrix,
    m_step,
    save_matrix,
)
from .network import Edge, Graph, apply_pairwise_average


logger = logging.getLogger(__name__)

LOCAL_UPDATES = Counter(
    "deleda_local_updates_total",
    "Local G-OEM updates performed by the agents",
    ["mode"],
)

AVERAGING_STEPS = Counter(
    "deleda_averaging_steps_total",
    "Pairwise gossip averaging steps",
    ["mode"],
)

Mode = Literal["sync", "async"]


@dataclass(frozen=True)
class StepSchedule:
    """rho_t = (t + t0)^-kappa, or a constant step when ``constant`` is set."""

    t0: float = 10.0
    kappa: float = 0.6
    constant: float | None = None

    def __post_init__(self) -> None:
        if self.constant is not None:
            if not 0.0 <= self.constant <= 1.0:
                raise ConfigurationError("a constant step size must lie in [0, 1]")
            return
        if self.t0 < 0 or not 0.5 < self.kappa <= 1.0:
            raise ConfigurationError("step schedule requires t0 >= 0 and kappa in (0.5, 1]")

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "StepSchedule":
        if config.kind == "constant":
            return cls(constant=config.rho)
        return cls(t0=config.t0, kappa=config.kappa)

    def rho(self, t: int) -> float:
        if t < 1:
            raise ConfigurationError("step sizes are indexed from t = 1")
        if self.constant is not None:
            return self.constant
        return float((t + self.t0) ** -self.kappa)


@dataclass(frozen=True)
class BatchPolicy:
    """Documents used by one local update: the full shard, or ``size`` drawn without replacement."""

    size: int | None = None

    def draw(self, corpus: Sequence[Document], rng: np.random.Generator) -> List[Document]:
        if self.size is None or self.size >= len(corpus):
            return list(corpus)
        chosen = rng.choice(len(corpus), size=self.size, replace=False)
        return [corpus[index] for index in chosen]


@dataclass(eq=False)
class NodeState:
    """One agent: its private shard, current statistics, RNG stream and local clock."""

    node_id: int
    corpus: List[Document]
    stats: SufficientStats
    rng: np.random.Generator
    updates: int = 0

    def __post_init__(self) -> None:
        if not self.corpus:
            raise DataError(f"node {self.node_id} has an empty corpus")

    @property
    def mean_length(self) -> float:
        return float(np.mean([len(doc) for doc in self.corpus]))


@dataclass
class TrajectoryRecord:
    iteration: int
    consensus_gap: float
    docs_processed: int
    averaging_steps: int
    mean_stats: np.ndarray
    node_stats: np.ndarray | None = None


@dataclass
class StepOutcome:
    """What one iteration did; ``expected`` maps node id to the E-step mean it mixed in.

    ``rhos`` maps node id to the step size that node used. ``rho`` is the common step of a
    synchronous or centralized iteration and ``None`` for an asynchronous event.
    """

    iteration: int
    edge: Edge | None
    rho: float | None
    rhos: Dict[int, float] = field(default_factory=dict)
    expected: Dict[int, SufficientStats] = field(default_factory=dict)


RecordCallback = Callable[[TrajectoryRecord], None]


def make_nodes(
    shards: Sequence[Sequence[Document]],
    n_topics: int,
    vocab_size: int,
    seed_sequence: np.random.SeedSequence,
) -> List[NodeState]:
    """Nodes with independent RNG streams and the small random initial statistics."""

    nodes: List[NodeState] = []
    for node_id, (shard, child) in enumerate(zip(shards, seed_sequence.spawn(len(shards)))):
        rng = np.random.default_rng(child)
        corpus = list(shard)
        if not corpus:
            raise DataError(f"node {node_id} has an empty corpus")
        mean_length = float(np.mean([len(doc) for doc in corpus]))
        stats = initial_stats(n_topics, vocab_size, mean_length, rng)
        nodes.append(NodeState(node_id=node_id, corpus=corpus, stats=stats, rng=rng))
    return nodes


def _counts_of(item: NodeState | SufficientStats | np.ndarray) -> np.ndarray:
    if isinstance(item, NodeState):
        return item.stats.counts
    if isinstance(item, SufficientStats):
        return item.counts
    return np.asarray(item, dtype=float)


def network_mean(nodes: Sequence[NodeState | SufficientStats | np.ndarray]) -> np.ndarray:
    return np.mean(np.stack([_counts_of(node) for node in nodes]), axis=0)


def consensus_gap(nodes: Sequence[NodeState | SufficientStats | np.ndarray]) -> float:
    """Frobenius norm of the stacked deviations of the node statistics from their average."""

    if not nodes:
        raise PreconditionError("consensus_gap needs at least one node")
    stacked = np.stack([_counts_of(node) for node in nodes])
    return float(np.linalg.norm(stacked - stacked.mean(axis=0)))


class DecentralizedSimulator:
    """Gossip G-OEM over a graph of agents; one event stream defines the whole run."""

    def __init__(
        self,
        graph: Graph,
        nodes: List[NodeState],
        schedule: StepSchedule,
        estep: EStepConfig,
        prior: DirichletParams,
        edge_rng: np.random.Generator,
        *,
        batch_policy: BatchPolicy | None = None,
        smoothing: float = DEFAULT_SMOOTHING,
    ) -> None:
        graph.require_connected()
        if len(nodes) != graph.n:
            raise PreconditionError(f"graph has {graph.n} nodes but {len(nodes)} node states were given")
        shapes = {node.stats.shape for node in nodes}
        if len(shapes) != 1:
            raise PreconditionError(f"node statistics disagree on shape: {sorted(shapes)}")
        if shapes.pop()[0] != prior.n_topics:
            raise PreconditionError("node statistics and the prior disagree on K")
        self._graph = graph
        self._edges = graph.edge_list()
        self.nodes = nodes
        self._schedule = schedule
        self._estep = estep
        self._prior = prior
        self.edge_rng = edge_rng
        self._batch_policy = batch_policy or BatchPolicy()
        self._smoothing = smoothing
        self.iteration = 0
        self.docs_processed = 0
        self.averaging_steps = 0

    @property
    def graph(self) -> Graph:
        return self._graph

    def draw_edge(self) -> Edge:
        return self._edges[int(self.edge_rng.integers(len(self._edges)))]

    def _average(self, edge: Edge, mode: Mode) -> None:
        i, j = edge
        states = [node.stats for node in self.nodes]
        apply_pairwise_average(states, i, j)
        self.nodes[i].stats = states[i]
        self.nodes[j].stats = states[j]
        self.averaging_steps += 1
        AVERAGING_STEPS.labels(mode=mode).inc()

    def _local_update(self, node: NodeState, rho: float, mode: Mode) -> SufficientStats:
        batch = self._batch_policy.draw(node.corpus, node.rng)
        topic_matrix = m_step(node.stats, self._smoothing)
        node.stats, expected = goem_step(node.stats, batch, topic_matrix, self._prior, rho, self._estep, node.rng)
        node.updates += 1
        self.docs_processed += len(batch)
        LOCAL_UPDATES.labels(mode=mode).inc()
        return expected

    def step_sync(self) -> StepOutcome:
        """One iteration of the synchronous algorithm: one gossip average, then every node updates."""

        t = self.iteration + 1
        rho = self._schedule.rho(t)
        edge = self.draw_edge()
        self._average(edge, "sync")
        outcome = StepOutcome(iteration=t, edge=edge, rho=rho)
        if rho > 0.0:
            for node in self.nodes:
                outcome.rhos[node.node_id] = rho
                outcome.expected[node.node_id] = self._local_update(node, rho, "sync")
        self.iteration = t
        logger.debug("sync iteration %d: edge %s rho %.6f", t, edge, rho)
        return outcome

    def step_async(self) -> StepOutcome:
        """One asynchronous event: the active pair averages, then only those two nodes update.

        Each node's step size follows its own update counter.
        """

        t = self.iteration + 1
        edge = self.draw_edge()
        self._average(edge, "async")
        outcome = StepOutcome(iteration=t, edge=edge, rho=None)
        for node_id in edge:
            node = self.nodes[node_id]
            rho = self._schedule.rho(node.updates + 1)
            outcome.rhos[node_id] = rho
            if rho > 0.0:
                outcome.expected[node_id] = self._local_update(node, rho, "async")
        self.iteration = t
        logger.debug("async iteration %d: edge %s", t, edge)
        return outcome

    def record(self, keep_node_stats: bool = True) -> TrajectoryRecord:
        stacked = np.stack([node.stats.counts for node in self.nodes])
        mean = stacked.mean(axis=0)
        return TrajectoryRecord(
            iteration=self.iteration,
            consensus_gap=float(np.linalg.norm(stacked - mean)),
            docs_processed=self.docs_processed,
            averaging_steps=self.averaging_steps,
            mean_stats=mean,
            node_stats=stacked if keep_node_stats else None,
        )

    def run(
        self,
        mode: Mode,
        iterations: int,
        *,
        cadence: int = 10,
        on_record: RecordCallback | None = None,
        keep_node_stats: bool = True,
    ) -> List[TrajectoryRecord]:
        """Advance until ``iterations`` total iterations, recording at the cadence and at the end."""

        if mode not in ("sync", "async"):
            raise ConfigurationError(f"unknown decentralized mode {mode!r}")
        if cadence < 1:
            raise ConfigurationError("cadence must be positive")
        if mode == "async" and not self._graph.is_regular():
            logger.warning(
                "asynchronous updates on an irregular graph use no degree correction; "
                "the network average is biased towards high-degree nodes"
            )
        step = self.step_sync if mode == "sync" else self.step_async
        trajectory: List[TrajectoryRecord] = []

        def emit() -> None:
            record = self.record(keep_node_stats)
            trajectory.append(record)
            if on_record is not None:
                on_record(record)

        if self.iteration == 0:
            emit()
        while self.iteration < iterations:
            step()
            if self.iteration % cadence == 0 or self.iteration == iterations:
                emit()
        return trajectory


class CentralizedGOEM:
    """Plain G-OEM on the pooled corpus: each iteration draws a batch uniformly without replacement."""

    def __init__(
        self,
        corpus: Sequence[Document],
        stats: SufficientStats,
        schedule: StepSchedule,
        batch_size: int,
        estep: EStepConfig,
        prior: DirichletParams,
        rng: np.random.Generator,
        *,
        smoothing: float = DEFAULT_SMOOTHING,
    ) -> None:
        if not corpus:
            raise DataError("the centralized corpus is empty")
        if not 1 <= batch_size <= len(corpus):
            raise ConfigurationError(f"batch_size must lie in [1, {len(corpus)}], got {batch_size}")
        self._corpus = list(corpus)
        self.stats = stats
        self._schedule = schedule
        self._batch_size = batch_size
        self._estep = estep
        self._prior = prior
        self.rng = rng
        self._smoothing = smoothing
        self.iteration = 0
        self.docs_processed = 0

    def step(self) -> StepOutcome:
        t = self.iteration + 1
        rho = self._schedule.rho(t)
        outcome = StepOutcome(iteration=t, edge=None, rho=rho)
        if rho > 0.0:
            if self._batch_size == len(self._corpus):
                batch = self._corpus
            else:
                chosen = self.rng.choice(len(self._corpus), size=self._batch_size, replace=False)
                batch = [self._corpus[index] for index in chosen]
            topic_matrix = m_step(self.stats, self._smoothing)
            self.stats, expected = goem_step(self.stats, batch, topic_matrix, self._prior, rho, self._estep, self.rng)
            outcome.rhos[0] = rho
            outcome.expected[0] = expected
            self.docs_processed += len(batch)
            LOCAL_UPDATES.labels(mode="centralized").inc()
        self.iteration = t
        return outcome

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(
            iteration=self.iteration,
            consensus_gap=0.0,
            docs_processed=self.docs_processed,
            averaging_steps=0,
            mean_stats=np.array(self.stats.counts),
        )

    def run(
        self,
        iterations: int,
        *,
        cadence: int = 10,
        on_record: RecordCallback | None = None,
    ) -> List[TrajectoryRecord]:
        if cadence < 1:
            raise ConfigurationError("cadence must be positive")
        trajectory: List[TrajectoryRecord] = []

        def emit() -> None:
            record = self.record()
            trajectory.append(record)
            if on_record is not None:
                on_record(record)

        if self.iteration == 0:
            emit()
        while self.iteration < iterations:
            self.step()
            if self.iteration % cadence == 0 or self.iteration == iterations:
                emit()
        return trajectory


def run_sync(
    graph: Graph,
    nodes: List[NodeState],
    schedule: StepSchedule,
    iterations: int,
    batch_policy: BatchPolicy,
    estep: EStepConfig,
    *,
    prior: DirichletParams,
    edge_rng: np.random.Generator,
    cadence: int = 10,
    smoothing: float = DEFAULT_SMOOTHING,
    on_record: RecordCallback | None = None,
) -> List[TrajectoryRecord]:
    simulator = DecentralizedSimulator(
        graph, nodes, schedule, estep, prior, edge_rng, batch_policy=batch_policy, smoothing=smoothing
    )
    return simulator.run("sync", iterations, cadence=cadence, on_record=on_record)


def run_async(
    graph: Graph,
    nodes: List[NodeState],
    schedule: StepSchedule,
    iterations: int,
    batch_policy: BatchPolicy,
    estep: EStepConfig,
    *,
    prior: DirichletParams,
    edge_rng: np.random.Generator,
    cadence: int = 10,
    smoothing: float = DEFAULT_SMOOTHING,
    on_record: RecordCallback | None = None,
) -> List[TrajectoryRecord]:
    simulator = DecentralizedSimulator(
        graph, nodes, schedule, estep, prior, edge_rng, batch_policy=batch_policy, smoothing=smoothing
    )
    return simulator.run("async", iterations, cadence=cadence, on_record=on_record)


def run_centralized(
    corpus: Sequence[Document],
    schedule: StepSchedule,
    iterations: int,
    batch_size: int,
    estep: EStepConfig,
    *,
    prior: DirichletParams,
    vocab_size: int,
    rng: np.random.Generator,
    initial: SufficientStats | None = None,
    cadence: int = 10,
    smoothing: float = DEFAULT_SMOOTHING,
    on_record: RecordCallback | None = None,
) -> List[TrajectoryRecord]:
    if initial is None:
        mean_length = float(np.mean([len(doc) for doc in corpus])) if corpus else 1.0
        initial = initial_stats(prior.n_topics, vocab_size, mean_length, rng)
    central = CentralizedGOEM(
        corpus, initial, schedule, batch_size, estep, prior, rng, smoothing=smoothing
    )
    return central.run(iterations, cadence=cadence, on_record=on_record)


def _rng_from_state(state: Dict[str, Any]) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def save_checkpoint(path: str | Path, simulation: DecentralizedSimulator | CentralizedGOEM) -> Path:
    """Write per-node statistics as row-major text plus RNG states and counters as JSON."""

    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    meta: Dict[str, Any] = {"iteration": simulation.iteration, "docs_processed": simulation.docs_processed}
    if isinstance(simulation, DecentralizedSimulator):
        meta["kind"] = "decentralized"
        meta["averaging_steps"] = simulation.averaging_steps
        meta["edge_rng"] = simulation.edge_rng.bit_generator.state
        meta["nodes"] = []
        for node in simulation.nodes:
            save_matrix(directory / f"node_{node.node_id:03d}.txt", node.stats.counts)
            meta["nodes"].append(
                {"node_id": node.node_id, "updates": node.updates, "rng": node.rng.bit_generator.state}
            )
    else:
        meta["kind"] = "centralized"
        meta["rng"] = simulation.rng.bit_generator.state
        save_matrix(directory / "global.txt", simulation.stats.counts)
    (directory / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("checkpoint written to %s at iteration %d", directory, simulation.iteration)
    return directory


def checkpoint_stats(path: str | Path) -> List[SufficientStats]:
    """Statistics stored in a checkpoint: one per node, or the single global one."""

    directory = Path(path)
    meta = _read_meta(directory)
    if meta["kind"] == "centralized":
        return [SufficientStats(load_matrix(directory / "global.txt"))]
    return [
        SufficientStats(load_matrix(directory / f"node_{entry['node_id']:03d}.txt"))
        for entry in meta["nodes"]
    ]


def _read_meta(directory: Path) -> Dict[str, Any]:
    try:
        meta = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{directory}: unreadable checkpoint state ({exc})") from exc
    if meta.get("kind") not in ("decentralized", "centralized"):
        raise DataError(f"{directory}: unknown checkpoint kind {meta.get('kind')!r}")
    return meta


def restore_checkpoint(path: str | Path, simulation: DecentralizedSimulator | CentralizedGOEM) -> None:
    """Load statistics, RNG states and counters into a freshly built simulation."""

    directory = Path(path)
    meta = _read_meta(directory)
    stats = checkpoint_stats(directory)
    if isinstance(simulation, DecentralizedSimulator):
        if meta["kind"] != "decentralized" or len(meta["nodes"]) != len(simulation.nodes):
            raise DataError(f"{directory}: checkpoint does not match the network being resumed")
        for node, entry, node_stats in zip(simulation.nodes, meta["nodes"], stats):
            node.stats = node_stats
            node.updates = int(entry["updates"])
            node.rng = _rng_from_state(entry["rng"])
        simulation.edge_rng = _rng_from_state(meta["edge_rng"])
        simulation.averaging_steps = int(meta["averaging_steps"])
    else:
        if meta["kind"] != "centralized":
            raise DataError(f"{directory}: checkpoint was not written by a centralized run")
        simulation.stats = stats[0]
        simulation.rng = _rng_from_state(meta["rng"])
    simulation.iteration = int(meta["iteration"])
    simulation.docs_processed = int(meta["docs_processed"])
