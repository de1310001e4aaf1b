"""Experiment runner: ground truth, node corpora, training in one mode, evaluation rows and CSV output."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd
from prometheus_client import Counter
from pydantic import ValidationError
from scipy.integrate import trapezoid

from ..errors import ConfigurationError, DataError, InputError
from ..models import EvalReport, ExperimentConfig, ExperimentSummary, SpectralResponse, TopologyConfig
from .engine import (
    BatchPolicy,
    CentralizedGOEM,
    DecentralizedSimulator,
    StepSchedule,
    TrajectoryRecord,
    checkpoint_stats,
    make_nodes,
    restore_checkpoint,
    save_checkpoint,
)
from .evaluation import evaluate_model, log_perplexity, relative_error, robust_topic_distance
from .lda_core import (
    DirichletParams,
    Document,
    SufficientStats,
    TopicMatrix,
    generate_corpus,
    initial_stats,
    load_corpus,
    load_matrix,
    m_step,
    save_corpus,
    save_matrix,
)
from .network import Graph, complete_graph, save_graph, spectral_gap, watts_strogatz


logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "iter",
    "mode",
    "graph",
    "seed",
    "consensus_gap",
    "lp_rel_error",
    "beta_distance",
    "lp_abs_gap",
    "lp",
    "docs_processed",
    "averaging_steps",
]
FLOAT_FORMAT = "%.12g"

EXPERIMENT_RUNS = Counter(
    "deleda_runs_total",
    "Experiment runs by mode and outcome",
    ["mode", "status"],
)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(payload: Mapping[str, Any], prefix: str = "") -> Iterable[tuple[str, Any]]:
    for key, value in payload.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            yield from _flatten(value, f"{dotted}.")
        else:
            yield dotted, value


def dump_config(config: ExperimentConfig) -> str:
    """Flat ``key = value`` text, nested sections as dotted keys."""

    return "".join(f"{key} = {_format_value(value)}\n" for key, value in _flatten(config.model_dump()))


def config_from_pairs(pairs: Iterable[tuple[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from dotted ``(key, raw value)`` pairs layered over ``base``."""

    payload: Dict[str, Any] = base.model_dump() if base is not None else {}
    for key, raw in pairs:
        value: Any = None if raw.strip().lower() == "none" else raw.strip()
        target = payload
        *sections, leaf = key.strip().split(".")
        for section in sections:
            existing = target.setdefault(section, {})
            if not isinstance(existing, dict):
                raise ConfigurationError(f"{key}: {section} is not a section")
            target = existing
        target[leaf] = value
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc.errors()[0]['loc']}: {exc.errors()[0]['msg']}") from exc


def parse_config(text: str) -> ExperimentConfig:
    pairs = []
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {number}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        pairs.append((key, raw))
    return config_from_pairs(pairs)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(path: str | Path, config: ExperimentConfig) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")


@dataclass
class ExperimentData:
    beta_star: TopicMatrix
    prior: DirichletParams
    shards: List[List[Document]]
    test_docs: List[Document]
    graph: Graph | None
    train_seeds: np.random.SeedSequence


def build_graph(topology: TopologyConfig, n_nodes: int, rng: np.random.Generator) -> Graph:
    if topology.kind == "complete":
        return complete_graph(n_nodes)
    return watts_strogatz(n_nodes, topology.k, topology.p, rng)


def topology_spectrum(topology: TopologyConfig, n_nodes: int, seed: int = 0) -> SpectralResponse:
    graph = build_graph(topology, n_nodes, np.random.default_rng(seed))
    summary = spectral_gap(graph)
    return SpectralResponse(
        topology=topology.label(),
        n=graph.n,
        n_edges=len(graph.edges),
        lambda2=summary.lambda2,
        gap=summary.gap,
    )


def build_experiment_data(config: ExperimentConfig) -> ExperimentData:
    """Ground truth, node shards, held-out set and graph; independent of the training mode."""

    truth_seq, data_seq, test_seq, graph_seq, train_seq = np.random.SeedSequence(config.master_seed).spawn(5)
    truth_rng = np.random.default_rng(truth_seq)
    rows = truth_rng.dirichlet(np.full(config.vocab_size, config.beta_concentration), size=config.n_topics)
    beta_star = TopicMatrix(rows / rows.sum(axis=1, keepdims=True))
    prior = DirichletParams.symmetric(config.n_topics, config.prior_value)

    n_docs = config.n_nodes * config.docs_per_node
    corpus = [doc for doc, _ in generate_corpus(n_docs, beta_star, prior, config.mean_doc_length, np.random.default_rng(data_seq))]
    shards = [corpus[start : start + config.docs_per_node] for start in range(0, n_docs, config.docs_per_node)]
    test_docs = [
        doc
        for doc, _ in generate_corpus(
            config.eval.n_test_docs, beta_star, prior, config.mean_doc_length, np.random.default_rng(test_seq)
        )
    ]
    graph = None
    if config.mode != "centralized":
        graph = build_graph(config.topology, config.n_nodes, np.random.default_rng(graph_seq))
    return ExperimentData(beta_star, prior, shards, test_docs, graph, train_seq)


def build_simulation(config: ExperimentConfig, data: ExperimentData) -> DecentralizedSimulator | CentralizedGOEM:
    schedule = StepSchedule.from_config(config.schedule)
    nodes_seq, edge_seq = data.train_seeds.spawn(2)
    if config.mode == "centralized":
        corpus = [doc for shard in data.shards for doc in shard]
        rng = np.random.default_rng(nodes_seq)
        mean_length = float(np.mean([len(doc) for doc in corpus]))
        stats = initial_stats(config.n_topics, config.vocab_size, mean_length, rng)
        return CentralizedGOEM(
            corpus,
            stats,
            schedule,
            config.batch.centralized_size,
            config.estep,
            data.prior,
            rng,
            smoothing=config.smoothing,
        )
    assert data.graph is not None
    nodes = make_nodes(data.shards, config.n_topics, config.vocab_size, nodes_seq)
    return DecentralizedSimulator(
        data.graph,
        nodes,
        schedule,
        config.estep,
        data.prior,
        np.random.default_rng(edge_seq),
        batch_policy=BatchPolicy(config.batch.local_size),
        smoothing=config.smoothing,
    )


def generate_data(config: ExperimentConfig, directory: str | Path) -> Path:
    """Write the ground truth, node corpora, held-out set and graph as text files."""

    data = build_experiment_data(config)
    root = Path(directory)
    (root / "corpus").mkdir(parents=True, exist_ok=True)
    save_config(root / "config.txt", config)
    save_matrix(root / "beta_star.txt", data.beta_star.beta)
    save_matrix(root / "alpha_star.txt", data.prior.alpha)
    for node_id, shard in enumerate(data.shards):
        save_corpus(root / "corpus" / f"node_{node_id:03d}.txt", shard, config.vocab_size, config.n_topics)
    save_corpus(root / "test.txt", data.test_docs, config.vocab_size, config.n_topics)
    if data.graph is not None:
        save_graph(root / "graph.txt", data.graph)
    logger.info("generated %d node corpora and %d test documents in %s", len(data.shards), len(data.test_docs), root)
    return root


def _node_sample(n_nodes: int, size: int) -> List[int]:
    return sorted({int(round(x)) for x in np.linspace(0, n_nodes - 1, min(size, n_nodes))})


def evaluation_row(
    config: ExperimentConfig,
    data: ExperimentData,
    record: TrajectoryRecord,
    lp_star: float,
) -> Dict[str, Any]:
    """One CSV row: perplexity over a node sample, topic distance averaged over all nodes."""

    if record.node_stats is not None:
        matrices = [m_step(SufficientStats(counts), config.smoothing) for counts in record.node_stats]
        evaluated = [matrices[index] for index in _node_sample(len(matrices), config.eval.node_sample)]
    else:
        matrices = [m_step(SufficientStats(record.mean_stats), config.smoothing)]
        evaluated = matrices

    tag = record.iteration + 1
    lp = float(
        np.mean(
            [
                log_perplexity(
                    data.test_docs,
                    matrix,
                    data.prior,
                    n_particles=config.eval.particles,
                    seed=config.master_seed,
                    tag=tag,
                )
                for matrix in evaluated
            ]
        )
    )
    distance = float(np.mean([robust_topic_distance(matrix, data.beta_star) for matrix in matrices]))
    return {
        "iter": record.iteration,
        "mode": config.mode,
        "graph": config.graph_label,
        "seed": config.master_seed,
        "consensus_gap": record.consensus_gap,
        "lp_rel_error": relative_error(lp, lp_star),
        "beta_distance": distance,
        "lp_abs_gap": lp - lp_star,
        "lp": lp,
        "docs_processed": record.docs_processed,
        "averaging_steps": record.averaging_steps,
    }


def ground_truth_perplexity(config: ExperimentConfig, data: ExperimentData) -> float:
    return log_perplexity(
        data.test_docs,
        data.beta_star,
        data.prior,
        n_particles=config.eval.particles,
        seed=config.master_seed,
        tag=0,
    )


def run_experiment(config: ExperimentConfig, *, resume_from: str | Path | None = None) -> ExperimentSummary:
    """Generate data, train in the configured mode, evaluate at the cadence and write outputs.

    Outputs go to ``<output_dir>/<run_name>/``: ``trajectory.csv``, ``checkpoint/``,
    ``report.json`` and ``config.txt``. When resuming, rows already in the CSV up
    to the checkpoint iteration are kept and the new rows appended.
    """

    status = "success"
    try:
        run_dir = Path(config.output_dir) / config.run_name
        run_dir.mkdir(parents=True, exist_ok=True)
        logger.info("starting run %s: %d iterations in %s", config.run_name, config.iterations, run_dir)
        data = build_experiment_data(config)
        if data.graph is not None:
            summary = spectral_gap(data.graph)
            logger.info(
                "topology %s: %d edges, lambda2 %.6f, spectral gap %.6f",
                config.graph_label,
                len(data.graph.edges),
                summary.lambda2,
                summary.gap,
            )
        lp_star = ground_truth_perplexity(config, data)
        logger.info("ground-truth log-perplexity LP* = %.6f", lp_star)

        simulation = build_simulation(config, data)
        rows: List[Dict[str, Any]] = []
        if resume_from is not None:
            restore_checkpoint(resume_from, simulation)
            logger.info("resumed from %s at iteration %d", resume_from, simulation.iteration)
            rows.extend(
                _previous_rows(run_dir / "trajectory.csv", simulation.iteration, config.eval.cadence, config.iterations)
            )

        def on_record(record: TrajectoryRecord) -> None:
            row = evaluation_row(config, data, record, lp_star)
            rows.append(row)
            logger.info(
                "iter %d: rel_error %.5f beta_distance %.5f consensus_gap %.5g",
                row["iter"],
                row["lp_rel_error"],
                row["beta_distance"],
                row["consensus_gap"],
            )

        if isinstance(simulation, CentralizedGOEM):
            simulation.run(config.iterations, cadence=config.eval.cadence, on_record=on_record)
        else:
            simulation.run(config.mode, config.iterations, cadence=config.eval.cadence, on_record=on_record)

        frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
        csv_path = run_dir / "trajectory.csv"
        frame.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
        checkpoint_path = save_checkpoint(run_dir / "checkpoint", simulation)
        save_config(run_dir / "config.txt", config)

        final = rows[-1]
        report = EvalReport(
            lp=final["lp"],
            lp_star=lp_star,
            rel_error=final["lp_rel_error"],
            lp_abs_gap=final["lp_abs_gap"],
            beta_distance=final["beta_distance"],
        )
        (run_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info("finished run %s: rel_error %.5f, beta_distance %.5f", config.run_name, report.rel_error, report.beta_distance)
        return ExperimentSummary(
            run_name=config.run_name,
            mode=config.mode,
            graph=config.graph_label,
            seed=config.master_seed,
            iterations=simulation.iteration,
            csv_path=str(csv_path),
            checkpoint_path=str(checkpoint_path),
            report=report,
            final_row={key: (value.item() if isinstance(value, np.generic) else value) for key, value in final.items()},
        )
    except ConfigurationError:
        status = "invalid_config"
        raise
    except Exception:
        status = "error"
        raise
    finally:
        EXPERIMENT_RUNS.labels(mode=config.mode, status=status).inc()


def _previous_rows(csv_path: Path, iteration: int, cadence: int, iterations: int) -> List[Dict[str, Any]]:
    # A run resumed at iteration 0 records its initial row again.
    if iteration == 0 or not csv_path.exists():
        return []
    frame = read_trajectory(csv_path)
    # Off-cadence rows mark where the earlier run stopped.
    keep = frame["iter"] % cadence == 0
    if iteration >= iterations:
        keep |= frame["iter"] == iteration
    return frame[(frame["iter"] <= iteration) & keep].to_dict("records")


def evaluate_checkpoint(
    checkpoint: str | Path,
    test_corpus: str | Path,
    beta_star_path: str | Path,
    alpha_path: str | Path,
    *,
    particles: int = 20,
    seed: int = 0,
    smoothing: float = 1e-8,
) -> List[EvalReport]:
    """One report per model stored in a checkpoint, against ground truth read from files."""

    docs, vocab_size, n_topics = load_corpus(test_corpus)
    beta_star = TopicMatrix(load_matrix(beta_star_path))
    prior = DirichletParams(load_matrix(alpha_path).ravel())
    if beta_star.vocab_size != vocab_size or beta_star.n_topics != n_topics:
        raise DataError("the test corpus header does not match the ground-truth topic matrix")
    lp_star = log_perplexity(docs, beta_star, prior, n_particles=particles, seed=seed, tag=0)
    return [
        evaluate_model(m_step(stats, smoothing), prior, docs, beta_star, lp_star, n_particles=particles, seed=seed, tag=1)
        for stats in checkpoint_stats(checkpoint)
    ]


def read_trajectory(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    if list(frame.columns) != CSV_COLUMNS:
        raise InputError(f"{path}: columns {list(frame.columns)} do not match the trajectory schema")
    if not frame["iter"].is_monotonic_increasing:
        raise InputError(f"{path}: the iteration column is not monotone")
    return frame


def iterations_to_threshold(frame: pd.DataFrame, factor: float = 2.0, column: str = "lp_rel_error") -> int | None:
    """First iteration whose value is within ``factor`` times the final (asymptotic) value."""

    final = float(frame[column].iloc[-1])
    threshold = final + (factor - 1.0) * abs(final)
    reached = frame.loc[frame[column] <= threshold, "iter"]
    return int(reached.iloc[0]) if not reached.empty else None


def align_runs(frames: Mapping[str, pd.DataFrame], axis: str = "iter", column: str = "lp_rel_error") -> pd.DataFrame:
    """Runs side by side on a shared axis, linearly interpolated between recorded points."""

    if axis not in ("iter", "docs_processed"):
        raise InputError(f"cannot align on {axis!r}")
    series = {name: frame.drop_duplicates(axis).set_index(axis)[column] for name, frame in frames.items()}
    aligned = pd.concat(series, axis=1).sort_index()
    return aligned.interpolate(method="index", limit_area="inside")


def compare_runs(paths: Sequence[str | Path], *, factor: float = 2.0) -> pd.DataFrame:
    """Final values, areas under the curve on both axes and differences to the first run."""

    if not paths:
        raise InputError("compare needs at least one trajectory")
    summaries = []
    for path in paths:
        frame = read_trajectory(path)
        if frame.empty:
            raise InputError(f"{path}: no rows")
        final = frame.iloc[-1]
        summaries.append(
            {
                "run": str(path),
                "mode": final["mode"],
                "graph": final["graph"],
                "seed": int(final["seed"]),
                "final_iter": int(final["iter"]),
                "final_docs_processed": int(final["docs_processed"]),
                "final_lp_rel_error": float(final["lp_rel_error"]),
                "final_beta_distance": float(final["beta_distance"]),
                "final_consensus_gap": float(final["consensus_gap"]),
                "auc_iter": float(trapezoid(frame["lp_rel_error"], frame["iter"])),
                "auc_docs": float(trapezoid(frame["lp_rel_error"], frame["docs_processed"])),
                "iters_to_threshold": iterations_to_threshold(frame, factor),
            }
        )
    summary = pd.DataFrame(summaries)
    for column in ("final_lp_rel_error", "final_beta_distance", "auc_iter", "auc_docs"):
        summary[f"delta_{column}"] = summary[column] - summary[column].iloc[0]
    return summary
