"""LDA generative model, E-steps, M-step and the Gibbs online EM (G-OEM) update."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from prometheus_client import Histogram
from scipy.special import gammaln, logsumexp

from ..errors import (
    ConfigurationError,
    DataError,
    DegenerateRowError,
    InfeasibleError,
    NumericalError,
)
from ..models import EStepConfig


logger = logging.getLogger(__name__)

ESTEP_DURATION = Histogram(
    "deleda_estep_duration_seconds",
    "Time taken by one G-OEM update over a batch of documents",
)

ENUMERATION_LIMIT = 10**6
DEFAULT_SMOOTHING = 1e-8
SUM_TOLERANCE = 1e-9


def _frozen_array(values, *, dtype=float, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    if array.ndim != ndim:
        raise ConfigurationError(f"expected a {ndim}-d array, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DirichletParams:
    """Dirichlet concentration of the per-document topic proportions."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        alpha = _frozen_array(self.alpha, ndim=1)
        if alpha.size == 0 or not np.all(np.isfinite(alpha)) or not np.all(alpha > 0):
            raise ConfigurationError("Dirichlet parameters must be finite and strictly positive")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def symmetric(cls, n_topics: int, value: float | None = None) -> "DirichletParams":
        if n_topics < 1:
            raise ConfigurationError("n_topics must be positive")
        concentration = 1.0 / n_topics if value is None else value
        return cls(np.full(n_topics, concentration))

    @property
    def n_topics(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True, eq=False)
class TopicMatrix:
    """K x V row-stochastic matrix; row k is the word distribution of topic k."""

    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = _frozen_array(self.beta, ndim=2)
        if beta.size == 0 or np.any(beta < 0) or not np.all(np.isfinite(beta)):
            raise ConfigurationError("topic matrix entries must be finite and nonnegative")
        row_sums = beta.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > SUM_TOLERANCE):
            raise ConfigurationError(f"topic matrix rows must sum to 1, got {row_sums.tolist()}")
        object.__setattr__(self, "beta", beta)

    @property
    def n_topics(self) -> int:
        return int(self.beta.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.beta.shape[1])


@dataclass(frozen=True, eq=False)
class Document:
    """A nonempty sequence of word indices."""

    words: np.ndarray

    def __post_init__(self) -> None:
        words = _frozen_array(self.words, dtype=np.int64, ndim=1)
        if words.size == 0:
            raise DataError("empty documents are not allowed")
        if np.any(words < 0):
            raise DataError("word indices must be nonnegative")
        object.__setattr__(self, "words", words)

    def __len__(self) -> int:
        return int(self.words.size)

    def histogram(self, vocab_size: int) -> np.ndarray:
        return np.bincount(self.words, minlength=vocab_size).astype(float)


@dataclass(frozen=True, eq=False)
class HiddenState:
    """Ground-truth topic assignments and proportions of a generated document."""

    z: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        z = _frozen_array(self.z, dtype=np.int64, ndim=1)
        theta = _frozen_array(self.theta, ndim=1)
        if np.any(theta < 0) or abs(theta.sum() - 1.0) > SUM_TOLERANCE:
            raise ConfigurationError("theta must lie on the simplex")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "theta", theta)


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """K x V expected topic-word assignment counts."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = _frozen_array(self.counts, ndim=2)
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise NumericalError("sufficient statistics must be finite and nonnegative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, n_topics: int, vocab_size: int) -> "SufficientStats":
        return cls(np.zeros((n_topics, vocab_size)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.counts.shape  # type: ignore[return-value]

    def total(self) -> float:
        return float(self.counts.sum())


def check_dimensions(topic_matrix: TopicMatrix, prior: DirichletParams) -> None:
    if topic_matrix.n_topics != prior.n_topics:
        raise ConfigurationError(
            f"prior has {prior.n_topics} topics but the topic matrix has {topic_matrix.n_topics}"
        )


def checked_words(doc: Document, vocab_size: int) -> np.ndarray:
    words = doc.words
    if words.max() >= vocab_size:
        position = int(np.argmax(words >= vocab_size))
        raise DataError(f"word index {int(words[position])} at position {position} is outside [0, {vocab_size})")
    return words


def _draw(weights: Sequence[float], uniform: float, position: int) -> int:
    total = sum(weights)
    if not total > 0.0:
        raise NumericalError(f"all topics have zero probability at position {position}", position=position)
    target = uniform * total
    cumulative = 0.0
    last_positive = 0
    for index, weight in enumerate(weights):
        if weight > 0.0:
            last_positive = index
        cumulative += weight
        if target < cumulative:
            return index
    return last_positive


def generate_corpus(
    n_docs: int,
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    mean_length: float,
    rng: np.random.Generator,
) -> List[Tuple[Document, HiddenState]]:
    """Sample documents from the LDA generative process."""

    check_dimensions(topic_matrix, prior)
    if mean_length <= 0:
        raise ConfigurationError("mean_length must be positive")
    if n_docs < 0:
        raise ConfigurationError("n_docs must be nonnegative")

    n_topics = topic_matrix.n_topics
    word_cdf = np.cumsum(topic_matrix.beta, axis=1)
    corpus: List[Tuple[Document, HiddenState]] = []
    for _ in range(n_docs):
        theta = rng.dirichlet(prior.alpha)
        theta = theta / theta.sum()
        length = 0
        # Zero-length draws are resampled: documents are never empty.
        while length == 0:
            length = int(rng.poisson(mean_length))
        z = rng.choice(n_topics, size=length, p=theta)
        rows = word_cdf[z]
        targets = rng.random(length) * rows[:, -1]
        words = np.minimum((rows <= targets[:, None]).sum(axis=1), topic_matrix.vocab_size - 1)
        corpus.append((Document(words), HiddenState(z=z, theta=theta)))
    return corpus


def gibbs_estep(
    doc: Document,
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    n_sweeps: int,
    burn_in: int,
    rng: np.random.Generator,
) -> SufficientStats:
    """Collapsed Gibbs estimate of the expected topic-word counts of one document.

    Each position n is resampled with probability proportional to
    ``beta[k, x_n] * (c_{-n,k} + alpha_k)``. The returned counts average the
    assignment matrices of the post-burn-in sweeps and sum to the document length.
    """

    check_dimensions(topic_matrix, prior)
    if not n_sweeps > burn_in >= 0:
        raise ConfigurationError("gibbs_estep requires n_sweeps > burn_in >= 0")
    words = checked_words(doc, topic_matrix.vocab_size)
    n_topics = topic_matrix.n_topics
    length = words.size

    phi = topic_matrix.beta[:, words]
    alpha = prior.alpha.tolist()
    phi_columns = phi.T.tolist()

    initial_uniforms = rng.random(length).tolist()
    z: List[int] = []
    for position, column in enumerate(phi_columns):
        weights = [a * p for a, p in zip(alpha, column)]
        z.append(_draw(weights, initial_uniforms[position], position))
    counts = np.bincount(z, minlength=n_topics).astype(float).tolist()

    occupancy = np.zeros((n_topics, length))
    positions = np.arange(length)
    uniforms = rng.random((n_sweeps, length)).tolist()
    for sweep in range(n_sweeps):
        row = uniforms[sweep]
        for position in range(length):
            counts[z[position]] -= 1.0
            column = phi_columns[position]
            weights = [p * (c + a) for p, c, a in zip(column, counts, alpha)]
            topic = _draw(weights, row[position], position)
            z[position] = topic
            counts[topic] += 1.0
        if sweep >= burn_in:
            occupancy[z, positions] += 1.0
    occupancy /= n_sweeps - burn_in

    stats = np.zeros((n_topics, topic_matrix.vocab_size))
    np.add.at(stats.T, words, occupancy.T)
    return SufficientStats(stats)


def _log_joint_weights(
    doc: Document, topic_matrix: TopicMatrix, prior: DirichletParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumerate every assignment z and its unnormalized log p(z, X | beta, alpha)."""

    check_dimensions(topic_matrix, prior)
    words = checked_words(doc, topic_matrix.vocab_size)
    n_topics = topic_matrix.n_topics
    length = words.size
    if n_topics**length > ENUMERATION_LIMIT:
        raise InfeasibleError(
            f"enumerating {n_topics}^{length} assignments exceeds the limit of {ENUMERATION_LIMIT}"
        )

    assignments = np.array(list(itertools.product(range(n_topics), repeat=length)), dtype=np.intp)
    with np.errstate(divide="ignore"):
        log_phi = np.log(topic_matrix.beta[:, words])
    log_likelihood = log_phi[assignments, np.arange(length)].sum(axis=1)
    topic_counts = np.stack([(assignments == k).sum(axis=1) for k in range(n_topics)], axis=1)
    alpha = prior.alpha
    log_prior = (gammaln(alpha + topic_counts) - gammaln(alpha)).sum(axis=1)
    log_weights = log_likelihood + log_prior
    if not np.any(np.isfinite(log_weights)):
        raise NumericalError("every topic assignment has zero probability")
    return assignments, log_weights, words


def exact_estep(doc: Document, topic_matrix: TopicMatrix, prior: DirichletParams) -> SufficientStats:
    """Exact posterior expectation of the topic-word counts by brute-force enumeration."""

    assignments, log_weights, words = _log_joint_weights(doc, topic_matrix, prior)
    posterior = np.exp(log_weights - logsumexp(log_weights))
    n_topics = topic_matrix.n_topics
    stats = np.zeros((n_topics, topic_matrix.vocab_size))
    for position, word in enumerate(words):
        stats[:, word] += np.bincount(assignments[:, position], weights=posterior, minlength=n_topics)
    return SufficientStats(stats)


def exact_log_likelihood(doc: Document, topic_matrix: TopicMatrix, prior: DirichletParams) -> float:
    """log p(X | beta, alpha) by enumeration; same feasibility guard as exact_estep."""

    _, log_weights, words = _log_joint_weights(doc, topic_matrix, prior)
    alpha_sum = float(prior.alpha.sum())
    return float(logsumexp(log_weights) + gammaln(alpha_sum) - gammaln(alpha_sum + words.size))


def m_step(stats: SufficientStats, smoothing: float = DEFAULT_SMOOTHING) -> TopicMatrix:
    """Maximum-likelihood topic matrix for the given statistics (smoothed row normalization)."""

    if smoothing < 0:
        raise ConfigurationError("smoothing must be nonnegative")
    smoothed = stats.counts + smoothing
    totals = smoothed.sum(axis=1)
    degenerate = np.flatnonzero(totals <= 0.0)
    if degenerate.size:
        raise DegenerateRowError(
            f"topic rows {degenerate.tolist()} have no mass; use a positive smoothing",
            position=int(degenerate[0]),
        )
    beta = smoothed / totals[:, None]
    # Renormalize once more so rows sum to 1 up to a single rounding.
    beta /= beta.sum(axis=1, keepdims=True)
    return TopicMatrix(beta)


def expected_stats(
    doc: Document,
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    estep: EStepConfig,
    rng: np.random.Generator,
) -> SufficientStats:
    if estep.exact:
        return exact_estep(doc, topic_matrix, prior)
    return gibbs_estep(doc, topic_matrix, prior, estep.n_sweeps, estep.burn_in, rng)


def batch_estep(
    batch: Sequence[Document],
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    estep: EStepConfig,
    rng: np.random.Generator,
) -> SufficientStats:
    """Unweighted mean of the per-document expected counts over a batch."""

    if not batch:
        raise ConfigurationError("batch must contain at least one document")
    total = np.zeros((topic_matrix.n_topics, topic_matrix.vocab_size))
    for doc in batch:
        total += expected_stats(doc, topic_matrix, prior, estep, rng).counts
    return SufficientStats(total / len(batch))


def combine(current: SufficientStats, expected: SufficientStats, rho: float) -> SufficientStats:
    """The G-OEM step ``(1 - rho) * current + rho * expected``."""

    if not 0.0 < rho <= 1.0:
        raise ConfigurationError(f"step size must lie in (0, 1], got {rho}")
    if current.shape != expected.shape:
        raise ConfigurationError(f"statistics shapes differ: {current.shape} vs {expected.shape}")
    return SufficientStats((1.0 - rho) * current.counts + rho * expected.counts)


def goem_step(
    current: SufficientStats,
    batch: Sequence[Document],
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    rho: float,
    estep: EStepConfig,
    rng: np.random.Generator,
) -> Tuple[SufficientStats, SufficientStats]:
    """Like goem_update, also returning the batch expectation that was mixed in."""

    if not 0.0 < rho <= 1.0:
        raise ConfigurationError(f"step size must lie in (0, 1], got {rho}")
    start_time = time.perf_counter()
    try:
        expected = batch_estep(batch, topic_matrix, prior, estep, rng)
        return combine(current, expected, rho), expected
    finally:
        ESTEP_DURATION.observe(time.perf_counter() - start_time)


def goem_update(
    current: SufficientStats,
    batch: Sequence[Document],
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    rho: float,
    estep: EStepConfig,
    rng: np.random.Generator,
) -> SufficientStats:
    """One Gibbs online EM step of the statistics on a batch of documents."""

    updated, _ = goem_step(current, batch, topic_matrix, prior, rho, estep, rng)
    return updated


def initial_stats(
    n_topics: int, vocab_size: int, target_mass: float, rng: np.random.Generator
) -> SufficientStats:
    """Small random statistics, scaled so their total equals ``target_mass``."""

    if target_mass <= 0:
        raise ConfigurationError("target_mass must be positive")
    counts = rng.uniform(0.0, 1.0 / (n_topics * vocab_size), size=(n_topics, vocab_size))
    return SufficientStats(counts * (target_mass / counts.sum()))


def save_corpus(path: str | Path, docs: Sequence[Document], vocab_size: int, n_topics: int) -> None:
    lines = [f"V={vocab_size} K={n_topics}"]
    lines.extend(" ".join(str(int(word)) for word in doc.words) for doc in docs)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> Tuple[List[Document], int, int]:
    """Read a corpus file; returns the documents with the header's V and K."""

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: missing header")
    try:
        header = dict(item.split("=", 1) for item in lines[0].split())
        vocab_size = int(header["V"])
        n_topics = int(header["K"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed header {lines[0]!r}") from exc

    docs: List[Document] = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            doc = Document([int(token) for token in line.split()])
        except ValueError as exc:
            raise DataError(f"{path}:{number}: {exc}") from exc
        checked_words(doc, vocab_size)
        docs.append(doc)
    return docs, vocab_size, n_topics


def save_matrix(path: str | Path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(matrix), fmt="%.17g")


def load_matrix(path: str | Path) -> np.ndarray:
    try:
        return np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
