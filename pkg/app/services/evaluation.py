"""Held-out likelihood (left-to-right particle estimator), perplexity errors and topic distance."""

from __future__ import annotations

import logging
import time
from typing import Sequence

import numpy as np
from prometheus_client import Histogram

from ..errors import ConfigurationError, DomainError, SingularTopicsError
from ..models import EvalReport
from .lda_core import DirichletParams, Document, TopicMatrix, check_dimensions, checked_words


logger = logging.getLogger(__name__)

EVALUATION_DURATION = Histogram(
    "deleda_evaluation_duration_seconds",
    "Time taken to evaluate one topic matrix on the held-out documents",
)

DEFAULT_PARTICLES = 20
RIDGE = 1e-10
CONDITION_LIMIT = 1e12


def _sample_rows(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """One categorical draw per row of nonnegative ``weights``."""

    cdf = np.cumsum(weights, axis=1)
    targets = uniforms * cdf[:, -1]
    return np.minimum((cdf <= targets[:, None]).sum(axis=1), weights.shape[1] - 1)


def left_to_right_likelihood(
    doc: Document,
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    n_particles: int,
    rng: np.random.Generator,
) -> float:
    """Left-to-right sequential estimate of log p(X | beta, alpha).

    Every particle keeps an assignment of the prefix. Before predicting word n
    each particle resamples its prefix once with collapsed conditionals, the
    predictive probability ``sum_k (c_k + alpha_k) / (n + sum(alpha)) * beta[k, x_n]``
    is averaged over particles, then z_n is drawn for each particle.
    """

    if n_particles < 1:
        raise ConfigurationError("n_particles must be at least 1")
    check_dimensions(topic_matrix, prior)
    words = checked_words(doc, topic_matrix.vocab_size)
    n_topics = topic_matrix.n_topics
    alpha = prior.alpha
    alpha_sum = float(alpha.sum())
    phi = topic_matrix.beta[:, words].T

    z = np.zeros((n_particles, words.size), dtype=np.intp)
    counts = np.zeros((n_particles, n_topics))
    particles = np.arange(n_particles)
    log_likelihood = 0.0
    for n in range(words.size):
        for m in range(n):
            counts[particles, z[:, m]] -= 1.0
            z[:, m] = _sample_rows((counts + alpha) * phi[m], rng.random(n_particles))
            counts[particles, z[:, m]] += 1.0
        predictive = (counts + alpha) / (n + alpha_sum)
        word_probabilities = predictive @ phi[n]
        log_likelihood += float(np.log(word_probabilities.mean()))
        z[:, n] = _sample_rows(predictive * phi[n], rng.random(n_particles))
        counts[particles, z[:, n]] += 1.0
    return log_likelihood


def document_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    """Per-document stream derived from (seed, tag, document index)."""

    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag, index)))


def log_perplexity(
    test_docs: Sequence[Document],
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    *,
    n_particles: int = DEFAULT_PARTICLES,
    seed: int = 0,
    tag: int = 0,
) -> float:
    """Average held-out log-perplexity, the mean of -log p(X) over the test documents."""

    if not test_docs:
        raise ConfigurationError("log_perplexity needs at least one test document")
    total = 0.0
    for index, doc in enumerate(test_docs):
        rng = document_rng(seed, tag, index)
        total -= left_to_right_likelihood(doc, topic_matrix, prior, n_particles, rng)
    return total / len(test_docs)


def relative_error(lp: float, lp_star: float) -> float:
    if lp_star <= 0:
        raise DomainError(f"reference log-perplexity must be positive, got {lp_star}")
    return lp / lp_star - 1.0


def topic_distance(beta: TopicMatrix | np.ndarray, beta_star: TopicMatrix | np.ndarray, *, ridge: float = 0.0) -> float:
    """Permutation-invariant distance ||beta* beta^T (beta beta^T)^-1 beta - beta*||_F / ||beta*||_F.

    This is the residual of projecting the rows of beta* on the row space of
    beta. A (near-)singular Gram matrix raises unless a ``ridge`` is given.
    """

    fitted = beta.beta if isinstance(beta, TopicMatrix) else np.asarray(beta, dtype=float)
    target = beta_star.beta if isinstance(beta_star, TopicMatrix) else np.asarray(beta_star, dtype=float)
    if fitted.shape != target.shape:
        raise ConfigurationError(f"topic matrices differ in shape: {fitted.shape} vs {target.shape}")
    gram = fitted @ fitted.T
    if ridge > 0.0:
        gram = gram + ridge * np.eye(gram.shape[0])
    elif np.linalg.cond(gram) > CONDITION_LIMIT:
        raise SingularTopicsError(
            f"beta beta^T is singular (condition number {np.linalg.cond(gram):.3g}); retry with ridge={RIDGE:g}"
        )
    mixing = np.linalg.solve(gram, fitted @ target.T).T
    residual = mixing @ fitted - target
    return float(np.linalg.norm(residual) / np.linalg.norm(target))


def robust_topic_distance(beta: TopicMatrix | np.ndarray, beta_star: TopicMatrix | np.ndarray) -> float:
    """topic_distance with the ridge fallback for nearly collapsed topics."""

    try:
        return topic_distance(beta, beta_star)
    except SingularTopicsError as exc:
        logger.warning("%s; falling back to ridge %.0e", exc, RIDGE)
        return topic_distance(beta, beta_star, ridge=RIDGE)


def evaluate_model(
    topic_matrix: TopicMatrix,
    prior: DirichletParams,
    test_docs: Sequence[Document],
    beta_star: TopicMatrix,
    lp_star: float,
    *,
    n_particles: int = DEFAULT_PARTICLES,
    seed: int = 0,
    tag: int = 0,
) -> EvalReport:
    start_time = time.perf_counter()
    try:
        lp = log_perplexity(test_docs, topic_matrix, prior, n_particles=n_particles, seed=seed, tag=tag)
        return EvalReport(
            lp=lp,
            lp_star=lp_star,
            rel_error=relative_error(lp, lp_star),
            lp_abs_gap=lp - lp_star,
            beta_distance=robust_topic_distance(topic_matrix, beta_star),
        )
    finally:
        EVALUATION_DURATION.observe(time.perf_counter() - start_time)
