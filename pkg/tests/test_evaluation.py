import numpy as np
import pandas as pd
import pytest

from app.errors import ConfigurationError, DomainError, SingularTopicsError
from app.services.evaluation import (
    evaluate_model,
    left_to_right_likelihood,
    log_perplexity,
    relative_error,
    robust_topic_distance,
    topic_distance,
)
from app.services.lda_core import DirichletParams, Document, TopicMatrix, exact_log_likelihood, generate_corpus


def _create_separated_model() -> tuple[TopicMatrix, DirichletParams]:
    beta = TopicMatrix(np.array([[0.8, 0.15, 0.05], [0.05, 0.15, 0.8]]))
    return beta, DirichletParams(np.array([0.5, 0.5]))


def _create_random_topics(n_topics: int, vocab_size: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).dirichlet(np.ones(vocab_size), size=n_topics)


def test_single_word_likelihood_is_exact() -> None:
    beta, _ = _create_separated_model()
    prior = DirichletParams(np.array([0.3, 0.9]))
    expected = np.log(np.sum(prior.alpha / prior.alpha.sum() * beta.beta[:, 2]))

    estimate = left_to_right_likelihood(Document([2]), beta, prior, 5, np.random.default_rng(0))

    assert abs(estimate - expected) <= 1e-12


def test_single_topic_likelihood_is_exact() -> None:
    beta = TopicMatrix(np.array([[0.5, 0.3, 0.2]]))
    doc = Document([0, 2, 2, 1, 0])

    estimate = left_to_right_likelihood(doc, beta, DirichletParams.symmetric(1), 3, np.random.default_rng(0))

    assert abs(estimate - np.log(beta.beta[0, doc.words]).sum()) <= 1e-10


def test_left_to_right_agrees_with_enumeration() -> None:
    beta, prior = _create_separated_model()
    rng = np.random.default_rng(1)
    docs = [Document(rng.integers(3, size=int(rng.integers(2, 6)))) for _ in range(10)]

    errors = [
        abs(left_to_right_likelihood(doc, beta, prior, 200, np.random.default_rng(index))
            - exact_log_likelihood(doc, beta, prior))
        for index, doc in enumerate(docs)
    ]

    assert sum(error <= 0.05 for error in errors) >= 9


def test_left_to_right_rejects_empty_particle_set() -> None:
    beta, prior = _create_separated_model()
    with pytest.raises(ConfigurationError):
        left_to_right_likelihood(Document([0]), beta, prior, 0, np.random.default_rng(0))


def test_log_perplexity_of_repeated_document() -> None:
    beta, prior = _create_separated_model()
    doc = Document([1])

    single = log_perplexity([doc], beta, prior)
    repeated = log_perplexity([doc, Document([1]), Document([1])], beta, prior)

    assert repeated == pytest.approx(single, abs=1e-12)
    assert single == pytest.approx(-exact_log_likelihood(doc, beta, prior), abs=1e-12)


def test_log_perplexity_is_reproducible() -> None:
    beta, prior = _create_separated_model()
    docs = [Document([0, 1, 2, 2]), Document([2, 0])]

    first = log_perplexity(docs, beta, prior, n_particles=10, seed=3, tag=4)
    second = log_perplexity(docs, beta, prior, n_particles=10, seed=3, tag=4)

    assert first == second


def test_generating_topics_beat_random_topics() -> None:
    rng = np.random.default_rng(2)
    beta_star = TopicMatrix(rng.dirichlet(np.full(20, 0.1), size=3))
    prior = DirichletParams.symmetric(3)
    test_docs = [doc for doc, _ in generate_corpus(30, beta_star, prior, 10.0, rng)]

    wins = 0
    for seed in range(5):
        random_beta = TopicMatrix(_create_random_topics(3, 20, seed))
        lp_star = log_perplexity(test_docs, beta_star, prior, seed=seed)
        wins += int(lp_star < log_perplexity(test_docs, random_beta, prior, seed=seed))

    assert wins >= 3


def test_relative_error_values() -> None:
    assert relative_error(5.0, 5.0) == 0.0
    assert relative_error(5.5, 5.0) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        relative_error(1.0, 0.0)


def test_topic_distance_of_identical_and_permuted_topics() -> None:
    beta_star = _create_random_topics(4, 12, seed=3)

    assert topic_distance(beta_star, beta_star) <= 1e-10
    assert topic_distance(beta_star[[2, 0, 3, 1]], beta_star) <= 1e-10


def test_topic_distance_is_invariant_to_row_mixing() -> None:
    rng = np.random.default_rng(4)
    beta = _create_random_topics(3, 10, seed=5)
    beta_star = _create_random_topics(3, 10, seed=6)
    mixing = np.eye(3) + 0.3 * rng.standard_normal((3, 3))

    assert topic_distance(mixing @ beta, beta_star) == pytest.approx(topic_distance(beta, beta_star), abs=1e-8)


def test_topic_distance_matches_least_squares() -> None:
    for seed in range(10):
        beta = _create_random_topics(4, 15, seed=100 + seed)
        beta_star = _create_random_topics(4, 15, seed=200 + seed)

        solution, *_ = np.linalg.lstsq(beta.T, beta_star.T, rcond=None)
        oracle = np.linalg.norm(solution.T @ beta - beta_star) / np.linalg.norm(beta_star)

        assert topic_distance(TopicMatrix(beta), TopicMatrix(beta_star)) == pytest.approx(oracle, abs=1e-6)


def test_topic_distance_rejects_shape_mismatch() -> None:
    with pytest.raises(ConfigurationError):
        topic_distance(_create_random_topics(2, 5, 0), _create_random_topics(3, 5, 1))


def test_collapsed_topics_need_the_ridge(caplog) -> None:
    row = _create_random_topics(1, 6, seed=7)[0]
    collapsed = np.stack([row, row, _create_random_topics(1, 6, seed=8)[0]])
    beta_star = _create_random_topics(3, 6, seed=9)

    with pytest.raises(SingularTopicsError):
        topic_distance(collapsed, beta_star)

    distance = robust_topic_distance(collapsed, beta_star)
    assert np.isfinite(distance) and distance >= 0.0
    assert "ridge" in caplog.text


def test_perplexity_tracks_topic_distance_along_a_path() -> None:
    rng = np.random.default_rng(10)
    beta_star = rng.dirichlet(np.full(20, 0.1), size=3)
    start = _create_random_topics(3, 20, seed=11)
    prior = DirichletParams.symmetric(3)
    test_docs = [doc for doc, _ in generate_corpus(40, TopicMatrix(beta_star), prior, 10.0, rng)]

    rows = []
    for weight in np.linspace(0.0, 1.0, 6):
        beta = TopicMatrix((1 - weight) * start + weight * beta_star)
        rows.append({
            "distance": topic_distance(beta, beta_star, ridge=1e-10),
            "lp": log_perplexity(test_docs, beta, prior, seed=0),
        })
    frame = pd.DataFrame(rows)

    assert frame["distance"].corr(frame["lp"], method="spearman") > 0.8


def test_evaluate_model_report() -> None:
    beta, prior = _create_separated_model()
    docs = [Document([0, 0, 1]), Document([2])]
    lp_star = log_perplexity(docs, beta, prior, seed=1)

    report = evaluate_model(beta, prior, docs, beta, lp_star, seed=1)

    assert report.lp == lp_star
    assert report.rel_error == 0.0
    assert report.lp_abs_gap == 0.0
    assert report.beta_distance <= 1e-10
