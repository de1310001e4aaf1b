import numpy as np
import pytest

from app.errors import ConfigurationError, DataError, DegenerateRowError, InfeasibleError, NumericalError
from app.models import EStepConfig
from app.services.lda_core import (
    DirichletParams,
    Document,
    SufficientStats,
    TopicMatrix,
    check_dimensions,
    checked_words,
    exact_estep,
    exact_log_likelihood,
    generate_corpus,
    gibbs_estep,
    goem_step,
    goem_update,
    load_corpus,
    m_step,
    save_corpus,
)
from app.services.engine import StepSchedule


def _create_tiny_model() -> tuple[TopicMatrix, DirichletParams]:
    beta = TopicMatrix(np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]))
    return beta, DirichletParams(np.array([0.5, 0.5]))


def test_point_mass_topics_force_words() -> None:
    beta = TopicMatrix(np.eye(3))
    prior = DirichletParams.symmetric(3)

    corpus = generate_corpus(50, beta, prior, 10.0, np.random.default_rng(1))

    assert len(corpus) == 50
    for doc, hidden in corpus:
        assert len(doc) >= 1
        np.testing.assert_array_equal(doc.words, hidden.z)
        assert abs(hidden.theta.sum() - 1.0) < 1e-9


def test_single_topic_word_frequencies_match_topic() -> None:
    probabilities = np.array([0.1, 0.2, 0.3, 0.4])
    beta = TopicMatrix(probabilities[None, :])
    prior = DirichletParams.symmetric(1)

    corpus = generate_corpus(2000, beta, prior, 10.0, np.random.default_rng(2))
    words = np.concatenate([doc.words for doc, _ in corpus])

    assert all(np.all(hidden.z == 0) for _, hidden in corpus)
    frequencies = np.bincount(words, minlength=4) / words.size
    standard_errors = np.sqrt(probabilities * (1 - probabilities) / words.size)
    assert np.all(np.abs(frequencies - probabilities) <= 4 * standard_errors)


def test_zero_length_draws_are_resampled() -> None:
    beta, prior = _create_tiny_model()
    corpus = generate_corpus(30, beta, prior, 0.05, np.random.default_rng(3))
    assert all(len(doc) >= 1 for doc, _ in corpus)


def test_generate_corpus_rejects_dimension_mismatch() -> None:
    beta, _ = _create_tiny_model()
    with pytest.raises(ConfigurationError):
        generate_corpus(1, beta, DirichletParams.symmetric(3), 10.0, np.random.default_rng(0))


def test_empty_document_is_rejected() -> None:
    with pytest.raises(DataError):
        Document([])


def test_gibbs_single_topic_returns_histogram() -> None:
    beta = TopicMatrix(np.full((1, 5), 0.2))
    prior = DirichletParams.symmetric(1)
    doc = Document([0, 3, 3, 4, 0, 0])

    stats = gibbs_estep(doc, beta, prior, n_sweeps=10, burn_in=5, rng=np.random.default_rng(0))

    np.testing.assert_allclose(stats.counts[0], doc.histogram(5), atol=1e-12)


def test_gibbs_mass_equals_document_length() -> None:
    beta, prior = _create_tiny_model()
    doc = Document([0, 1, 2, 2, 1, 0, 0])
    stats = gibbs_estep(doc, beta, prior, n_sweeps=30, burn_in=10, rng=np.random.default_rng(4))
    assert abs(stats.total() - len(doc)) < 1e-9


def test_gibbs_matches_exact_enumeration() -> None:
    beta, prior = _create_tiny_model()
    doc = Document([0, 2, 2, 1])
    exact = exact_estep(doc, beta, prior)

    chains = [
        gibbs_estep(doc, beta, prior, n_sweeps=20000, burn_in=1000, rng=np.random.default_rng(seed)).counts
        for seed in range(5)
    ]

    assert np.max(np.abs(np.mean(chains, axis=0) - exact.counts)) <= 0.02


def test_gibbs_close_to_exact_on_random_instances() -> None:
    rng = np.random.default_rng(11)
    within_tolerance = 0
    for _ in range(20):
        n_topics = int(rng.choice([2, 3]))
        vocab_size = int(rng.choice([3, 5]))
        beta = TopicMatrix(rng.dirichlet(np.ones(vocab_size), size=n_topics))
        prior = DirichletParams(rng.uniform(0.3, 1.5, size=n_topics))
        doc = Document(rng.integers(vocab_size, size=int(rng.integers(1, 7))))

        chains = [
            gibbs_estep(doc, beta, prior, n_sweeps=2000, burn_in=100, rng=np.random.default_rng(seed)).counts
            for seed in range(5)
        ]
        error = np.max(np.abs(np.mean(chains, axis=0) - exact_estep(doc, beta, prior).counts))
        within_tolerance += int(error <= 0.02)

    assert within_tolerance >= 18


def test_gibbs_reports_position_of_impossible_word() -> None:
    beta = TopicMatrix(np.array([[0.5, 0.5, 0.0], [0.3, 0.7, 0.0]]))
    prior = DirichletParams.symmetric(2)

    with pytest.raises(NumericalError) as exc:
        gibbs_estep(Document([0, 2]), beta, prior, n_sweeps=5, burn_in=1, rng=np.random.default_rng(0))

    assert exc.value.position == 1
    assert exc.value.category == "numerical"


def test_shared_input_checks() -> None:
    beta, prior = _create_tiny_model()
    check_dimensions(beta, prior)
    np.testing.assert_array_equal(checked_words(Document([2, 0, 1]), 3), [2, 0, 1])

    with pytest.raises(ConfigurationError):
        check_dimensions(beta, DirichletParams.symmetric(3))
    with pytest.raises(DataError, match="position 1"):
        checked_words(Document([0, 3]), 3)


def test_gibbs_rejects_out_of_range_words() -> None:
    beta, prior = _create_tiny_model()
    with pytest.raises(DataError):
        gibbs_estep(Document([0, 3]), beta, prior, n_sweeps=2, burn_in=1, rng=np.random.default_rng(0))


def test_gibbs_requires_more_sweeps_than_burn_in() -> None:
    beta, prior = _create_tiny_model()
    with pytest.raises(ConfigurationError):
        gibbs_estep(Document([0]), beta, prior, n_sweeps=5, burn_in=5, rng=np.random.default_rng(0))


def test_exact_single_topic_returns_histogram() -> None:
    beta = TopicMatrix(np.array([[0.5, 0.25, 0.25]]))
    doc = Document([2, 2, 0, 1])
    stats = exact_estep(doc, beta, DirichletParams.symmetric(1))
    np.testing.assert_allclose(stats.counts[0], [1.0, 1.0, 2.0], atol=1e-12)


def test_exact_single_word_posterior() -> None:
    beta, prior = _create_tiny_model()
    prior = DirichletParams(np.array([0.2, 0.8]))
    stats = exact_estep(Document([2]), beta, prior)

    weights = prior.alpha * beta.beta[:, 2]
    expected = np.zeros((2, 3))
    expected[:, 2] = weights / weights.sum()
    np.testing.assert_allclose(stats.counts, expected, atol=1e-12)


def test_exact_identical_topics_give_identical_rows() -> None:
    beta = TopicMatrix(np.array([[0.6, 0.3, 0.1], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]]))
    stats = exact_estep(Document([0, 1, 2, 2, 0]), beta, DirichletParams.symmetric(3))
    np.testing.assert_allclose(stats.counts[0], stats.counts[1], atol=1e-12)
    assert abs(stats.total() - 5) < 1e-9


def test_exact_enumeration_guard() -> None:
    beta, prior = _create_tiny_model()
    with pytest.raises(InfeasibleError):
        exact_estep(Document([0] * 21), beta, prior)


def test_exact_log_likelihood_single_word() -> None:
    beta, prior = _create_tiny_model()
    expected = np.log(np.sum(prior.alpha / prior.alpha.sum() * beta.beta[:, 1]))
    assert abs(exact_log_likelihood(Document([1]), beta, prior) - expected) < 1e-12


def test_m_step_normalizes_rows() -> None:
    one_hot = m_step(SufficientStats(np.array([[3.0, 0.0], [0.0, 2.0]])), smoothing=0.0)
    np.testing.assert_allclose(one_hot.beta, np.eye(2))

    uniform = m_step(SufficientStats(np.array([[2.0, 2.0]])), smoothing=0.0)
    np.testing.assert_allclose(uniform.beta, [[0.5, 0.5]])

    smoothed = m_step(SufficientStats(np.array([[1.0, 3.0]])), smoothing=1.0)
    np.testing.assert_allclose(smoothed.beta, [[2 / 6, 4 / 6]])


def test_m_step_rejects_empty_row_without_smoothing() -> None:
    with pytest.raises(DegenerateRowError):
        m_step(SufficientStats(np.array([[1.0, 1.0], [0.0, 0.0]])), smoothing=0.0)


def test_m_step_is_idempotent_on_normalized_stats() -> None:
    rows = np.random.default_rng(5).dirichlet(np.ones(6), size=3)
    np.testing.assert_allclose(m_step(SufficientStats(rows), smoothing=0.0).beta, rows, atol=1e-12)


def test_goem_update_with_unit_step_returns_batch_mean() -> None:
    beta, prior = _create_tiny_model()
    batch = [Document([0, 1]), Document([2, 2, 1])]
    current = SufficientStats(np.full((2, 3), 5.0))
    exact = EStepConfig(n_sweeps=2, burn_in=1, exact=True)

    updated = goem_update(current, batch, beta, prior, 1.0, exact, np.random.default_rng(0))

    expected = (exact_estep(batch[0], beta, prior).counts + exact_estep(batch[1], beta, prior).counts) / 2
    np.testing.assert_allclose(updated.counts, expected, atol=1e-12)


def test_goem_update_is_a_convex_combination() -> None:
    beta, prior = _create_tiny_model()
    doc = Document([0, 2, 1, 1])
    current = SufficientStats(np.arange(6, dtype=float).reshape(2, 3))
    exact = EStepConfig(n_sweeps=2, burn_in=1, exact=True)

    updated = goem_update(current, [doc], beta, prior, 0.5, exact, np.random.default_rng(0))

    np.testing.assert_allclose(updated.counts, 0.5 * current.counts + 0.5 * exact_estep(doc, beta, prior).counts)


def test_goem_update_duplicate_documents_match_single_document() -> None:
    beta, prior = _create_tiny_model()
    doc = Document([1, 0, 2])
    current = SufficientStats(np.ones((2, 3)))
    exact = EStepConfig(n_sweeps=2, burn_in=1, exact=True)

    twice = goem_update(current, [doc, doc], beta, prior, 0.3, exact, np.random.default_rng(0))
    once = goem_update(current, [doc], beta, prior, 0.3, exact, np.random.default_rng(0))

    np.testing.assert_allclose(twice.counts, once.counts, atol=1e-12)


def test_goem_entries_lie_between_combined_terms() -> None:
    beta, prior = _create_tiny_model()
    rng = np.random.default_rng(6)
    current = SufficientStats(rng.uniform(0, 3, size=(2, 3)))
    batch = [Document([0, 1, 2, 2]), Document([1, 1])]

    updated, expected = goem_step(current, batch, beta, prior, 0.4, EStepConfig(n_sweeps=20, burn_in=5), rng)

    lower = np.minimum(current.counts, expected.counts) - 1e-12
    upper = np.maximum(current.counts, expected.counts) + 1e-12
    assert np.all((updated.counts >= lower) & (updated.counts <= upper))


@pytest.mark.parametrize("rho", [0.0, 1.5])
def test_goem_update_rejects_invalid_step(rho: float) -> None:
    beta, prior = _create_tiny_model()
    with pytest.raises(ConfigurationError):
        goem_update(SufficientStats.zeros(2, 3), [Document([0])], beta, prior, rho, EStepConfig(), np.random.default_rng(0))


def test_single_topic_goem_recovers_generating_topic() -> None:
    rng = np.random.default_rng(7)
    beta_star = TopicMatrix(rng.dirichlet(np.ones(10))[None, :])
    prior = DirichletParams.symmetric(1)
    corpus = [doc for doc, _ in generate_corpus(6000, beta_star, prior, 10.0, rng)]
    schedule = StepSchedule(t0=0.0, kappa=1.0)
    estep = EStepConfig(n_sweeps=2, burn_in=1)

    stats = SufficientStats(np.full((1, 10), 1.0))
    for t in range(1, 301):
        batch = corpus[(t - 1) * 20 : t * 20]
        stats = goem_update(stats, batch, m_step(stats), prior, schedule.rho(t), estep, rng)

    total_variation = 0.5 * np.abs(m_step(stats).beta - beta_star.beta).sum()
    assert total_variation <= 0.05


def test_corpus_file_round_trip(tmp_path) -> None:
    docs = [Document([0, 4, 4]), Document([2])]
    path = tmp_path / "corpus.txt"

    save_corpus(path, docs, vocab_size=5, n_topics=2)
    loaded, vocab_size, n_topics = load_corpus(path)

    assert path.read_text().splitlines()[0] == "V=5 K=2"
    assert (vocab_size, n_topics) == (5, 2)
    assert [doc.words.tolist() for doc in loaded] == [[0, 4, 4], [2]]


def test_corpus_file_rejects_out_of_range_word(tmp_path) -> None:
    path = tmp_path / "corpus.txt"
    path.write_text("V=3 K=2\n0 1\n2 3\n")
    with pytest.raises(DataError):
        load_corpus(path)
