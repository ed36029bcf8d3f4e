import numpy as np
import pytest

from app.core.config import settings
from app.core.errors import GapComputationError, InfeasibleActionError, SchedulingError, UnknownNameError
from app.services.dp import evaluate_policy, solve_fullinfo
from app.services.model import canonical_instance
from app.services.policies import (
    Drain,
    FullInformationPolicy,
    NestedSequential,
    OfferingAll,
    Pi1,
    Policy,
    RandomSequential,
)
from app.services.sim import (
    MultiDayConfig,
    _choose,
    gap_statistics,
    percentage_changes,
    simulate_multiday,
    simulate_single_day,
)


def test_offering_all_mean_matches_exact_value(n_instance):
    report = simulate_single_day(n_instance, OfferingAll(), replications=100_000, seed=11)
    assert abs(report.mean - 1.625) < 3 * report.std_error
    assert report.replications == 100_000
    assert report.fill_rate == pytest.approx(report.mean / 2)


def test_identical_seeds_reproduce_reports():
    # idle periods and binding capacity give the daily fill real variance
    instance = canonical_instance("M", [0.3, 0.3], 20, [4, 4, 4])
    first = simulate_single_day(instance, RandomSequential(), replications=2500, seed=3, keep_counts=True)
    second = simulate_single_day(instance, RandomSequential(), replications=2500, seed=3, keep_counts=True)
    assert first.to_dict(keep_counts=True) == second.to_dict(keep_counts=True)
    other = simulate_single_day(instance, RandomSequential(), replications=2500, seed=4, keep_counts=True)
    assert len(set(first.counts)) > 1
    assert other.counts != first.counts


def test_replication_count_must_be_positive(n_instance):
    for replications in (0, -5):
        with pytest.raises(SchedulingError):
            simulate_single_day(n_instance, OfferingAll(), replications=replications, seed=1)
    assert simulate_single_day(n_instance, OfferingAll(), seed=1).replications == settings.DEFAULT_REPLICATIONS


def test_fill_never_exceeds_capacity_or_arrivals(m_instance):
    report = simulate_single_day(m_instance, OfferingAll(), replications=3000, seed=5, keep_counts=True)
    counts = np.asarray(report.counts)
    assert counts.min() >= 0
    assert counts.max() <= min(int(m_instance.capacity.sum()), m_instance.horizon)
    assert all(mean <= cap for mean, cap in zip(report.per_type_mean, m_instance.capacity))


def test_report_drops_counts_unless_requested(n_instance):
    report = simulate_single_day(n_instance, OfferingAll(), replications=10, seed=1)
    doc = report.to_dict()
    assert "counts" not in doc
    assert "turned_away" not in doc
    assert report.counts is None


def test_rare_arrivals_book_rarely():
    instance = canonical_instance("N", [1e-9, 1e-9], 5, [2, 2])
    report = simulate_single_day(instance, OfferingAll(), replications=500, seed=2, keep_counts=True)
    assert report.mean == 0.0


def test_infeasible_policy_is_reported(n_instance):
    class Reckless(Policy):
        name = "reckless"

        def stages(self, instance, n, states, rng=None):
            return np.ones_like(np.asarray(states))

    with pytest.raises(InfeasibleActionError):
        simulate_single_day(n_instance, Reckless(), replications=50, seed=1)


def test_replications_must_be_positive(n_instance):
    with pytest.raises(SchedulingError):
        simulate_single_day(n_instance, OfferingAll(), replications=-1, seed=1)


def test_choose_follows_stages():
    stages = np.array([[1, 2, 1], [1, 2, 1], [0, 1, 0]])
    accepts = np.array([[False, True, True], [False, True, False], [True, False, True]])
    picks = _choose(stages, accepts, np.array([0.1, 0.9, 0.5]))
    # stage 1 holds slot 3 for the first customer; the second only reaches slot 2 at stage 2
    assert picks.tolist() == [2, 1, -1]


@pytest.mark.slow
@pytest.mark.parametrize("family,lam,capacity", [
    ("N", [0.5, 0.5], [3, 2]),
    ("M", [1 / 3, 2 / 3], [2, 2, 2]),
    ("W", [0.2, 0.5, 0.3], [3, 3]),
])
def test_simulated_means_converge_to_exact_values(family, lam, capacity):
    instance = canonical_instance(family, lam, 6, capacity)
    policies = [OfferingAll(), Drain(), RandomSequential()]
    if family == "M":
        policies.append(Pi1(instance))
    for policy in policies:
        exact = evaluate_policy(instance, policy).initial_value
        report = simulate_single_day(instance, policy, replications=100_000, seed=17)
        assert abs(report.mean - exact) < 4 * report.std_error, policy.name


@pytest.mark.slow
def test_fullinfo_and_nested_sequential_fill_alike():
    instance = canonical_instance("M", [0.5, 0.5], 10, [4, 3, 3])
    nested = simulate_single_day(instance, NestedSequential(instance), replications=100_000, seed=23)
    full = simulate_single_day(instance, FullInformationPolicy(solve_fullinfo(instance)), replications=100_000,
                               seed=29)
    spread = np.hypot(nested.std_error, full.std_error)
    assert abs(nested.mean - full.mean) < 3 * spread


def short_config(instance, **overrides):
    options = dict(template=instance, total_days=80, warmup=20, seed=9)
    options.update(overrides)
    return MultiDayConfig(**options)


def test_multiday_runs_and_is_reproducible():
    instance = canonical_instance("M", [1 / 3, 2 / 3], 30, [10, 10, 10])
    first = simulate_multiday(short_config(instance), "nested-seq", keep_counts=True)
    second = simulate_multiday(short_config(instance), "nested-seq", keep_counts=True)
    assert first.counts == second.counts
    assert first.replications == 60
    assert all(0 <= c <= 30 for c in first.counts)
    assert first.turned_away >= 0
    assert first.to_dict()["extra"] == {"acceptable_days": 1, "demand_mode": "det"}


def test_multiday_poisson_and_flexibility():
    instance = canonical_instance("M", [0.5, 0.5], 30, [10, 10, 10])
    report = simulate_multiday(short_config(instance, demand_mode="poisson", acceptable_days=3), "offering-all")
    assert 0 < report.mean <= 30


def test_multiday_zero_demand_books_nothing():
    instance = canonical_instance("M", [0.5, 0.5], 30, [10, 10, 10])
    report = simulate_multiday(short_config(instance, demand=0), "pi1")
    assert report.mean == 0.0
    assert report.turned_away == 0


def test_multiday_rejects_unsupported_policy():
    instance = canonical_instance("M", [0.5, 0.5], 30, [10, 10, 10])
    with pytest.raises(UnknownNameError):
        simulate_multiday(short_config(instance), "drain")


def test_multiday_config_checks():
    instance = canonical_instance("M", [0.5, 0.5], 30, [10, 10, 10])
    with pytest.raises(SchedulingError):
        simulate_multiday(short_config(instance, acceptable_days=16), "pi1")
    with pytest.raises(SchedulingError):
        simulate_multiday(short_config(instance, warmup=80), "pi1")
    with pytest.raises(SchedulingError):
        simulate_multiday(short_config(instance, demand_mode="bursty"), "pi1")


def test_gap_statistics():
    stats = gap_statistics([(10, 9), (10, 9.5)])
    assert stats == pytest.approx({"max": -10.0, "average": -7.5, "median": -7.5})
    assert gap_statistics([(4, 4), (5, 5)]) == {"max": 0.0, "average": 0.0, "median": 0.0}
    improvement = gap_statistics([(10, 11), (20, 21), (5, 6)], formula="improvement")
    assert improvement["max"] == pytest.approx(20.0)
    assert improvement["median"] == pytest.approx(10.0)


def test_gap_statistics_errors():
    with pytest.raises(GapComputationError):
        gap_statistics([(0, 1)])
    with pytest.raises(GapComputationError):
        gap_statistics([])
    with pytest.raises(UnknownNameError):
        gap_statistics([(1, 1)], formula="ratio")


def test_percentage_changes():
    assert percentage_changes([(2, 3), (4, 2)]).tolist() == pytest.approx([50.0, -50.0])
