import json

import numpy as np
import pytest

from app.core.config import settings
from app.core.errors import ExperimentCancelled, SchedulingError, UnknownNameError
from app.services.dp import solve_seq
from app.services.experiments import (
    TABLE_NAMES,
    Comparison,
    ExperimentSpec,
    RandomInstanceSpec,
    emit_policy_map,
    enumerate_scenarios,
    expected_rows,
    generate_random_instances,
    lambda_label,
    lambda_scheme,
    random_choice_matrices,
    render_rows,
    run_table,
    scenario_values,
    table_spec,
    thin_grid,
)
from app.services.model import canonical_instance, validate
from app.services.sim import MultiDayConfig, simulate_multiday


@pytest.mark.parametrize("horizon,n_slots,count", [
    (20, 3, 45), (30, 3, 91), (40, 3, 153), (50, 3, 231),
    (20, 2, 13), (30, 2, 19), (40, 2, 25), (50, 2, 31),
])
def test_scenario_counts(horizon, n_slots, count):
    grid = enumerate_scenarios(horizon, n_slots)
    assert len(grid) == count
    assert all(sum(b) == horizon and min(b) >= horizon // 5 for b in grid.vectors)
    assert list(grid.vectors) == sorted(grid.vectors)


def test_random_study_grid_sizes():
    assert len(enumerate_scenarios(10, 3, 0.1)) == 36
    assert len(enumerate_scenarios(20, 3, 0.1)) == 120
    assert len(enumerate_scenarios(10, 4, 0.1)) == 84


def test_grid_cover_and_thinning():
    grid = enumerate_scenarios(20, 3)
    assert grid.cover == (12, 12, 12)
    thin = thin_grid(grid, 10)
    assert len(thin) == 10
    assert thin.vectors[0] == grid.vectors[0] and thin.vectors[-1] == grid.vectors[-1]
    assert thin_grid(grid, None) is grid


def test_infeasible_grid():
    with pytest.raises(SchedulingError):
        enumerate_scenarios(3, 4)
    with pytest.raises(SchedulingError):
        enumerate_scenarios(10, 3, 0.5)


def test_lambda_schemes():
    assert lambda_scheme(1, 4).tolist() == [0.25] * 4
    assert lambda_scheme(2, 2).tolist() == pytest.approx([1 / 3, 2 / 3])
    for scheme in (1, 2, 3):
        for n_types in (2, 3, 5, 7):
            lam = lambda_scheme(scheme, n_types)
            assert lam.sum() == pytest.approx(1.0)
            assert (lam > 0).all()
    with pytest.raises(UnknownNameError):
        lambda_scheme(4, 3)


def test_random_instances_are_valid_and_seeded():
    spec = RandomInstanceSpec(n_slots=3, horizon=10, count=25, scheme=2)
    first = generate_random_instances(spec, seed=5)
    second = generate_random_instances(spec, seed=5)
    assert len(first) == 25
    for a, b in zip(first, second):
        assert validate(a) == []
        assert np.array_equal(a.omega, b.omega)
        assert len({tuple(row) for row in a.omega.tolist()}) == a.n_customer_types
    assert any(not np.array_equal(a.omega, b.omega) for a, b in
               zip(first, generate_random_instances(spec, seed=6)))


def test_random_choice_matrix_rows_are_nonzero():
    for omega in random_choice_matrices(4, 30, seed=1):
        assert (omega.sum(axis=1) > 0).all()


def test_table_catalogue():
    assert set(TABLE_NAMES) >= {
        "m-gap", "mplus1-gap", "random-gap", "drain-n", "drain-m", "drain-w", "seq-vs-nonseq-n",
        "seq-vs-nonseq-m", "seq-vs-nonseq-w", "drain-compare", "pstar-gap", "multiday", "multiday-poisson",
    }
    spec = table_spec("m-gap", horizons=[20], mode=None)
    assert spec.horizons == [20] and spec.mode == "exact"
    assert expected_rows(spec) == 3
    assert expected_rows(table_spec("drain-compare", horizons=[20])) == 18
    with pytest.raises(UnknownNameError):
        table_spec("table-99")
    with pytest.raises(UnknownNameError):
        table_spec("m-gap", mode="approximate")


def test_lambda_label():
    assert lambda_label([0.5, 0.5]) == "1/2,1/2"
    assert lambda_label([1 / 3, 2 / 3]) == "1/3,2/3"


def test_scenario_values_share_one_table():
    grid = enumerate_scenarios(10, 2)
    template = canonical_instance("N", [0.5, 0.5], 10, grid.cover)
    shared = scenario_values(template, "optimal-seq", grid)
    for b, value in zip(grid.vectors, shared):
        own = solve_seq(template.replace(capacity=b), store_actions=False).initial_value
        assert value == pytest.approx(own, abs=1e-9)


def test_policy_compared_with_itself_gives_zeros():
    spec = ExperimentSpec("self", "Offering-all against itself", "N", [[0.5, 0.5]],
                          [Comparison("self", "offering-all", "offering-all")], horizons=[10])
    rows = run_table(spec)
    assert len(rows) == 1
    assert rows[0]["max"] == 0 and rows[0]["average"] == 0 and rows[0]["median"] == 0
    assert rows[0]["scenarios"] == 7


def test_run_table_reports_progress_and_cancels():
    spec = table_spec("m-gap", horizons=[10])
    seen = []
    rows = run_table(spec, progress=lambda done, total: seen.append((done, total)))
    assert seen[-1] == (3, 3)
    assert len(rows) == 3
    assert {row["lambda"] for row in rows} == {"1/2,1/2", "1/3,2/3", "1/4,3/4"}
    assert all(row["average"] <= 0 for row in rows)

    with pytest.raises(ExperimentCancelled):
        run_table(spec, should_stop=lambda: True)


def test_sim_mode_is_seeded():
    spec = table_spec("drain-n", horizons=[10], mode="sim", days=200, seed=4)
    assert run_table(spec) == run_table(spec)


def test_render_rows():
    rows = run_table(table_spec("seq-vs-nonseq-n", horizons=[10]))
    csv = render_rows(rows, "csv")
    assert csv.splitlines()[0].startswith("table,comparison,family,N,lambda,scenarios")
    doc = json.loads(render_rows(rows, "json", title="T"))
    assert doc["title"] == "T" and len(doc["rows"]) == 3
    markdown = render_rows(rows, "markdown", title="Sequential over non-sequential")
    assert markdown.startswith("### Sequential over non-sequential")
    assert "(1/2,1/2) average" in markdown
    with pytest.raises(UnknownNameError):
        render_rows(rows, "xlsx")


def test_random_gap_small_cell():
    spec = table_spec("random-gap", horizons=[10], instances=3)
    rows = run_table(spec)
    # J = 3, 4, 5 each have an N = 10 cell, three schemes each
    assert len(rows) == 9
    assert all(row["instances"] == 3 for row in rows)
    assert all(row["average"] <= 1e-9 for row in rows)


def test_policy_map_w_switching_curve():
    instance = canonical_instance("W", [0.2, 0.5, 0.3], 6, [6, 6])
    rows = emit_policy_map(instance, "seq", {"n": 6}, ["m1", "m2"])
    grid = {(row["m1"], row["m2"]): row["action"] for row in rows}
    assert grid[(3, 3)] == "{1}-{2}"
    assert grid[(3, 4)] == "{2}-{1}"
    for m1 in range(1, 7):
        for m2 in range(1, 6):
            # once slot 2 goes first it keeps doing so as type-2 capacity grows
            if grid[(m1, m2)] == "{2}-{1}":
                assert grid[(m1, m2 + 1)] == "{2}-{1}"
    for m2 in range(1, 7):
        for m1 in range(1, 6):
            if grid[(m1, m2)] == "{1}-{2}":
                assert grid[(m1 + 1, m2)] == "{1}-{2}"


def test_policy_map_boundary_row_excludes_depleted_type():
    instance = canonical_instance("M", [0.5, 0.5], 5, [3, 3, 3])
    rows = emit_policy_map(instance, "nonseq", {"m1": 2, "n": 4}, ["m2", "m3"])
    assert len(rows) == 16
    for row in rows:
        if row["m2"] == 0:
            assert "2" not in row["action"]


def test_policy_map_mplus1_has_unique_12_region():
    instance = canonical_instance("M_PLUS_1", [0.475, 0.475, 0.05], 5, [4, 5, 5])
    rows = emit_policy_map(instance, "nonseq", {"m1": 4, "n": 5}, ["m2", "m3"])
    assert any(row["action"] == "{1,2}" and row["unique"] for row in rows)


def test_policy_map_errors():
    instance = canonical_instance("M", [0.5, 0.5], 5, [3, 3, 3])
    with pytest.raises(SchedulingError):
        emit_policy_map(instance, "nonseq", {"m1": 2}, ["m2", "m3"])
    with pytest.raises(SchedulingError):
        emit_policy_map(instance, "nonseq", {"m1": 9, "n": 2}, ["m2", "m3"])
    with pytest.raises(SchedulingError):
        emit_policy_map(instance, "nonseq", {"n": 2}, ["m2", "m3"])
    with pytest.raises(UnknownNameError):
        emit_policy_map(instance, "fullinfo", {"m1": 1, "n": 2}, ["m2", "m3"])


def find_row(rows, lam):
    return next(row for row in rows if row["lambda"] == lam)


@pytest.mark.slow
def test_m_model_offering_all_gap_reproduction():
    rows = run_table(table_spec("m-gap", horizons=[20]))
    assert find_row(rows, "1/2,1/2")["average"] == pytest.approx(-3.6, abs=0.5)


@pytest.mark.slow
def test_mplus1_offering_all_gap_reproduction():
    rows = run_table(table_spec("mplus1-gap", horizons=[20]))
    assert find_row(rows, "9/20,9/20,1/10")["average"] == pytest.approx(-2.0, abs=0.5)


@pytest.mark.slow
def test_n_model_sequential_improvement_reproduction():
    row = find_row(run_table(table_spec("seq-vs-nonseq-n", horizons=[20])), "1/2,1/2")
    assert row["scenarios"] == 13
    assert row["max"] == pytest.approx(16.0, abs=0.2)
    assert row["average"] == pytest.approx(10.6, abs=0.2)
    assert row["median"] == pytest.approx(12.4, abs=0.2)


@pytest.mark.slow
def test_m_model_sequential_improvement_reproduction():
    row = find_row(run_table(table_spec("seq-vs-nonseq-m", horizons=[20])), "1/2,1/2")
    assert row["max"] == pytest.approx(7.4, abs=0.2)
    assert row["average"] == pytest.approx(4.0, abs=0.2)


@pytest.mark.slow
def test_drain_close_to_optimal_sequential():
    for name, low in (("drain-m", -1.0), ("drain-n", -0.6)):
        for row in run_table(table_spec(name)):
            assert low - 1e-9 <= row["average"] <= 1e-9
            assert row["max"] >= -1.6
    for row in run_table(table_spec("drain-w")):
        assert abs(row["average"]) <= 0.3


@pytest.mark.slow
def test_static_fluid_policy_gap_shrinks():
    rows = run_table(table_spec("pstar-gap", horizons=[20, 50]))
    n20 = next(r for r in rows if r["N"] == 20 and r["lambda"] == "1/2,1/2")["average"]
    n50 = next(r for r in rows if r["N"] == 50 and r["lambda"] == "1/2,1/2")["average"]
    assert -9.0 <= n20 <= -6.5
    assert -6.5 <= n50 <= -4.0
    assert n50 > n20


@pytest.mark.slow
def test_multiday_sequential_improvement_reproduction():
    grid = enumerate_scenarios(30, 3)
    improvements = []
    for b in grid.vectors:
        template = canonical_instance("M", [1 / 3, 2 / 3], 30, b)
        config = MultiDayConfig(template=template, acceptable_days=1, seed=13)
        base = simulate_multiday(config, "offering-all").mean
        improvements.append((simulate_multiday(config, "nested-seq").mean - base) / base * 100)
    assert 9.0 <= max(improvements) <= 13.0
    assert 3.5 <= float(np.mean(improvements)) <= 6.5


def sequential_multiday_rows(name):
    spec = table_spec(name, lambdas=[[1 / 3, 2 / 3]])
    spec.comparisons = [c for c in spec.comparisons if c.compared == "nested-seq"]
    return sorted(run_table(spec), key=lambda row: row["D"])


@pytest.mark.slow
def test_multiday_improvement_falls_with_flexibility():
    rows = sequential_multiday_rows("multiday")
    assert [row["D"] for row in rows] == [1, 2, 3, 4]
    assert all(row["scenarios"] == 91 for row in rows)
    assert 9.0 <= rows[0]["max"] <= 13.0
    assert 3.5 <= rows[0]["average"] <= 6.5
    averages = [row["average"] for row in rows]
    for shorter, longer in zip(averages, averages[1:]):
        assert longer <= shorter + 0.5
    assert averages[-1] < averages[0]


@pytest.mark.slow
def test_multiday_poisson_improvement(monkeypatch):
    monkeypatch.setattr(settings, "MULTIDAY_FLEXIBILITY", [1])
    rows = sequential_multiday_rows("multiday-poisson")
    assert len(rows) == 1
    assert 9.0 <= rows[0]["max"] <= 13.0
    assert 3.5 <= rows[0]["average"] <= 6.5
