"""Unit tests for rule states, the codebook, window profiles and discretised rules."""

import json

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays


@pytest.mark.unit
def test_rule_states_are_bounded_and_shaped(rng):
    from rule_miner.rule_engine import RuleGenerator, rule_states
    from rule_miner.tensor_core import Tensor
    from rule_miner.temporal_attention import temporal_step_weights

    generator = RuleGenerator.initialize(rng, d_model=6, d_r=5)
    H = Tensor(rng.normal(scale=3.0, size=(7, 6)))
    states = rule_states(H, temporal_step_weights(H), generator)

    assert states.shape == (7, 5)
    assert np.all(np.abs(states.data) < 1.0), "gated tanh states must stay inside (-1, 1)"


@pytest.mark.unit
def test_first_state_reads_weighted_context(rng):
    from rule_miner.rule_engine import RuleGenerator, generate_rule_state, rule_states
    from rule_miner.tensor_core import Tensor

    generator = RuleGenerator.initialize(rng, d_model=3, d_r=2)
    H = Tensor(rng.normal(size=(2, 3)))
    A = Tensor(np.array([[0.25, 0.5], [0.75, 0.5]]))
    context = A.data.T @ H.data

    states = rule_states(H, A, generator)
    expected = generate_rule_state(Tensor(context[:1]), Tensor(np.zeros((1, 2))), generator)
    np.testing.assert_allclose(states.data[0], expected.data[0])


@pytest.mark.unit
def test_rule_state_shape_checks(rng):
    from rule_miner.exceptions import ShapeError
    from rule_miner.rule_engine import RuleGenerator, generate_rule_state, rule_states
    from rule_miner.tensor_core import Tensor

    generator = RuleGenerator.initialize(rng, d_model=3, d_r=2)
    with pytest.raises(ShapeError):
        generate_rule_state(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 2))), generator)
    with pytest.raises(ShapeError):
        rule_states(Tensor(np.ones((3, 3))), Tensor(np.eye(2)), generator)


@pytest.mark.unit
def test_step_transition_matrix_is_column_stochastic(rng):
    from rule_miner.rule_engine import step_transition_matrix

    values = step_transition_matrix(rng.normal(size=(5, 3))).values
    np.testing.assert_allclose(values.sum(axis=0), 1.0, atol=1e-12)


@pytest.mark.unit
def test_codebook_seeding_gives_distinct_codes(rng):
    from rule_miner.rule_engine import RuleCodebook

    book = RuleCodebook.random(rng, m=4, d_r=3)
    states = np.repeat(rng.normal(size=(2, 3)), 10, axis=0)
    book.initialize(states, np.random.default_rng(0))

    assert book.min_pairwise_distance() > 0.0, "seeded codes must be pairwise distinct"
    assert book.stats["initializations"] == 1
    assert book.stats["duplicate_codes_jittered"] > 0, "two unique states cannot seed four codes"


@pytest.mark.unit
def test_codebook_validation(rng):
    from rule_miner.exceptions import ConfigError, InputError, ShapeError
    from rule_miner.rule_engine import RuleCodebook
    from rule_miner.tensor_core import Tensor

    with pytest.raises(ConfigError):
        RuleCodebook(Tensor(np.ones((1, 3))))
    book = RuleCodebook.random(rng, m=3, d_r=3)
    with pytest.raises(ShapeError):
        book.initialize(np.ones((5, 2)), rng)
    with pytest.raises(InputError):
        book.initialize(np.zeros((0, 3)), rng)


@pytest.mark.unit
def test_repulsion_is_mean_off_diagonal_cosine():
    from rule_miner.rule_engine import RuleCodebook
    from rule_miner.tensor_core import Tensor

    orthogonal = RuleCodebook(Tensor(np.eye(3)))
    assert orthogonal.repulsion().item() == pytest.approx(0.0, abs=1e-12)
    aligned = RuleCodebook(Tensor(np.array([[1.0, 0.0], [2.0, 0.0]])))
    assert aligned.repulsion().item() == pytest.approx(1.0)


@pytest.mark.unit
def test_assignments_prefer_the_matching_code():
    from rule_miner.exceptions import ConfigError
    from rule_miner.rule_engine import RuleCodebook, assign_code, assign_probabilities
    from rule_miner.tensor_core import Tensor

    book = RuleCodebook(Tensor(np.eye(3)))
    probs = assign_probabilities(Tensor(np.array([[0.0, 2.0, 0.0], [0.0, 0.0, -1.0]])), book.codes, 0.5)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0)
    assert int(np.argmax(probs.data[0])) == 1

    assignment = assign_code(np.array([0.0, 0.0, 5.0]), book, 0.1)
    assert assignment.code == 2
    assert assignment.probabilities.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        assign_probabilities(Tensor(np.eye(3)), book.codes, 0.0)


@pytest.mark.unit
def test_assignment_ties_resolve_to_lowest_code():
    from rule_miner.rule_engine import RuleAssignment

    assert RuleAssignment.from_probabilities(np.array([0.4, 0.4, 0.2])).code == 0


@pytest.mark.unit
def test_code_transition_counts():
    from rule_miner.exceptions import InputError
    from rule_miner.rule_engine import code_transition_counts

    matrix = code_transition_counts([[0, 1, 1], [1, 0]], m=2)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    np.testing.assert_allclose(matrix, [[1 / 3, 2 / 3], [2 / 4, 2 / 4]])
    with pytest.raises(InputError):
        code_transition_counts([[0]], m=2)


@pytest.mark.unit
def test_planted_windows_carry_their_atoms(planted_dataset, planted_profiles):
    for rule in planted_dataset.planted_rules:
        members = set(planted_dataset.members[rule.rule_id])
        for index in range(len(planted_profiles)):
            transaction = planted_profiles.transaction(index, include_levels=False)
            has_all = all(atom in transaction for atom in rule.antecedent)
            assert has_all == (index in members), (
                f"window {index}: planted rule {rule.rule_id} presence mismatch"
            )


@pytest.mark.unit
def test_oracle_memberships_recover_planted_rules(planted_dataset, planted_profiles):
    """Discretising exactly the planted members reproduces each planted rule."""
    from rule_miner.rule_engine import discretize_rule

    for planted in planted_dataset.planted_rules:
        members = planted_dataset.members[planted.rule_id]
        rule = discretize_rule(planted.rule_id, members, planted_profiles)

        events = tuple(atom for atom in rule.antecedent if not atom.is_level)
        assert events == planted.antecedent, f"rule {planted.rule_id}: {rule.label()}"
        assert rule.consequent == planted.consequent
        assert rule.confidence == pytest.approx(1.0)
        assert rule.support == pytest.approx(len(members) / len(planted_profiles))


@pytest.mark.unit
def test_discretize_rule_edge_cases(planted_profiles):
    from rule_miner.exceptions import ConfigError, ShapeError
    from rule_miner.rule_engine import discretize_rule

    assert discretize_rule(0, [], planted_profiles) is None
    with pytest.raises(ConfigError):
        discretize_rule(0, [1, 2], planted_profiles, top_k=0)
    with pytest.raises(ShapeError):
        discretize_rule(0, [1, 2], planted_profiles, salience=np.ones((3, 3)))


@pytest.mark.unit
def test_attention_salience_with_uniform_weights_is_mean_deviation(rng):
    from rule_miner.rule_engine import attention_salience

    sensors = rng.normal(size=(6, 3))
    salience = attention_salience(sensors, np.full(6, 1.0 / 6.0))
    expected = np.abs(sensors - sensors.mean(axis=0)).mean(axis=0)
    np.testing.assert_allclose(salience, expected)


def _profiles_from(slopes, bands):
    from rule_miner.rule_engine import FeatureStats, WindowProfiles

    slopes = np.asarray(slopes, dtype=float)
    n, sensors = slopes.shape
    stats = FeatureStats(
        window=10,
        trend_threshold=np.full(sensors, 0.1),
        level_edges=np.zeros((sensors, 0)),
        band_edges=np.array([50.0]),
    )
    zeros = np.zeros((n, sensors))
    return WindowProfiles(
        slopes=slopes, max_abs_z=zeros, means=zeros, deviation=zeros,
        level_bins=np.zeros((n, sensors), dtype=int), bands=np.asarray(bands), stats=stats,
    )


@pytest.mark.unit
def test_support_and_confidence_by_hand():
    from rule_miner.data_io import Atom, Predicate
    from rule_miner.exceptions import UndefinedMetricError
    from rule_miner.rule_engine import DiscretizedRule, confidence, score_rule, support

    profiles = _profiles_from([[1.0], [1.0], [1.0], [0.0], [-1.0]], bands=[1, 1, 0, 1, 0])
    up = DiscretizedRule(0, (Atom(0, Predicate.TREND_UP, 10),), consequent=1)
    assert support(up, profiles) == pytest.approx(0.6)
    assert confidence(up, profiles) == pytest.approx(2 / 3)

    never = _profiles_from([[0.0], [0.0]], bands=[0, 0])
    with pytest.raises(UndefinedMetricError):
        confidence(up, never)
    scored = score_rule(up, never)
    assert scored.support == 0.0 and scored.confidence is None


@pytest.mark.unit
def test_sort_rules_orders_by_confidence_then_id():
    from rule_miner.data_io import Atom, Predicate
    from rule_miner.rule_engine import DiscretizedRule, sort_rules

    atom = (Atom(0, Predicate.TREND_UP, 10),)
    rules = [
        DiscretizedRule(3, atom, 0, confidence=0.5),
        DiscretizedRule(1, atom, 1, confidence=None),
        DiscretizedRule(2, atom, 0, confidence=0.9),
        DiscretizedRule(0, atom, 1, confidence=0.5),
    ]
    assert [rule.rule_id for rule in sort_rules(rules)] == [2, 0, 3, 1]


@pytest.mark.unit
def test_empty_antecedent_is_rejected():
    from rule_miner.exceptions import InputError
    from rule_miner.rule_engine import DiscretizedRule

    with pytest.raises(InputError):
        DiscretizedRule(0, (), 1)


@pytest.mark.unit
def test_rule_correlation_is_jaccard_of_coverage():
    from rule_miner.data_io import Atom, Predicate
    from rule_miner.rule_engine import DiscretizedRule, rule_correlation

    profiles = _profiles_from(
        [[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]], bands=[0, 0, 0, 0, 0]
    )
    rules = [
        DiscretizedRule(0, (Atom(0, Predicate.TREND_UP, 10),), 0),
        DiscretizedRule(1, (Atom(1, Predicate.TREND_UP, 10),), 0),
        DiscretizedRule(2, (Atom(0, Predicate.TREND_DOWN, 10),), 0),
    ]
    matrix = rule_correlation(rules, profiles)
    np.testing.assert_allclose(np.diag(matrix), 1.0)
    np.testing.assert_allclose(matrix, matrix.T)
    assert matrix[0, 1] == pytest.approx(2 / 4)
    assert matrix[0, 2] == 0.0, "a rule covering nothing correlates with nothing"


@pytest.mark.unit
def test_planted_overlap_shows_in_rule_correlation():
    from rule_miner.data_io import synth_planted_rules
    from rule_miner.eval_harness import planted_as_rules
    from rule_miner.rule_engine import fit_feature_stats, profile_windows, rule_correlation

    dataset = synth_planted_rules(
        seed=3, k=3, n=1000, n_sensors=8, window=30, overlaps=[[0, 1, 0.93]]
    )
    stats = fit_feature_stats(dataset.windows, band_edges=dataset.band_edges)
    profiles = profile_windows(dataset.windows, stats)
    rules = sorted(planted_as_rules(dataset.planted_rules, profiles), key=lambda r: r.rule_id)

    matrix = rule_correlation(rules, profiles)
    assert matrix[0, 1] == pytest.approx(0.93, abs=0.02)
    assert matrix[0, 2] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.unit
def test_cumulative_rule_count_is_non_decreasing():
    from rule_miner.rule_engine import cumulative_rule_count

    series = cumulative_rule_count([["a"], ["a", "b"], [], ["b"], ["c", "a"]])
    assert series == [1, 2, 2, 2, 3]


@pytest.mark.unit
def test_rules_json_document_layout(planted_dataset, planted_profiles):
    from rule_miner.eval_harness import planted_as_rules
    from rule_miner.rule_engine import rules_from_json, rules_to_json

    rules = planted_as_rules(planted_dataset.planted_rules, planted_profiles)
    text = rules_to_json(rules)
    document = json.loads(text)

    assert text.endswith("\n")
    assert set(document[0]) == {"id", "antecedent", "consequent", "support", "confidence"}
    assert {"feature", "predicate", "window"} <= set(document[0]["antecedent"][0])
    restored = rules_from_json(text)
    assert [r.key for r in restored] == [r.key for r in rules]


@pytest.mark.unit
def test_feature_stats_round_trip_and_bins(planted_profiles):
    from rule_miner.rule_engine import FeatureStats

    stats = planted_profiles.stats
    restored = FeatureStats.from_dict(json.loads(json.dumps(stats.to_dict())))
    np.testing.assert_array_equal(restored.level_edges, stats.level_edges)
    assert restored.n_bands == 4
    assert list(stats.rul_bands([0.0, 31.25, 124.0])) == [0, 1, 3]


@pytest.mark.unit
def test_mixed_membership_peels_every_planted_rule(planted_dataset, planted_profiles):
    """One code holding every planted rule plus plain noise still yields each rule exactly."""
    from rule_miner.rule_engine import discretize_code

    planted_members = sorted(i for members in planted_dataset.members.values() for i in members)
    noise = [i for i in range(len(planted_profiles)) if i not in set(planted_members)][:20]
    rules = discretize_code(0, planted_members + noise, planted_profiles, min_members=3)

    found = {(rule.antecedent, rule.consequent) for rule in rules}
    for planted in planted_dataset.planted_rules:
        assert (planted.antecedent, planted.consequent) in found, f"rule {planted.rule_id} not peeled"
    assert len(rules) == len(planted_dataset.planted_rules), "noise windows must not produce a rule"
    assert all(rule.confidence == pytest.approx(1.0) for rule in rules)


@pytest.mark.unit
def test_seed_atom_is_the_most_enriched_not_the_most_frequent():
    from rule_miner.data_io import Atom, Predicate
    from rule_miner.rule_engine import discretize_code, discretize_rule

    # sensor 0 trends up in windows 3..9, sensor 1 only in windows 0..2; the code is 0..4
    slopes = np.zeros((10, 2))
    slopes[3:, 0] = 1.0
    slopes[:3, 1] = 1.0
    bands = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    profiles = _profiles_from(slopes, bands)

    rule = discretize_rule(7, [0, 1, 2, 3, 4], profiles)
    assert rule.antecedent == (Atom(1, Predicate.TREND_UP, 10),)
    assert rule.consequent == 1
    assert rule.confidence == pytest.approx(1.0)
    assert rule.support == pytest.approx(0.3)
    assert rule.members == 3

    peeled = discretize_code(7, [0, 1, 2, 3, 4], profiles)
    assert [r.antecedent for r in peeled] == [
        (Atom(1, Predicate.TREND_UP, 10),),
        (Atom(0, Predicate.TREND_UP, 10),),
    ]
    assert [r.consequent for r in peeled] == [1, 0]


@pytest.mark.unit
def test_co_firing_atoms_join_the_antecedent():
    from rule_miner.data_io import Atom, Predicate
    from rule_miner.rule_engine import discretize_rule

    slopes = np.zeros((8, 3))
    slopes[:4, 0] = 1.0
    slopes[:4, 1] = -1.0
    slopes[:2, 2] = 1.0  # fires on half of the covered windows only
    profiles = _profiles_from(slopes, [1, 1, 1, 1, 0, 0, 0, 0])

    rule = discretize_rule(0, [0, 1, 2, 3], profiles, top_k=3, cooccurrence=0.9)
    assert rule.antecedent == (Atom(0, Predicate.TREND_UP, 10), Atom(1, Predicate.TREND_DOWN, 10))

    loose = discretize_rule(0, [0, 1, 2, 3], profiles, top_k=3, cooccurrence=0.5)
    assert len(loose.antecedent) == 3
    capped = discretize_rule(0, [0, 1, 2, 3], profiles, top_k=1)
    assert len(capped.antecedent) == 1


@pytest.mark.unit
def test_without_events_a_single_level_rule_is_emitted():
    from rule_miner.rule_engine import discretize_code

    profiles = _profiles_from(np.zeros((6, 2)), [0, 0, 1, 1, 1, 1])
    rules = discretize_code(3, range(6), profiles, min_members=1)

    assert len(rules) == 1
    assert all(atom.is_level for atom in rules[0].antecedent)
    assert rules[0].consequent == 1


@pytest.mark.unit
def test_peeling_respects_its_limits(planted_dataset, planted_profiles):
    from rule_miner.exceptions import ConfigError
    from rule_miner.rule_engine import discretize_code, discretize_rule

    everything = range(len(planted_profiles))
    assert len(discretize_code(0, everything, planted_profiles, max_rules=2)) == 2
    assert discretize_code(0, [0, 1], planted_profiles, min_members=3) == []
    with pytest.raises(ConfigError):
        discretize_code(0, everything, planted_profiles, max_rules=0)
    with pytest.raises(ConfigError):
        discretize_rule(0, [1, 2], planted_profiles, cooccurrence=0.0)


@pytest.mark.unit
def test_revive_moves_unused_codes_onto_uncovered_states():
    from rule_miner.rule_engine import RuleCodebook
    from rule_miner.tensor_core import Tensor

    book = RuleCodebook(Tensor(np.tile([1.0, 0.0, 0.0], (4, 1))))
    states = np.repeat(np.eye(3), 5, axis=0) * np.linspace(0.5, 1.5, 15)[:, None]
    assert set(book.nearest(states)) == {0}

    revived = book.revive(states)
    assert revived == [1, 2]
    assert set(book.nearest(states)) == {0, 1, 2}
    assert book.stats["codes_revived"] == 2

    assert book.revive(states) == [], "no state is left uncovered"
    np.testing.assert_allclose(book.codes.data[3], [1.0, 0.0, 0.0])


@pytest.mark.unit
def test_revive_validation(rng):
    from rule_miner.exceptions import ShapeError
    from rule_miner.rule_engine import RuleCodebook

    book = RuleCodebook.random(rng, m=3, d_r=4)
    assert book.revive(np.zeros((0, 4))) == []
    with pytest.raises(ShapeError):
        book.revive(np.ones((2, 3)))


@pytest.mark.unit
@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-5.0, 5.0)),
    arrays(np.float64, (5, 4), elements=st.floats(-5.0, 5.0)),
    st.floats(0.01, 0.99),
    st.floats(1.0, 20.0),
)
def test_argmax_code_does_not_depend_on_temperature(states, codes, cold, hot):
    from rule_miner.rule_engine import RuleCodebook, assign_code, assign_probabilities
    from rule_miner.tensor_core import Tensor

    assume(np.all(np.linalg.norm(states, axis=1) > 1e-3))
    assume(np.all(np.linalg.norm(codes, axis=1) > 1e-3))
    units = states / np.linalg.norm(states, axis=1, keepdims=True)
    sims = units @ (codes / np.linalg.norm(codes, axis=1, keepdims=True)).T
    top_two = np.sort(sims, axis=1)[:, -2:]
    assume(np.all(top_two[:, 1] - top_two[:, 0] > 1e-6))

    book = RuleCodebook(Tensor(codes))
    sharp = assign_probabilities(Tensor(states), book.codes, cold).data
    smooth = assign_probabilities(Tensor(states), book.codes, hot).data
    np.testing.assert_allclose(sharp.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(np.argmax(sharp, axis=1), np.argmax(smooth, axis=1))
    np.testing.assert_array_equal(np.argmax(sharp, axis=1), book.nearest(states))
    for row, state in enumerate(states):
        assert assign_code(state, book, cold).code == assign_code(state, book, hot).code
        assert assign_code(state, book, hot).code == int(np.argmax(sharp[row]))


@pytest.mark.unit
@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(
    arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 5)), elements=st.floats(-10.0, 10.0)),
    st.floats(1e-2, 1e2),
)
def test_transition_matrix_is_column_stochastic_and_scale_free(states, scale):
    from rule_miner.rule_engine import step_transition_matrix

    assume(np.all(np.linalg.norm(states, axis=1) > 1e-3))
    values = step_transition_matrix(states).values
    np.testing.assert_allclose(values.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(values >= 0.0)
    np.testing.assert_allclose(step_transition_matrix(states * scale).values, values, atol=1e-9)
