"""Query scoring, batch normalization, selection modes, and the case audit."""
import numpy as np
import pytest

from stagepref.errors import SelectionError
from stagepref.mdp import Segment, make_rng
from stagepref.selection import (
    CASE_ORDER,
    CandidateBatch,
    SelectionConfig,
    StageQuasimetric,
    alignment_case_check,
    build_stage_quasimetric,
    case_bounds,
    interval_span_ratio,
    interval_stage_difference,
    normalize_batch,
    quadrilateral_distance,
    select_queries,
    selection_score,
)


def seg(first: int, last: int) -> Segment:
    return Segment(source=0, start=0, length=2, first_state=first, last_state=last)


class TestQuadrilateralDistance:
    def test_hand_computed_mean(self):
        d = np.arange(16, dtype=float).reshape(4, 4)
        s0, s1 = seg(0, 1), seg(2, 3)
        want = (d[0, 2] + d[1, 3] + d[0, 3] + d[1, 2]) / 4.0
        assert quadrilateral_distance(d, s0, s1) == pytest.approx(want)

    def test_identical_point_segments_are_at_zero(self):
        d = np.ones((3, 3)) - np.eye(3)
        assert quadrilateral_distance(d, seg(1, 1), seg(1, 1)) == 0.0

    def test_one_sided_infinity_uses_reverse_direction(self):
        # an endpoint with no outgoing support (an absorbing state) must not
        # poison the pair; the reverse direction stands in for it
        d = np.arange(16, dtype=float).reshape(4, 4)
        d[1, :] = np.inf  # state 1 ends trajectories: nothing is reachable
        s0, s1 = seg(0, 1), seg(2, 3)
        want = (d[0, 2] + d[3, 1] + d[0, 3] + d[2, 1]) / 4.0
        assert quadrilateral_distance(d, s0, s1) == pytest.approx(want)

    def test_two_segments_ending_at_same_terminal_stay_close(self):
        d = np.ones((3, 3)) - np.eye(3)
        d[2, :] = np.inf
        d[2, 2] = 0.0
        # both segments end at the absorbing state 2: same stage, not inf
        assert np.isfinite(quadrilateral_distance(d, seg(0, 2), seg(1, 2)))

    def test_mutually_unreachable_pair_is_infinite(self):
        d = np.zeros((3, 3))
        d[0, 2] = np.inf
        d[2, 0] = np.inf
        assert np.isinf(quadrilateral_distance(d, seg(0, 0), seg(2, 2)))


class TestNormalizeBatch:
    def test_affine_rescale(self):
        out = normalize_batch(np.array([2.0, 4.0, 6.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_constant_batch_maps_to_zero(self):
        np.testing.assert_allclose(normalize_batch(np.full(4, 3.3)), 0.0)

    def test_infinities_map_to_one(self):
        out = normalize_batch(np.array([1.0, np.inf, 3.0]))
        np.testing.assert_allclose(out, [0.0, 1.0, 1.0])

    def test_all_infinite_raises_selection_error(self):
        with pytest.raises(SelectionError):
            normalize_batch(np.array([np.inf, np.inf]))

    def test_nan_and_shape_validation(self):
        with pytest.raises(ValueError, match="NaN"):
            normalize_batch(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            normalize_batch(np.array([]))
        with pytest.raises(ValueError):
            normalize_batch(np.zeros((2, 2)))


class TestSelectionScore:
    def test_formula(self):
        stage = np.array([0.0, 1.0])
        state = np.array([1.0, 0.0])
        out = selection_score(stage, state, c_stage=2.0, c_state=0.1)
        np.testing.assert_allclose(out, [(2.0) * 1.1, (1.0) * 0.1])

    def test_monotonicity(self):
        # lower stage difference or higher disagreement can only help
        base = selection_score(np.array([0.5]), np.array([0.5]))[0]
        assert selection_score(np.array([0.4]), np.array([0.5]))[0] > base
        assert selection_score(np.array([0.5]), np.array([0.6]))[0] > base

    def test_validation(self):
        with pytest.raises(ValueError, match="c_stage"):
            selection_score(np.zeros(1), np.zeros(1), c_stage=1.0)
        with pytest.raises(ValueError, match="c_state"):
            selection_score(np.zeros(1), np.zeros(1), c_state=-0.1)


class TestSelectQueries:
    def make_batch(self, stage, state):
        pairs = [(seg(0, 0), seg(1, 1)) for _ in range(len(stage))]
        return CandidateBatch(pairs=pairs, stage_diff=np.asarray(stage, float),
                              state_diff=np.asarray(state, float))

    def test_stage_aligned_ranks_by_product_score(self):
        batch = self.make_batch(stage=[0.0, 1.0, 0.0, 1.0],
                                state=[1.0, 1.0, 0.0, 0.0])
        cfg = SelectionConfig(mode="stage_aligned", queries_per_session=4)
        order = select_queries(batch, cfg)
        # scores: (2)(1.1)=2.2, (1)(1.1)=1.1, (2)(0.1)=0.2, (1)(0.1)=0.1
        np.testing.assert_array_equal(order, [0, 1, 2, 3])

    def test_disagreement_ignores_stage_column(self):
        batch = self.make_batch(stage=[0.0, 9.0, 5.0], state=[0.1, 0.9, 0.5])
        cfg = SelectionConfig(mode="disagreement", queries_per_session=2)
        np.testing.assert_array_equal(select_queries(batch, cfg), [1, 2])

    def test_disagreement_tie_breaks_to_lower_index(self):
        batch = self.make_batch(stage=[0.0, 0.0, 0.0], state=[0.5, 0.5, 0.5])
        cfg = SelectionConfig(mode="disagreement", queries_per_session=2)
        np.testing.assert_array_equal(select_queries(batch, cfg), [0, 1])

    def test_uniform_needs_rng_and_subsamples(self):
        batch = self.make_batch(stage=np.zeros(10), state=np.zeros(10))
        cfg = SelectionConfig(mode="uniform", queries_per_session=4)
        with pytest.raises(ValueError, match="rng"):
            select_queries(batch, cfg)
        chosen = select_queries(batch, cfg, make_rng(0))
        assert len(chosen) == 4 and len(set(chosen.tolist())) == 4

    def test_request_capped_at_batch_size(self):
        batch = self.make_batch(stage=[0.0, 1.0], state=[1.0, 0.0])
        cfg = SelectionConfig(mode="stage_aligned", queries_per_session=10)
        assert len(select_queries(batch, cfg)) == 2

    def test_empty_batch_raises(self):
        batch = CandidateBatch(pairs=[], stage_diff=np.array([]),
                               state_diff=np.array([]))
        with pytest.raises(SelectionError):
            select_queries(batch, SelectionConfig())

    def test_batch_column_shape_validation(self):
        with pytest.raises(ValueError):
            CandidateBatch(pairs=[(seg(0, 0), seg(1, 1))],
                           stage_diff=np.array([1.0, 2.0]),
                           state_diff=np.array([0.5]))

    def test_config_validation(self):
        with pytest.raises(ValueError, match="mode"):
            SelectionConfig(mode="psychic")
        with pytest.raises(ValueError):
            SelectionConfig(queries_per_session=0)
        with pytest.raises(ValueError):
            SelectionConfig(candidate_factor=0)


class TestIntervalOverlap:
    def test_identical_intervals_have_full_overlap(self):
        assert interval_span_ratio((2, 4), (2, 4)) == pytest.approx(1.0)

    def test_partial_overlap(self):
        assert interval_span_ratio((2, 4), (3, 6)) == pytest.approx(0.25)
        # symmetric in the argument order
        assert interval_span_ratio((3, 6), (2, 4)) == pytest.approx(0.25)

    def test_disjoint_intervals_go_negative(self):
        assert interval_span_ratio((1, 2), (5, 7)) == pytest.approx(-0.5)

    def test_point_against_point(self):
        assert interval_span_ratio((3, 3), (3, 3)) == pytest.approx(1.0)

    def test_rejects_reversed_interval(self):
        with pytest.raises(ValueError):
            interval_span_ratio((4, 2), (0, 1))

    def test_stage_difference_clamps(self):
        assert interval_stage_difference((2, 4), (3, 6)) == pytest.approx(0.75)
        assert interval_stage_difference((1, 2), (5, 7)) == pytest.approx(1.0)
        assert interval_stage_difference((2, 4), (2, 4)) == pytest.approx(0.0)


class TestStageQuasimetric:
    def test_build_satisfies_its_own_audit(self):
        q = build_stage_quasimetric(4, 3, intra=0.1, cross_lo=1.0, cross_hi=3.0,
                                    rng=make_rng(0))
        q.validate()
        assert q.n_states == 12

    def test_validate_catches_tampering(self):
        q = build_stage_quasimetric(4, 2, intra=0.1, cross_lo=1.0, cross_hi=3.0,
                                    rng=make_rng(1))
        q.values[0, 1] = 5.0  # same stage, above intra
        with pytest.raises(ValueError, match="compactness"):
            q.validate()

    def test_triangle_violation_detected(self):
        values = np.array([
            [0.0, 1.0, 9.0],
            [1.0, 0.0, 1.0],
            [9.0, 1.0, 0.0],
        ])
        q = StageQuasimetric(values=values, stage_of=np.array([0, 1, 2]),
                             intra=0.0, cross_lo=1.0, cross_hi=9.0)
        with pytest.raises(ValueError, match="triangle"):
            q.validate()

    def test_build_parameter_validation(self):
        with pytest.raises(ValueError):
            build_stage_quasimetric(1, 3, 0.1, 1.0, 2.0, make_rng(0))
        with pytest.raises(ValueError):
            build_stage_quasimetric(4, 3, 1.5, 1.0, 2.0, make_rng(0))


class TestAlignmentCaseAudit:
    def test_bounds_increase_strictly(self):
        b = case_bounds(intra=0.1, cross_lo=1.0, cross_hi=3.0)
        lows = [b[c][0] for c in CASE_ORDER]
        highs = [b[c][1] for c in CASE_ORDER]
        assert lows == sorted(lows) and len(set(lows)) == 4
        assert highs == sorted(highs) and len(set(highs)) == 4

    def test_case_bounds_closed_forms(self):
        b = case_bounds(intra=0.2, cross_lo=1.0, cross_hi=2.0)
        assert b["A"] == (0.0, 0.2)
        assert b["B"] == (0.5, pytest.approx(1.1))
        assert b["C"] == (0.75, pytest.approx(1.55))
        assert b["D"] == (1.0, 2.0)

    def test_audit_passes_on_built_instance(self):
        q = build_stage_quasimetric(5, 3, intra=0.1, cross_lo=1.0, cross_hi=1.8,
                                    rng=make_rng(2))
        report = alignment_case_check(q, make_rng(3), samples_per_case=150)
        assert report.all_inside
        assert report.strictly_increasing
        assert set(report.observed) == set(CASE_ORDER)
        d = report.to_json_dict()
        assert d["all_inside"] is True

    def test_audit_needs_four_stages(self):
        q = build_stage_quasimetric(3, 3, intra=0.1, cross_lo=1.0, cross_hi=1.8,
                                    rng=make_rng(4))
        with pytest.raises(ValueError, match="4 stages"):
            alignment_case_check(q, make_rng(5))
