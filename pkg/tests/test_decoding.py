import json

import numpy as np
import pytest

from tdt.decoding import (
    DecodePolicy,
    DecodeResult,
    FunctionJoiner,
    TabularJoiner,
    batched_greedy_tdt,
    emission_stats,
    greedy_rnnt,
    greedy_tdt,
)
from tdt.lattice import DurationSet, JointProblem

from conftest import random_problem

V = 4
BLANK = V


def peaked(token, duration_index=0, n_durations=3):
    """Logit vector whose token and duration argmaxes are the given indices."""
    x = np.zeros(V + 1 + n_durations)
    x[token] = 5.0
    x[V + 1 + duration_index] = 5.0
    return x


def constant_joiner(token, duration_index=0, n_durations=3, calls=None):
    def fn(t, ctx):
        if calls is not None:
            calls.append(t)
        return peaked(token, duration_index, n_durations)

    return FunctionJoiner(fn, V)


class TestGreedyRnnt:
    def test_all_blank(self):
        res = greedy_rnnt(constant_joiner(BLANK), 6)
        assert res.hypothesis == []
        assert res.steps == 6
        assert res.blank_count == 6

    def test_single_token_at_first_frame(self):
        T, y = 5, 2
        # one (unused) duration column
        logits = np.zeros((T, 2, V + 2))
        logits[:, :, BLANK] = 1.0
        logits[0, 0, y] = 3.0
        res = greedy_rnnt(TabularJoiner(JointProblem(logits, [y], V, DurationSet([1]))), T)
        assert res.hypothesis == [y]
        assert res.steps == T + 1
        assert res.token_frames == [0]

    def test_guard_emits_max_symbols_per_frame(self):
        T = 3
        res = greedy_rnnt(constant_joiner(1), T, DecodePolicy(10))
        assert res.hypothesis == [1] * 30
        assert res.token_frames == [t for t in range(T) for _ in range(10)]
        assert res.forced_advances == T
        assert res.steps == res.blank_count + res.nonblank_count

    def test_counts(self):
        # tokens at frames 1 and 3 of a 6-frame input
        def fn(t, ctx):
            if (t, len(ctx)) in {(1, 0), (3, 1)}:
                return peaked(len(ctx) + 1)
            return peaked(BLANK)

        res = greedy_rnnt(FunctionJoiner(fn, V), 6)
        assert res.hypothesis == [1, 2]
        assert (res.blank_count, res.nonblank_count) == (6, 2)
        stats = emission_stats([res])
        assert stats.histogram == {0: 2, 1: 6}

    def test_ties_go_to_lowest_index(self):
        res = greedy_rnnt(FunctionJoiner(lambda t, ctx: np.zeros(V + 1), V), 2, DecodePolicy(1))
        assert res.hypothesis == [0, 0]


class TestGreedyTdt:
    D = DurationSet([0, 1, 2])

    def test_blank_with_duration_two(self):
        res = greedy_tdt(constant_joiner(BLANK, 2), 6, self.D)
        assert res.hypothesis == []
        assert res.steps == 3
        assert res.emitted_durations == [2, 2, 2]

    def test_token_and_skip_in_one_step(self):
        def fn(t, ctx):
            return peaked(3, 2) if t == 0 else peaked(BLANK, 2)

        res = greedy_tdt(FunctionJoiner(fn, V), 6, self.D)
        assert res.hypothesis == [3]
        assert res.token_frames == [0]
        assert res.steps == 3
        assert res.emitted_durations == [2, 2, 2]

    def test_duration_zero_stays_on_frame(self):
        def fn(t, ctx):
            return peaked(1, 0) if len(ctx) < 2 else peaked(BLANK, 1)

        res = greedy_tdt(FunctionJoiner(fn, V), 3, self.D)
        assert res.hypothesis == [1, 1]
        assert res.token_frames == [0, 0]
        assert res.emitted_durations == [0, 0, 1, 1, 1]

    def test_overshoot_terminates(self):
        res = greedy_tdt(constant_joiner(BLANK, 2), 5, self.D)
        assert res.steps == 3
        assert sum(res.emitted_durations) >= 5

    @pytest.mark.parametrize("token", [1, BLANK])
    def test_guard_on_adversarial_joiner(self, token):
        T, cap = 7, 4
        res = greedy_tdt(constant_joiner(token, 0), T, self.D, DecodePolicy(cap))
        assert res.steps <= cap * T
        assert res.steps == cap * T
        assert res.forced_advances == T
        assert res.steps == len(res.emitted_durations)
        assert sum(res.emitted_durations) == T

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            DecodePolicy(0)

    def test_non_blank_count_independent_of_durations(self):
        target, frames, T = [1, 2, 3], [2, 7, 8], 12

        def make(dset):
            k = dset.max

            def fn(t, ctx):
                n = len(ctx)
                if n < len(target) and t >= frames[n]:
                    return peaked(target[n], 0, len(dset))
                gap = (frames[n] - t) if n < len(target) else k
                return peaked(BLANK, dset.index(min(max(gap, 1), k)), len(dset))

            return FunctionJoiner(fn, V)

        results = [greedy_tdt(make(DurationSet(range(k + 1))), T, DurationSet(range(k + 1))) for k in (1, 2, 4)]
        assert all(r.hypothesis == target for r in results)
        assert {r.nonblank_count for r in results} == {3}
        # longer durations mean fewer evaluations
        assert results[0].steps > results[1].steps > results[2].steps


class TestBatched:
    D = DurationSet([0, 1, 2, 3, 4, 5, 6])

    def test_min_duration_advance(self):
        calls = [[] for _ in range(4)]
        joiners = [constant_joiner(BLANK, d, len(self.D), calls[i]) for i, d in enumerate([3, 4, 3, 6])]
        results = batched_greedy_tdt(joiners, [12] * 4, self.D)
        assert [r.emitted_durations[0] for r in results] == [3, 3, 3, 3]
        assert all(c == [0, 3, 6, 9] for c in calls)

    def test_finished_utterances_leave_the_minimum(self):
        calls_a, calls_b = [], []
        a = constant_joiner(BLANK, 1, len(self.D), calls_a)
        b = constant_joiner(BLANK, 4, len(self.D), calls_b)
        ra, rb = batched_greedy_tdt([a, b], [2, 12], self.D)
        assert calls_a == [0, 1]
        assert calls_b == [0, 1, 2, 6, 10]
        assert rb.emitted_durations == [1, 1, 4, 4, 4]

    def test_batch_of_one_is_greedy(self, rng):
        for _ in range(20):
            p = random_problem(rng, T=8, U=3)
            j = TabularJoiner(p)
            (batched,) = batched_greedy_tdt([j], [p.T], p.durations)
            assert batched == greedy_tdt(j, p.T, p.durations)

    def test_identical_joiners(self, rng):
        p = random_problem(rng, T=8, U=3, durations=[0, 1, 2])
        j = TabularJoiner(p)
        single = greedy_tdt(j, p.T, p.durations)
        for r in batched_greedy_tdt([j, j, j], [p.T] * 3, p.durations):
            assert r == single

    def test_guard(self):
        joiners = [constant_joiner(1, 0, len(self.D)), constant_joiner(BLANK, 3, len(self.D))]
        results = batched_greedy_tdt(joiners, [5, 5], self.D, DecodePolicy(3))
        assert all(r.steps <= 3 * 5 for r in results)

    def test_validation(self):
        with pytest.raises(ValueError):
            batched_greedy_tdt([], [], self.D)
        with pytest.raises(ValueError):
            batched_greedy_tdt([constant_joiner(BLANK)], [1, 2], self.D)


class TestStats:
    def test_all_blank_histogram(self):
        res = greedy_tdt(constant_joiner(BLANK, 2), 6, DurationSet([0, 1, 2]))
        stats = emission_stats([res])
        assert stats.histogram == {2: 3}
        assert (stats.blank_count, stats.nonblank_count) == (3, 0)
        assert stats.mean_duration == 2.0
        assert stats.to_csv() == "duration,count\n2,3\n"

    def test_pooling(self):
        a = DecodeResult(emitted_durations=[1, 2], blank_count=1, nonblank_count=1)
        b = DecodeResult(emitted_durations=[2], blank_count=1)
        stats = emission_stats([a, b])
        assert stats.histogram == {1: 1, 2: 2}
        assert stats.total == 3
        assert stats.to_dict()["histogram"] == {"1": 1, "2": 2}

    def test_empty(self):
        assert emission_stats([]).mean_duration == 0.0

    def test_json(self):
        res = greedy_tdt(constant_joiner(BLANK, 2), 4, DurationSet([0, 1, 2]))
        doc = json.loads(res.to_json())
        assert doc == {"hypothesis": [], "steps": 2, "durations": {"2": 2}, "blank_count": 2, "nonblank_count": 0}


def test_tabular_joiner_clamps_context(rng):
    p = random_problem(rng, T=3, U=1)
    j = TabularJoiner(p)
    assert np.array_equal(j(2, (0, 1, 2)), p.logits[2, 1])
    with pytest.raises(IndexError):
        j(3, ())
