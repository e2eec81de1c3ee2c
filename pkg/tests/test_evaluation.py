from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arena.config import EvaluatorSpec
from arena.evaluation import (
    EvalContext,
    FormatError,
    GroundTruth,
    InstanceLog,
    InstanceRow,
    RankingSubmission,
    average_precision,
    evaluate,
    evaluate_instance_log,
    evaluate_map,
    load_ground_truth_csv,
    parse_instance_log_csv,
    parse_ranking_csv,
    records_equal_ignoring_time,
)
from oracles import brute_force_ap, brute_force_instance_score, brute_force_map


def map_spec(k=10, universe="all_interactions", version=1, **extra):
    params = {"k": k, "relevance_universe": universe}
    params.update(extra)
    return EvaluatorSpec(version=version, metric="map_at_k", parameters=params)


def log_spec(senses, version=1):
    return EvaluatorSpec(
        version=version,
        metric="instance_log",
        parameters={"objective_sense": senses},
    )


def truth(relevant, test_items, extra_users=()):
    users = set(relevant) | set(extra_users)
    return GroundTruth(
        relevant={u: frozenset(items) for u, items in relevant.items()},
        test_item_universe=frozenset(test_items),
        known_users=frozenset(users),
    )


class TestAveragePrecision:
    def test_perfect_single_item(self):
        assert average_precision(["a"], {"a"}, k=10) == 1.0

    def test_hit_at_rank_two(self):
        # hit at rank 2 gives P(2) = 1/2; normalizer min(10, 1) = 1
        assert average_precision(["b", "a"], {"a"}, k=10) == 0.5

    def test_two_hits_of_three(self):
        # (1/1 + 2/3) / 2 = 5/6, frozen from the brute-force oracle
        expected = brute_force_ap(["a", "b", "c"], {"a", "c"}, 3)
        assert expected == pytest.approx(5 / 6, abs=1e-15)
        assert average_precision(["a", "b", "c"], {"a", "c"}, k=3) == pytest.approx(
            expected, abs=1e-12
        )

    def test_duplicates_rejected(self):
        with pytest.raises(FormatError):
            average_precision(["a", "a"], {"a"}, k=5)

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            average_precision(["a"], set(), k=5)

    @given(
        ranked=st.lists(st.integers(0, 49), unique=True, max_size=50),
        relevant=st.sets(st.integers(0, 49), min_size=1, max_size=50),
        k=st.sampled_from([1, 3, 10]),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_oracle_and_bounds(self, ranked, relevant, k):
        got = average_precision(ranked, relevant, k)
        assert 0.0 <= got <= 1.0
        assert got == pytest.approx(brute_force_ap(ranked, relevant, k), abs=1e-12)

    @given(
        relevant=st.sets(st.integers(0, 20), min_size=1, max_size=10),
        tail=st.lists(st.integers(100, 120), unique=True, max_size=8),
        k=st.sampled_from([3, 10]),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=150, deadline=None)
    def test_permuting_irrelevant_tail_is_noop(self, relevant, tail, k, seed):
        head = sorted(relevant)
        base = average_precision(head + tail, relevant, k)
        rng = random.Random(seed)
        shuffled = tail[:]
        rng.shuffle(shuffled)
        assert average_precision(head + shuffled, relevant, k) == base

    @given(
        ranked=st.lists(st.integers(0, 30), unique=True, min_size=1, max_size=20),
        relevant=st.sets(st.integers(0, 30), min_size=1, max_size=10),
        k=st.sampled_from([1, 3, 10]),
    )
    @settings(max_examples=200, deadline=None)
    def test_relevant_item_at_rank_one_never_decreases(self, ranked, relevant, k):
        fresh = 999  # relevant, not yet ranked
        relevant = set(relevant) | {fresh}
        before = average_precision(ranked, relevant, k)
        after = average_precision([fresh] + ranked, relevant, k)
        assert after >= before - 1e-12


class TestEvaluateMap:
    def test_mean_of_two_users(self):
        gt = truth({"u1": {"a"}, "u2": {"a"}}, test_items={"a"})
        sub = RankingSubmission({"u1": ("a",), "u2": ("b", "a")})
        record = evaluate_map(sub, gt, map_spec())
        assert record.primary_score == pytest.approx(0.75)

    def test_train_only_user_excluded_under_test_only(self):
        # u1's only positive never occurs in test interactions: with the
        # twist universe u1 is unevaluable and drops out of the mean
        gt = truth({"u1": {"t"}, "u2": {"x"}}, test_items={"x"})
        sub = RankingSubmission({"u1": ("t",), "u2": ("x",)})
        v1 = evaluate_map(sub, gt, map_spec(universe="all_interactions"))
        v2 = evaluate_map(sub, gt, map_spec(universe="test_only", version=2))
        assert v1.primary_score == pytest.approx(1.0)
        assert v2.primary_score == pytest.approx(1.0)
        assert v2.aux["evaluated_users"] == 1

        oracle = brute_force_map(
            {"u1": ("t",), "u2": ("x",)},
            [("u1", "t", 1, "train"), ("u2", "x", 1, "test")],
            10,
            "test_only",
        )
        assert v2.primary_score == pytest.approx(oracle, abs=1e-12)

    def test_omitted_user_scores_zero(self):
        gt = truth({"u1": {"a"}, "u2": {"b"}, "u3": {"c"}}, test_items=set())
        sub = RankingSubmission({"u1": ("a",), "u2": ("b",)})
        record = evaluate_map(sub, gt, map_spec())
        assert record.primary_score == pytest.approx(2 / 3)

    def test_unknown_user_rejects_submission(self):
        gt = truth({"u1": {"a"}}, test_items=set())
        sub = RankingSubmission({"ghost": ("a",)})
        with pytest.raises(FormatError):
            evaluate_map(sub, gt, map_spec())

    def test_list_filter_variant(self):
        # alternative twist reading: drop non-test items from the ranked
        # list before scoring instead of shrinking the relevance universe
        gt = truth({"u1": {"x"}}, test_items={"x"})
        sub = RankingSubmission({"u1": ("t", "x")})
        plain = evaluate_map(sub, gt, map_spec(universe="test_only", version=2))
        filtered = evaluate_map(
            sub, gt, map_spec(universe="test_only", version=2, list_filter=True)
        )
        assert plain.primary_score == pytest.approx(0.5)
        assert filtered.primary_score == pytest.approx(1.0)

    def test_no_evaluable_users_scores_zero(self):
        gt = truth({"u1": {"t"}}, test_items=set())
        sub = RankingSubmission({})
        record = evaluate_map(sub, gt, map_spec(universe="test_only", version=2))
        assert record.primary_score == 0.0


class TestEvaluateInstanceLog:
    SENSES = {"i1": "min", "i2": "min", "i3": "min"}

    def test_nothing_solved(self):
        log = InstanceLog(
            rows=tuple(
                InstanceRow(instance=name, status="unsolved", objective=None, runtime_s=1.0)
                for name in self.SENSES
            )
        )
        record = evaluate_instance_log(log, {}, log_spec(self.SENSES))
        assert record.primary_score == 0.0
        assert record.aux["solved_count"] == 0

    def test_quality_ratio_minimization(self):
        log = InstanceLog(
            rows=(InstanceRow(instance="i1", status="solved", objective=50.0, runtime_s=2.0),)
        )
        record = evaluate_instance_log(log, {"i1": 40.0}, log_spec(self.SENSES))
        assert record.primary_score == pytest.approx(1.8)
        assert record.aux["mean_quality"] == pytest.approx(0.8)

    def test_quality_ratio_maximization(self):
        senses = {"i1": "max"}
        log = InstanceLog(
            rows=(InstanceRow(instance="i1", status="solved", objective=40.0, runtime_s=0.0),)
        )
        record = evaluate_instance_log(log, {"i1": 50.0}, log_spec(senses))
        assert record.aux["mean_quality"] == pytest.approx(0.8)

    def test_three_team_best_known_fixture(self):
        # recompute best_known across a 3-team fixture, oracle-style
        team_rows = {
            "A": [("i1", "solved", 50.0, 1.0), ("i2", "solved", 90.0, 1.0)],
            "B": [("i1", "solved", 40.0, 1.0), ("i2", "unsolved", None, 5.0)],
            "C": [("i1", "unsolved", None, 3.0), ("i2", "solved", 100.0, 2.0)],
        }
        best_known = {"i1": 40.0, "i2": 90.0}
        spec = log_spec(self.SENSES)
        for team, rows in team_rows.items():
            log = InstanceLog(
                rows=tuple(
                    InstanceRow(instance=i, status=s, objective=o, runtime_s=r)
                    for i, s, o, r in rows
                )
            )
            got = evaluate_instance_log(log, best_known, spec)
            want = brute_force_instance_score(rows, best_known, self.SENSES)
            assert got.primary_score == pytest.approx(want, abs=1e-12), team

    def test_solved_count_dominates_quality(self):
        spec = log_spec(self.SENSES)
        # A solves all three badly, B solves two at the known best
        a_log = InstanceLog(
            rows=tuple(
                InstanceRow(instance=name, status="solved", objective=1e6, runtime_s=1.0)
                for name in self.SENSES
            )
        )
        b_log = InstanceLog(
            rows=(
                InstanceRow(instance="i1", status="solved", objective=10.0, runtime_s=1.0),
                InstanceRow(instance="i2", status="solved", objective=10.0, runtime_s=1.0),
                InstanceRow(instance="i3", status="unsolved", objective=None, runtime_s=1.0),
            )
        )
        best = {"i1": 10.0, "i2": 10.0, "i3": 10.0}
        a = evaluate_instance_log(a_log, best, spec)
        b = evaluate_instance_log(b_log, best, spec)
        assert a.primary_score > b.primary_score

    @given(data=st.data())
    @settings(max_examples=200, deadline=None)
    def test_solving_one_more_always_raises_score(self, data):
        names = [f"i{n}" for n in range(5)]
        senses = {name: "min" for name in names}
        solved = data.draw(st.sets(st.sampled_from(names), max_size=4))
        unsolved = [name for name in names if name not in solved]
        extra = data.draw(st.sampled_from(unsolved))
        objectives = {
            name: data.draw(st.floats(1.0, 1e6, allow_nan=False)) for name in names
        }
        best = {name: 1.0 for name in names}

        def build(solved_set):
            return InstanceLog(
                rows=tuple(
                    InstanceRow(
                        instance=name,
                        status="solved" if name in solved_set else "unsolved",
                        objective=objectives[name] if name in solved_set else None,
                        runtime_s=1.0,
                    )
                    for name in names
                )
            )

        spec = log_spec(senses)
        before = evaluate_instance_log(build(solved), best, spec).primary_score
        after = evaluate_instance_log(build(solved | {extra}), best, spec).primary_score
        assert after > before

    def test_unknown_instance_rejected(self):
        log = InstanceLog(
            rows=(InstanceRow(instance="nope", status="solved", objective=1.0, runtime_s=0.0),)
        )
        with pytest.raises(FormatError):
            evaluate_instance_log(log, {}, log_spec(self.SENSES))


class TestDispatch:
    GT_CSV = b"user_id,item_id,label,split\nu1,a,1,test\nu1,b,0,test\n"

    def test_ranking_payload_dispatches(self):
        context = EvalContext(ground_truth=load_ground_truth_csv(self.GT_CSV))
        payload = b"user_id,item_id,rank\nu1,a,1\n"
        record = evaluate(payload, map_spec(), context)
        assert record.primary_score == 1.0
        assert not record.rejected

    def test_metric_mismatch_is_format_error(self):
        context = EvalContext(ground_truth=load_ground_truth_csv(self.GT_CSV))
        payload = b"instance,status,objective,runtime_s\ni1,solved,1.0,0.5\n"
        record = evaluate(payload, map_spec(), context)
        assert record.rejected
        assert "error" in record.aux

    def test_repeat_evaluation_identical(self):
        context = EvalContext(ground_truth=load_ground_truth_csv(self.GT_CSV))
        payload = b"user_id,item_id,rank\nu1,a,1\nu1,b,2\n"
        first = evaluate(payload, map_spec(), context)
        second = evaluate(payload, map_spec(), context)
        assert records_equal_ignoring_time(first, second)
        assert first.primary_score == second.primary_score  # bit for bit


class TestWireFormats:
    def test_ranking_round_trip(self):
        payload = b"user_id,item_id,rank\nu1,b,2\nu1,a,1\nu2,c,1\n"
        sub = parse_ranking_csv(payload, k=10)
        assert sub.rankings == {"u1": ("a", "b"), "u2": ("c",)}

    def test_ranking_rank_bounds(self):
        with pytest.raises(FormatError):
            parse_ranking_csv(b"user_id,item_id,rank\nu1,a,11\n", k=10)
        with pytest.raises(FormatError):
            parse_ranking_csv(b"user_id,item_id,rank\nu1,a,0\n", k=10)

    def test_ranking_duplicate_item(self):
        payload = b"user_id,item_id,rank\nu1,a,1\nu1,a,2\n"
        with pytest.raises(FormatError):
            parse_ranking_csv(payload, k=10)

    def test_instance_log_objective_rules(self):
        ok = parse_instance_log_csv(
            b"instance,status,objective,runtime_s\ni1,solved,12.5,3.0\ni2,unsolved,,1.0\n"
        )
        assert ok.rows[0].objective == 12.5
        assert ok.rows[1].objective is None
        with pytest.raises(FormatError):
            parse_instance_log_csv(b"instance,status,objective,runtime_s\ni1,solved,,3.0\n")
        with pytest.raises(FormatError):
            parse_instance_log_csv(b"instance,status,objective,runtime_s\ni1,unsolved,5.0,3.0\n")
        with pytest.raises(FormatError):
            parse_instance_log_csv(b"instance,status,objective,runtime_s\ni1,solved,5.0,-1.0\n")

    def test_ground_truth_universe(self):
        gt = load_ground_truth_csv(
            b"user_id,item_id,label,split\n"
            b"u1,a,1,train\n"
            b"u1,b,1,test\n"
            b"u2,a,0,test\n"
        )
        assert gt.test_item_universe == {"a", "b"}
        assert gt.relevant["u1"] == {"a", "b"}
        assert gt.known_users == {"u1", "u2"}
        assert gt.effective_relevant("u1", "test_only") == {"a", "b"}

    def test_bad_header(self):
        with pytest.raises(FormatError):
            parse_ranking_csv(b"user,item,rank\nu1,a,1\n", k=10)


def random_map_fixture(rng):
    users = [f"u{n}" for n in range(rng.randint(1, 20))]
    items = [f"i{n}" for n in range(rng.randint(1, 50))]
    interactions = []
    for user in users:
        for item in rng.sample(items, rng.randint(1, min(10, len(items)))):
            interactions.append(
                (user, item, rng.randint(0, 1), rng.choice(["train", "test"]))
            )
    rankings = {}
    for user in users:
        if rng.random() < 0.15:
            continue  # leave some users out of the submission
        size = rng.randint(1, min(10, len(items)))
        rankings[user] = tuple(rng.sample(items, size))
    return users, interactions, rankings


def test_map_matches_oracle_on_random_fixtures():
    rng = random.Random(20260301)
    for trial in range(300):
        users, interactions, rankings = random_map_fixture(rng)
        k = rng.choice([1, 3, 10])
        universe = rng.choice(["all_interactions", "test_only"])

        relevant = {}
        test_items = set()
        for user, item, label, split in interactions:
            if split == "test":
                test_items.add(item)
            if label == 1:
                relevant.setdefault(user, set()).add(item)
        gt = GroundTruth(
            relevant={u: frozenset(v) for u, v in relevant.items()},
            test_item_universe=frozenset(test_items),
            known_users=frozenset(users),
        )
        got = evaluate_map(
            RankingSubmission(rankings), gt, map_spec(k=k, universe=universe)
        ).primary_score
        want = brute_force_map(
            rankings, [(u, i, l, s) for u, i, l, s in interactions], k, universe
        )
        assert got == pytest.approx(want, abs=1e-9), f"trial {trial}"
        assert 0.0 <= got <= 1.0
        assert math.isfinite(got)
