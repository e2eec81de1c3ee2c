"""Metric engines turning raw submission payloads into score records.

Two metric families are supported:

* ``map_at_k``: mean average precision over users, truncated at rank k.
  AP for one user is ``(1 / min(k, |relevant|)) * sum_{r=1..min(k, len)}
  [ranked[r] in relevant] * hits_through(r) / r``. The relevance universe
  is switchable: ``all_interactions`` credits every recorded positive,
  ``test_only`` intersects positives with the test item universe.
* ``instance_log``: per-benchmark-instance result rows (status, objective,
  runtime). ``primary_score = solved_count + mean(quality)`` where quality
  of a solved instance is the ratio of the best known objective to the
  submitted one (inverted for maximization), clamped into (0, 1]. Solved
  count therefore dominates: any extra solve beats any quality gap.

Scoring is deterministic: identical payload bytes, spec and ground truth
always yield the same primary_score, bit for bit. AP term sums run in
descending-rank order with compensated (Kahan) summation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable, Mapping, Optional, Sequence

from .config import METRIC_INSTANCE_LOG, METRIC_MAP_AT_K, EvaluatorSpec

VERIFICATION_PENDING = "pending"
VERIFICATION_VERIFIED = "verified"
VERIFICATION_INVALIDATED = "invalidated"

STATUS_SOLVED = "solved"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNSOLVED = "unsolved"

RANKING_HEADER = ["user_id", "item_id", "rank"]
INSTANCE_LOG_HEADER = ["instance", "status", "objective", "runtime_s"]
GROUND_TRUTH_HEADER = ["user_id", "item_id", "label", "split"]

# floor of the quality clamp; keeps quality strictly positive so that
# solved-count dominance survives floating point
_QUALITY_FLOOR = 1e-12


class FormatError(ValueError):
    """Submission payload violates the documented wire format."""


@dataclass(frozen=True)
class RankingSubmission:
    """Per-user ranked item lists, already validated: no duplicate items
    within a user's list, each user present once."""

    rankings: Mapping[str, tuple[str, ...]]


@dataclass(frozen=True)
class GroundTruth:
    relevant: Mapping[str, frozenset[str]]  # user -> positive items (any split)
    test_item_universe: frozenset[str]  # items occurring in test interactions
    known_users: frozenset[str]  # every user with any recorded interaction

    def effective_relevant(self, user_id: str, universe: str) -> frozenset[str]:
        positives = self.relevant.get(user_id, frozenset())
        if universe == "test_only":
            return positives & self.test_item_universe
        return positives


@dataclass(frozen=True)
class InstanceRow:
    instance: str
    status: str
    objective: Optional[float]
    runtime_s: float


@dataclass(frozen=True)
class InstanceLog:
    rows: tuple[InstanceRow, ...]


@dataclass(frozen=True)
class ScoreRecord:
    submission_id: int
    evaluator_version: int
    primary_score: Optional[float]  # None on a format-error record
    aux: dict = field(default_factory=dict)
    verification: str = VERIFICATION_PENDING
    evaluated_at: Optional[datetime] = None

    @property
    def rejected(self) -> bool:
        return self.primary_score is None

    def with_verification(self, status: str) -> "ScoreRecord":
        return replace(self, verification=status)


def _kahan_sum(values: Iterable[float]) -> float:
    total = 0.0
    compensation = 0.0
    for value in values:
        y = value - compensation
        t = total + y
        compensation = (t - total) - y
        total = t
    return total


def average_precision(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    """AP@k for one user's ranked list against a set of relevant items.

    Normalizer is min(k, |relevant|), the standard MAP@k convention.
    Raises FormatError on duplicate items; ValueError on an empty relevant
    set (callers must exclude such users) or k < 1.
    """
    relevant_set = frozenset(relevant)
    if not relevant_set:
        raise ValueError("relevant set must be non-empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(set(ranked)) != len(ranked):
        raise FormatError("ranked list contains duplicate items")

    depth = min(k, len(ranked))
    hits = 0
    terms = []
    for position in range(depth):
        if ranked[position] in relevant_set:
            hits += 1
            terms.append(hits / (position + 1))
    numerator = _kahan_sum(reversed(terms))
    return numerator / min(k, len(relevant_set))


def evaluate_map(
    submission: RankingSubmission,
    truth: GroundTruth,
    spec: EvaluatorSpec,
    *,
    submission_id: int = 0,
    evaluated_at: Optional[datetime] = None,
) -> ScoreRecord:
    """MAP over every user with a non-empty effective relevant set.

    Users absent from the submission contribute AP = 0; users whose
    effective relevant set is empty (possible after a test_only twist)
    are excluded from the mean rather than scored 0. A submission that
    names a user unknown to the ground truth is rejected whole.
    """
    if spec.metric != METRIC_MAP_AT_K:
        raise ValueError(f"evaluate_map called with metric {spec.metric}")

    for user_id in submission.rankings:
        if user_id not in truth.known_users:
            raise FormatError(f"submission references unknown user {user_id!r}")

    universe = spec.relevance_universe
    evaluated = sorted(
        user_id
        for user_id in truth.known_users
        if truth.effective_relevant(user_id, universe)
    )

    per_user: dict[str, float] = {}
    for user_id in evaluated:
        ranked = submission.rankings.get(user_id, ())
        if spec.list_filter:
            ranked = tuple(item for item in ranked if item in truth.test_item_universe)
        if not ranked:
            per_user[user_id] = 0.0
            continue
        per_user[user_id] = average_precision(
            ranked, truth.effective_relevant(user_id, universe), spec.k
        )

    if evaluated:
        score = _kahan_sum(per_user[u] for u in evaluated) / len(evaluated)
    else:
        score = 0.0

    digest = hashlib.sha256()
    for user_id in evaluated:
        digest.update(f"{user_id}:{per_user[user_id]!r}\n".encode("utf-8"))

    return ScoreRecord(
        submission_id=submission_id,
        evaluator_version=spec.version,
        primary_score=score,
        aux={
            "evaluated_users": len(evaluated),
            "ap_vector_digest": digest.hexdigest(),
        },
        verification=_initial_verification(spec),
        evaluated_at=evaluated_at,
    )


def evaluate_instance_log(
    log: InstanceLog,
    best_known: Mapping[str, float],
    spec: EvaluatorSpec,
    *,
    submission_id: int = 0,
    evaluated_at: Optional[datetime] = None,
) -> ScoreRecord:
    """Score an instance-result log against the benchmark manifest.

    best_known maps instance name to the best objective seen across all
    teams; quality is relative to it, so scores can move when another
    team improves. An instance absent from best_known scores quality 1.
    """
    if spec.metric != METRIC_INSTANCE_LOG:
        raise ValueError(f"evaluate_instance_log called with metric {spec.metric}")

    senses = spec.objective_sense
    for row in log.rows:
        if row.instance not in senses:
            raise FormatError(f"unknown benchmark instance {row.instance!r}")

    qualities = []
    solved_count = 0
    for row in sorted(log.rows, key=lambda r: r.instance):
        if row.status != STATUS_SOLVED:
            continue
        solved_count += 1
        qualities.append(
            _quality(row.objective, best_known.get(row.instance), senses[row.instance])
        )

    mean_quality = _kahan_sum(qualities) / len(qualities) if qualities else 0.0
    total_runtime = _kahan_sum(row.runtime_s for row in log.rows)

    return ScoreRecord(
        submission_id=submission_id,
        evaluator_version=spec.version,
        primary_score=solved_count + mean_quality,
        aux={
            "solved_count": solved_count,
            "total_runtime_s": total_runtime,
            "mean_quality": mean_quality,
        },
        verification=_initial_verification(spec),
        evaluated_at=evaluated_at,
    )


def _quality(objective: Optional[float], best: Optional[float], sense: str) -> float:
    """Relative quality of one solved instance, clamped into (0, 1].

    Ratio encoding assumes positive objectives (true of the supported
    benchmark domains); degenerate ratios clamp to the floor instead of
    poisoning the score.
    """
    if objective is None:
        raise FormatError("solved row without an objective")
    if best is None or objective == best:
        return 1.0
    if sense == "min":
        ratio = best / objective if objective != 0 else math.inf
    else:
        ratio = objective / best if best != 0 else math.inf
    if not math.isfinite(ratio) or ratio <= 0.0:
        return _QUALITY_FLOOR
    return min(max(ratio, _QUALITY_FLOOR), 1.0)


def _initial_verification(spec: EvaluatorSpec) -> str:
    return VERIFICATION_VERIFIED if spec.verification == "none" else VERIFICATION_PENDING


@dataclass(frozen=True)
class EvalContext:
    """Immutable inputs an evaluation may need beyond the payload itself."""

    ground_truth: Optional[GroundTruth] = None
    best_known: Mapping[str, float] = field(default_factory=dict)


def evaluate(
    payload: bytes,
    spec: EvaluatorSpec,
    context: EvalContext,
    *,
    submission_id: int = 0,
    evaluated_at: Optional[datetime] = None,
) -> ScoreRecord:
    """Parse the payload as required by spec.metric and dispatch.

    Any wire-format violation (including a payload/metric mismatch)
    yields a format-error record with no score instead of raising; such
    submissions surface as rejected on the leaderboard.
    """
    try:
        if spec.metric == METRIC_MAP_AT_K:
            if context.ground_truth is None:
                raise ValueError("map_at_k evaluation requires ground truth")
            submission = parse_ranking_csv(payload, spec.k)
            return evaluate_map(
                submission,
                context.ground_truth,
                spec,
                submission_id=submission_id,
                evaluated_at=evaluated_at,
            )
        if spec.metric == METRIC_INSTANCE_LOG:
            log = parse_instance_log_csv(payload)
            return evaluate_instance_log(
                log,
                context.best_known,
                spec,
                submission_id=submission_id,
                evaluated_at=evaluated_at,
            )
        raise ValueError(f"unknown metric {spec.metric}")
    except FormatError as exc:
        return ScoreRecord(
            submission_id=submission_id,
            evaluator_version=spec.version,
            primary_score=None,
            aux={"error": str(exc)},
            verification=VERIFICATION_VERIFIED,  # nothing to verify
            evaluated_at=evaluated_at,
        )


# -- wire formats (docs/config-schema.md documents them for participants) ----


def _read_csv(payload: bytes, expected_header: list[str], what: str) -> list[list[str]]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise FormatError(f"{what} is empty")
    header = [cell.strip() for cell in rows[0]]
    if header != expected_header:
        raise FormatError(
            f"{what} header must be {','.join(expected_header)!r}, got {','.join(header)!r}"
        )
    return rows[1:]


def parse_ranking_csv(payload: bytes, k: int) -> RankingSubmission:
    """Parse `user_id,item_id,rank` rows into per-user ranked lists.

    Ranks must be integers in 1..k, unique per user; items unique per user.
    """
    rows = _read_csv(payload, RANKING_HEADER, "ranking submission")
    per_user: dict[str, dict[int, str]] = {}
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise FormatError(f"line {line_no}: expected 3 fields, got {len(row)}")
        user_id, item_id, rank_text = (cell.strip() for cell in row)
        if not user_id or not item_id:
            raise FormatError(f"line {line_no}: empty user_id or item_id")
        try:
            rank = int(rank_text)
        except ValueError as exc:
            raise FormatError(f"line {line_no}: rank must be an integer, got {rank_text!r}") from exc
        if not 1 <= rank <= k:
            raise FormatError(f"line {line_no}: rank {rank} outside 1..{k}")
        slots = per_user.setdefault(user_id, {})
        if rank in slots:
            raise FormatError(f"line {line_no}: duplicate rank {rank} for user {user_id!r}")
        if item_id in slots.values():
            raise FormatError(f"line {line_no}: duplicate item {item_id!r} for user {user_id!r}")
        slots[rank] = item_id

    rankings = {
        user_id: tuple(slots[rank] for rank in sorted(slots))
        for user_id, slots in per_user.items()
    }
    return RankingSubmission(rankings=rankings)


def parse_instance_log_csv(payload: bytes) -> InstanceLog:
    """Parse `instance,status,objective,runtime_s` rows. The objective field
    must be present exactly when status is solved; runtime must be >= 0."""
    rows = _read_csv(payload, INSTANCE_LOG_HEADER, "instance log")
    parsed = []
    seen = set()
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise FormatError(f"line {line_no}: expected 4 fields, got {len(row)}")
        instance, status, objective_text, runtime_text = (cell.strip() for cell in row)
        if not instance:
            raise FormatError(f"line {line_no}: empty instance name")
        if instance in seen:
            raise FormatError(f"line {line_no}: duplicate instance {instance!r}")
        seen.add(instance)
        if status not in (STATUS_SOLVED, STATUS_INFEASIBLE, STATUS_UNSOLVED):
            raise FormatError(f"line {line_no}: unknown status {status!r}")

        objective: Optional[float] = None
        if objective_text:
            try:
                objective = float(objective_text)
            except ValueError as exc:
                raise FormatError(f"line {line_no}: bad objective {objective_text!r}") from exc
            if not math.isfinite(objective):
                raise FormatError(f"line {line_no}: objective must be finite")
        if status == STATUS_SOLVED and objective is None:
            raise FormatError(f"line {line_no}: solved row must carry an objective")
        if status != STATUS_SOLVED and objective is not None:
            raise FormatError(f"line {line_no}: objective only allowed on solved rows")

        try:
            runtime = float(runtime_text)
        except ValueError as exc:
            raise FormatError(f"line {line_no}: bad runtime {runtime_text!r}") from exc
        if not math.isfinite(runtime) or runtime < 0:
            raise FormatError(f"line {line_no}: runtime must be >= 0")

        parsed.append(InstanceRow(instance=instance, status=status, objective=objective, runtime_s=runtime))
    return InstanceLog(rows=tuple(parsed))


def load_ground_truth_csv(payload: bytes) -> GroundTruth:
    """Parse `user_id,item_id,label,split` interaction data."""
    rows = _read_csv(payload, GROUND_TRUTH_HEADER, "ground truth")
    relevant: dict[str, set[str]] = {}
    test_items: set[str] = set()
    users: set[str] = set()
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise FormatError(f"line {line_no}: expected 4 fields, got {len(row)}")
        user_id, item_id, label, split = (cell.strip() for cell in row)
        if label not in ("0", "1"):
            raise FormatError(f"line {line_no}: label must be 0 or 1")
        if split not in ("train", "test"):
            raise FormatError(f"line {line_no}: split must be train or test")
        users.add(user_id)
        if split == "test":
            test_items.add(item_id)
        if label == "1":
            relevant.setdefault(user_id, set()).add(item_id)
    return GroundTruth(
        relevant={user: frozenset(items) for user, items in relevant.items()},
        test_item_universe=frozenset(test_items),
        known_users=frozenset(users),
    )


def records_equal_ignoring_time(a: ScoreRecord, b: ScoreRecord) -> bool:
    """Determinism contract: identical except evaluated_at."""
    return (
        a.submission_id == b.submission_id
        and a.evaluator_version == b.evaluator_version
        and a.primary_score == b.primary_score
        and a.aux == b.aux
        and a.verification == b.verification
    )
