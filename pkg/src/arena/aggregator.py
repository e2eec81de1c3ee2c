"""The private back-end heartbeat.

Every cadence tick, run_cycle ingests scanned submissions, evaluates
anything new under each stage's current evaluator version, recomputes
leaderboard rows, publishes an immutable snapshot when they changed,
writes the aggregated CSV artifact, applies badge rules, and drains a
bounded number of deferred-verification results.

Leaderboards are fast-path: they trust claimed or freshly computed
results at cadence speed. Verification is the slow path; it runs through
a durable queue and an organizer-supplied hook, and an invalidated record
drops out of the team's best on the next cycle.

Snapshots are immutable values. Frozen snapshots (labelled copies of the
live board, taken manually or automatically before a twist) persist
forever and are served byte-identically ever after.
"""

from __future__ import annotations

import csv
import io
import logging
import subprocess
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Optional, Union

from .clock import format_rfc3339, parse_rfc3339
from .config import (
    METRIC_MAP_AT_K,
    CompetitionConfig,
    EvaluatorSpec,
    StageConfig,
    active_stage,
)
from .evaluation import (
    VERIFICATION_INVALIDATED,
    VERIFICATION_PENDING,
    VERIFICATION_VERIFIED,
    EvalContext,
    FormatError,
    GroundTruth,
    InstanceLog,
    ScoreRecord,
    evaluate,
    load_ground_truth_csv,
    parse_instance_log_csv,
    records_equal_ignoring_time,
)
from .ingestion import Submission, SubmissionStore
from .registry import Registry
from .storage import append_jsonl, atomic_write_json, atomic_write_text, read_json, read_jsonl

logger = logging.getLogger(__name__)

CSV_HEADER = ["rank", "team", "score", "submissions", "last_submission_utc", "badges", "flags"]

FLAG_PENDING = "pending"
FLAG_INVALIDATED = "invalidated"
FLAG_REJECTED = "rejected"

_BACKOFF_BASE_S = 60.0
_BACKOFF_CAP_S = 3600.0
_ALERT_AFTER_FAILURES = 3


class AggregatorError(Exception):
    pass


class NoLiveSnapshot(AggregatorError):
    pass


class FreezeLabelTaken(AggregatorError):
    pass


class BadTwistVersion(AggregatorError):
    pass


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    display_name: str
    best_score: Optional[float]
    submission_count: int
    last_submission_at: Optional[datetime]
    badges: tuple[str, ...]
    verification_flag: str


@dataclass(frozen=True)
class LeaderboardSnapshot:
    snapshot_id: int
    created_at: datetime
    stage_id: str
    evaluator_version: int
    rows: tuple[LeaderboardRow, ...]
    csv_text: str  # rendered once; retrieval is byte-identical forever
    frozen: bool = False
    freeze_label: Optional[str] = None

    def json_payload(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "created_at": format_rfc3339(self.created_at),
            "stage_id": self.stage_id,
            "evaluator_version": self.evaluator_version,
            "frozen": self.frozen,
            "freeze_label": self.freeze_label,
            "rows": [
                {
                    "rank": row.rank,
                    "display_name": row.display_name,
                    "best_score": None if row.best_score is None else round(row.best_score, 6),
                    "submission_count": row.submission_count,
                    "last_submission_at": (
                        None
                        if row.last_submission_at is None
                        else format_rfc3339(row.last_submission_at)
                    ),
                    "badges": list(row.badges),
                    "verification_flag": row.verification_flag,
                }
                for row in self.rows
            ],
        }


@dataclass(frozen=True)
class BadgeAward:
    badge_id: str
    team_id: str
    stage_id: str
    awarded_at: datetime
    origin: str = "rule"  # rule | manual


@dataclass
class VerificationEntry:
    submission_id: int
    evaluator_version: int
    attempts: int = 0
    next_attempt_at: Optional[datetime] = None


@dataclass(frozen=True)
class VerifierContext:
    payload_path: Path
    ground_truth_path: Optional[Path]
    ground_truth: Optional[GroundTruth]


# A hook recomputes the submitted result: a score for ranking stages, a
# fresh instance log for instance stages.
VerifierHook = Callable[[Submission, EvaluatorSpec, VerifierContext], Union[float, InstanceLog]]


def recomputing_verifier(submission: Submission, spec: EvaluatorSpec, ctx: VerifierContext):
    """Default hook: re-derive the result from the stored payload.

    For ranking stages this recomputes MAP from scratch; for instance
    stages it re-parses the claimed log (a stand-in for actually
    re-running solver code, which only the organizer can supply).
    """
    if spec.metric == METRIC_MAP_AT_K:
        record = evaluate(
            submission.payload,
            spec,
            EvalContext(ground_truth=ctx.ground_truth),
        )
        if record.primary_score is None:
            raise RuntimeError(f"payload unparseable: {record.aux.get('error')}")
        return record.primary_score
    return parse_instance_log_csv(submission.payload)


class ExternalCommandVerifier:
    """Adapter for an organizer-supplied external verifier command.

    The command receives the payload path and the ground-truth path and
    must print the recomputed result on stdout: a decimal score for
    ranking stages, or a full instance-log CSV for instance stages.
    Nonzero exit status or timeout counts as a verifier failure.
    """

    def __init__(self, command: list[str], timeout_s: float = 300.0):
        self.command = list(command)
        self.timeout_s = timeout_s

    def __call__(self, submission: Submission, spec: EvaluatorSpec, ctx: VerifierContext):
        argv = self.command + [str(ctx.payload_path), str(ctx.ground_truth_path or "")]
        result = subprocess.run(
            argv, capture_output=True, timeout=self.timeout_s, check=False
        )
        if result.returncode != 0:
            raise RuntimeError(
                f"verifier exited {result.returncode}: {result.stderr.decode(errors='replace')[:200]}"
            )
        if spec.metric == METRIC_MAP_AT_K:
            return float(result.stdout.decode("utf-8").strip())
        return parse_instance_log_csv(result.stdout)


class Aggregator:
    """Single logical writer of canonical competition state."""

    def __init__(
        self,
        config: CompetitionConfig,
        registry: Registry,
        store: SubmissionStore,
        data_dir: Path,
        public_dir: Path,
        clock,
        *,
        scan_dir: Optional[Path] = None,
        verifier_hook: VerifierHook = recomputing_verifier,
        verification_batch: int = 10,
        map_tolerance: float = 1e-6,
        objective_tolerance: float = 1e-6,
        custom_predicates: Optional[dict[str, Callable]] = None,
    ):
        self._config = config
        self._registry = registry
        self._store = store
        self._data_dir = Path(data_dir)
        self._public_dir = Path(public_dir)
        self._clock = clock
        self._scan_dir = Path(scan_dir) if scan_dir else self._data_dir / "incoming"
        self._verifier_hook = verifier_hook
        self._verification_batch = verification_batch
        self._map_tolerance = map_tolerance
        self._objective_tolerance = objective_tolerance
        self._custom_predicates = dict(custom_predicates or {})

        self._lock = threading.RLock()
        self._versions: dict[str, int] = {s.stage_id: 1 for s in config.stages}
        self._scan_cursor: dict = {}
        self._scores: dict[tuple[int, int], ScoreRecord] = {}
        self._snapshots: dict[int, LeaderboardSnapshot] = {}
        self._latest_live: dict[str, int] = {}
        self._frozen_by_label: dict[str, int] = {}
        self._next_snapshot_id = 1
        self._badges: list[BadgeAward] = []
        self._fired_rules: set[tuple[str, str]] = set()  # (stage, badge_id)
        self._queue: dict[tuple[int, int], VerificationEntry] = {}
        self._alerts: list[str] = []
        self._parsed_logs: dict[int, Optional[InstanceLog]] = {}
        self._ground_truths: dict[str, Optional[GroundTruth]] = {}
        self._best_known_cache: dict[tuple[str, int], dict[str, float]] = {}

        self._scores_log = self._data_dir / "scores.jsonl"
        self._badges_log = self._data_dir / "badges.jsonl"
        self._state_path = self._data_dir / "aggregator_state.json"
        self._snapshot_dir = self._data_dir / "snapshots"
        self._reload()

    # -- public queries -------------------------------------------------------

    def current_version(self, stage_id: str) -> int:
        self._config.stage(stage_id)
        with self._lock:
            return self._versions[stage_id]

    def latest_live_snapshot(self, stage_id: str) -> Optional[LeaderboardSnapshot]:
        with self._lock:
            snapshot_id = self._latest_live.get(stage_id)
            return self._snapshots.get(snapshot_id) if snapshot_id else None

    def snapshot_by_id(self, snapshot_id: int) -> Optional[LeaderboardSnapshot]:
        with self._lock:
            return self._snapshots.get(snapshot_id)

    def frozen_snapshot(self, label: str) -> Optional[LeaderboardSnapshot]:
        with self._lock:
            snapshot_id = self._frozen_by_label.get(label)
            return self._snapshots.get(snapshot_id) if snapshot_id else None

    def frozen_labels(self) -> list[str]:
        with self._lock:
            return sorted(self._frozen_by_label)

    def badge_awards(self, stage_id: str) -> list[BadgeAward]:
        with self._lock:
            return [a for a in self._badges if a.stage_id == stage_id]

    def score_records(self, stage_id: str, version: Optional[int] = None) -> list[ScoreRecord]:
        with self._lock:
            version = version or self._versions[stage_id]
            stage_sids = {s.submission_id for s in self._store.for_stage(stage_id)}
            return [
                record
                for (sid, v), record in self._scores.items()
                if v == version and sid in stage_sids
            ]

    def verification_status(self) -> dict:
        with self._lock:
            return {
                "queued": len(self._queue),
                "entries": [
                    {
                        "submission_id": entry.submission_id,
                        "evaluator_version": entry.evaluator_version,
                        "attempts": entry.attempts,
                        "next_attempt_at": (
                            format_rfc3339(entry.next_attempt_at)
                            if entry.next_attempt_at
                            else None
                        ),
                    }
                    for entry in self._queue.values()
                ],
                "alerts": list(self._alerts),
            }

    def auto_freeze_label(self, stage_id: str, new_version: int) -> str:
        """The label apply_twist will freeze under (shown in confirmations)."""
        base = f"{stage_id}-pre-v{new_version}"
        with self._lock:
            label = base
            suffix = 2
            while label in self._frozen_by_label:
                label = f"{base}-{suffix}"
                suffix += 1
            return label

    # -- the heartbeat ----------------------------------------------------------

    def run_cycle(self, now: Optional[datetime] = None) -> list[LeaderboardSnapshot]:
        """One aggregation cycle; safe to invoke on any state.

        Returns the snapshots published this cycle (at most one per
        stage). Individual submission failures become format-error rows
        and never abort the cycle.
        """
        now = now or self._clock.now()
        published = []
        with self._lock:
            scanned, self._scan_cursor = self._store.scan_source(
                self._scan_dir, self._scan_cursor, now
            )
            if scanned:
                self._persist_state()

            for stage in self._config.stages:
                if (
                    stage.preliminary_deadline is not None
                    and now >= stage.preliminary_deadline
                ):
                    lapsed = self._store.enforce_preliminary_deadline(stage, now)
                    if lapsed:
                        logger.info(
                            "stage %s: %d team(s) missed the preliminary deadline",
                            stage.stage_id,
                            len(lapsed),
                        )

            for stage in self._config.stages:
                self._evaluate_stage(stage, now)
                snapshot = self._publish_if_changed(stage, now)
                if snapshot is not None:
                    published.append(snapshot)

            self._award_rule_badges(now)
            self._process_verification(now, self._verification_batch)
        return published

    # -- leaderboard --------------------------------------------------------------

    def compute_leaderboard(
        self, stage_id: str, version: Optional[int] = None
    ) -> tuple[LeaderboardRow, ...]:
        """Deterministic rows: best non-invalidated score per team, fully
        ordered by (score desc, runtime asc on instance stages, earliest
        achieving submission asc, display name asc)."""
        stage = self._config.stage(stage_id)
        with self._lock:
            version = version or self._versions[stage_id]
            submissions = self._store.for_stage(stage_id)
            by_team: dict[str, list[Submission]] = {}
            for submission in submissions:
                by_team.setdefault(submission.team_id, []).append(submission)

            badge_ids: dict[str, list[str]] = {}
            for award in self._badges:
                if award.stage_id == stage_id:
                    badge_ids.setdefault(award.team_id, []).append(award.badge_id)

            scored = []
            unscored = []
            for team_id, team_subs in by_team.items():
                display = self._registry.resolve_display_name(team_id, stage_id)
                last_at = max(s.received_at for s in team_subs)
                badges = tuple(sorted(set(badge_ids.get(team_id, []))))

                candidates = []  # (record, submission)
                saw_invalidated = False
                saw_rejected = False
                for submission in team_subs:
                    record = self._scores.get((submission.submission_id, version))
                    if record is None:
                        continue
                    if record.rejected:
                        saw_rejected = True
                        continue
                    if record.verification == VERIFICATION_INVALIDATED:
                        saw_invalidated = True
                        continue
                    candidates.append((record, submission))

                if not candidates:
                    if saw_invalidated:
                        flag = FLAG_INVALIDATED
                    elif saw_rejected:
                        flag = FLAG_REJECTED
                    else:
                        flag = FLAG_PENDING  # accepted but not evaluated yet
                    unscored.append(
                        (
                            display,
                            LeaderboardRow(
                                rank=0,
                                display_name=display,
                                best_score=None,
                                submission_count=len(team_subs),
                                last_submission_at=last_at,
                                badges=badges,
                                verification_flag=flag,
                            ),
                        )
                    )
                    continue

                best_score = max(record.primary_score for record, _ in candidates)
                achievers = [
                    (record, submission)
                    for record, submission in candidates
                    if record.primary_score == best_score
                ]
                achievers.sort(key=lambda pair: (pair[1].received_at, pair[1].submission_id))
                best_record, best_submission = achievers[0]

                runtime = 0.0
                if stage.kind == "instance_task":
                    runtime = float(best_record.aux.get("total_runtime_s", 0.0))
                flag = "" if best_record.verification == VERIFICATION_VERIFIED else FLAG_PENDING

                sort_key = (
                    -best_score,
                    runtime,
                    best_submission.received_at,
                    display,
                )
                scored.append(
                    (
                        sort_key,
                        LeaderboardRow(
                            rank=0,
                            display_name=display,
                            best_score=best_score,
                            submission_count=len(team_subs),
                            last_submission_at=last_at,
                            badges=badges,
                            verification_flag=flag,
                        ),
                    )
                )

            scored.sort(key=lambda pair: pair[0])
            unscored.sort(key=lambda pair: pair[0])
            ordered = [row for _, row in scored] + [row for _, row in unscored]
            return tuple(
                replace(row, rank=position) for position, row in enumerate(ordered, start=1)
            )

    def render_csv(self, rows: tuple[LeaderboardRow, ...]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.rank,
                    row.display_name,
                    "" if row.best_score is None else f"{row.best_score:.6f}",
                    row.submission_count,
                    "" if row.last_submission_at is None else format_rfc3339(row.last_submission_at),
                    ";".join(row.badges),
                    row.verification_flag,
                ]
            )
        return buffer.getvalue()

    # -- freeze and twist ---------------------------------------------------------

    def freeze(self, stage_id: str, label: str, now: Optional[datetime] = None) -> LeaderboardSnapshot:
        """Duplicate the latest live snapshot as an immutable labelled copy."""
        now = now or self._clock.now()
        if not label or "/" in label:
            raise AggregatorError(f"bad freeze label: {label!r}")
        with self._lock:
            if label in self._frozen_by_label:
                raise FreezeLabelTaken(f"freeze label already used: {label}")
            live = self.latest_live_snapshot(stage_id)
            if live is None:
                raise NoLiveSnapshot(f"stage {stage_id} has no live snapshot to freeze")
            frozen = LeaderboardSnapshot(
                snapshot_id=self._next_snapshot_id,
                created_at=now,
                stage_id=stage_id,
                evaluator_version=live.evaluator_version,
                rows=live.rows,
                csv_text=live.csv_text,
                frozen=True,
                freeze_label=label,
            )
            self._next_snapshot_id += 1
            self._store_snapshot(frozen)
            self._frozen_by_label[label] = frozen.snapshot_id
            frozen_path = self._public_dir / "frozen" / f"{label}.csv"
            atomic_write_text(frozen_path, frozen.csv_text)
        return frozen

    def apply_twist(
        self, stage_id: str, new_version: int, now: Optional[datetime] = None
    ) -> dict:
        """Advance the stage to its next evaluator version.

        Automatically freezes the pre-twist live board first (if one
        exists), then bumps the version; the next cycle re-evaluates every
        cached submission payload under the new spec and publishes a fully
        re-scored board. v1 records are never mixed into v2 rows.
        """
        now = now or self._clock.now()
        stage = self._config.stage(stage_id)
        with self._lock:
            current = self._versions[stage_id]
            if new_version != current + 1:
                raise BadTwistVersion(
                    f"stage {stage_id} is at version {current}; twist target must be {current + 1}"
                )
            try:
                stage.evaluator(new_version)
            except KeyError as exc:
                raise BadTwistVersion(str(exc)) from None

            freeze_label = None
            if self.latest_live_snapshot(stage_id) is not None:
                freeze_label = self.auto_freeze_label(stage_id, new_version)
                self.freeze(stage_id, freeze_label, now)

            self._versions[stage_id] = new_version
            # old-version queue entries are obsolete: that board is frozen
            self._queue = {
                key: entry
                for key, entry in self._queue.items()
                if not (
                    key[1] == current
                    and self._store.submission(key[0]).stage_id == stage_id
                )
            }
            self._persist_state()
            self._evaluate_stage(stage, now)
        return {"stage_id": stage_id, "version": new_version, "auto_freeze_label": freeze_label}

    # -- badges ---------------------------------------------------------------------

    def award_badges(self, now: Optional[datetime] = None) -> list[BadgeAward]:
        """Apply un-fired badge rules; each rule awards at most once per stage."""
        now = now or self._clock.now()
        with self._lock:
            return self._award_rule_badges(now)

    def grant_badge(
        self, stage_id: str, team_id: str, badge_id: str, now: Optional[datetime] = None
    ) -> Optional[BadgeAward]:
        """Manual organizer grant; idempotent per (stage, team, badge)."""
        now = now or self._clock.now()
        self._config.stage(stage_id)
        self._registry.team(team_id)
        with self._lock:
            for award in self._badges:
                if (
                    award.stage_id == stage_id
                    and award.team_id == team_id
                    and award.badge_id == badge_id
                ):
                    return None
            award = BadgeAward(
                badge_id=badge_id,
                team_id=team_id,
                stage_id=stage_id,
                awarded_at=now,
                origin="manual",
            )
            self._record_badge(award)
            return award

    def _award_rule_badges(self, now: datetime) -> list[BadgeAward]:
        awarded = []
        for stage in self._config.stages:
            for rule in self._config.badge_rules:
                if (stage.stage_id, rule.badge_id) in self._fired_rules:
                    continue
                team_id = self._badge_winner(rule, stage)
                if team_id is None:
                    continue
                award = BadgeAward(
                    badge_id=rule.badge_id,
                    team_id=team_id,
                    stage_id=stage.stage_id,
                    awarded_at=now,
                )
                self._fired_rules.add((stage.stage_id, rule.badge_id))
                self._record_badge(award)
                awarded.append(award)
        return awarded

    def _badge_winner(self, rule, stage: StageConfig) -> Optional[str]:
        submissions = self._store.for_stage(stage.stage_id)
        if rule.trigger == "first_submission":
            if not submissions:
                return None
            first = min(submissions, key=lambda s: (s.received_at, s.submission_id))
            return first.team_id
        if rule.trigger == "first_past_baseline":
            if stage.baseline_score is None:
                return None
            version = self._versions[stage.stage_id]
            passing = [
                submission
                for submission in submissions
                if (record := self._scores.get((submission.submission_id, version)))
                is not None
                and not record.rejected
                and record.verification != VERIFICATION_INVALIDATED
                and record.primary_score > stage.baseline_score
            ]
            if not passing:
                return None
            earliest = min(passing, key=lambda s: (s.received_at, s.submission_id))
            return earliest.team_id
        if rule.trigger == "custom":
            predicate = self._custom_predicates.get(rule.predicate)
            if predicate is None:
                return None
            try:
                return predicate(stage.stage_id, self)
            except Exception:
                logger.exception("custom badge predicate %r failed", rule.predicate)
                return None
        return None

    # -- verification -------------------------------------------------------------

    def process_verification(self, now: Optional[datetime] = None, batch: Optional[int] = None) -> dict:
        now = now or self._clock.now()
        with self._lock:
            return self._process_verification(now, batch or self._verification_batch)

    def drain_verification(self, now: Optional[datetime] = None) -> dict:
        """Process every queued entry regardless of batch size or backoff."""
        now = now or self._clock.now()
        with self._lock:
            total = {"verified": 0, "invalidated": 0, "failed": 0}
            for _ in range(len(self._queue) * (_ALERT_AFTER_FAILURES + 1)):
                outcome = self._process_verification(now, len(self._queue), ignore_backoff=True)
                for key in total:
                    total[key] += outcome[key]
                if not self._queue or outcome["verified"] + outcome["invalidated"] == 0:
                    break
            return total

    def _process_verification(self, now: datetime, batch: int, ignore_backoff: bool = False) -> dict:
        outcome = {"verified": 0, "invalidated": 0, "failed": 0}
        due = [
            entry
            for entry in self._queue.values()
            if ignore_backoff
            or entry.next_attempt_at is None
            or entry.next_attempt_at <= now
        ]
        due.sort(key=lambda e: (e.submission_id, e.evaluator_version))
        for entry in due[:batch]:
            key = (entry.submission_id, entry.evaluator_version)
            record = self._scores.get(key)
            if record is None or record.verification != VERIFICATION_PENDING:
                self._queue.pop(key, None)
                continue
            submission = self._store.submission(entry.submission_id)
            stage = self._config.stage(submission.stage_id)
            spec = stage.evaluator(entry.evaluator_version)
            ctx = VerifierContext(
                payload_path=self._payload_path(submission),
                ground_truth_path=self._ground_truth_path(stage.stage_id),
                ground_truth=self._ground_truth(stage.stage_id),
            )
            try:
                recomputed = self._verifier_hook(submission, spec, ctx)
                status = self._judge(record, submission, spec, recomputed)
            except Exception as exc:
                entry.attempts += 1
                backoff = min(_BACKOFF_BASE_S * (2 ** (entry.attempts - 1)), _BACKOFF_CAP_S)
                entry.next_attempt_at = now + timedelta(seconds=backoff)
                outcome["failed"] += 1
                if entry.attempts == _ALERT_AFTER_FAILURES:
                    alert = (
                        f"verifier failed {entry.attempts} times for submission "
                        f"{entry.submission_id} (v{entry.evaluator_version}): {exc}"
                    )
                    self._alerts.append(alert)
                    self._persist_state()
                    logger.error(alert)
                continue
            updated = record.with_verification(status)
            self._scores[key] = updated
            self._append_score(updated)
            self._queue.pop(key, None)
            outcome["verified" if status == VERIFICATION_VERIFIED else "invalidated"] += 1
        return outcome

    def _judge(
        self,
        record: ScoreRecord,
        submission: Submission,
        spec: EvaluatorSpec,
        recomputed: Union[float, InstanceLog],
    ) -> str:
        if spec.metric == METRIC_MAP_AT_K:
            if not isinstance(recomputed, (int, float)):
                raise RuntimeError("ranking verifier must return a numeric score")
            claimed = record.primary_score
            if claimed is not None and abs(claimed - float(recomputed)) <= self._map_tolerance:
                return VERIFICATION_VERIFIED
            return VERIFICATION_INVALIDATED

        if not isinstance(recomputed, InstanceLog):
            raise RuntimeError("instance verifier must return an instance log")
        claimed_log = self._parsed_log(submission)
        if claimed_log is None:
            return VERIFICATION_INVALIDATED
        claimed_rows = {row.instance: row for row in claimed_log.rows}
        recomputed_rows = {row.instance: row for row in recomputed.rows}
        if set(claimed_rows) != set(recomputed_rows):
            return VERIFICATION_INVALIDATED
        for name, claimed_row in claimed_rows.items():
            check = recomputed_rows[name]
            if claimed_row.status != check.status:
                return VERIFICATION_INVALIDATED
            if claimed_row.status == "solved" and (
                abs((claimed_row.objective or 0.0) - (check.objective or 0.0))
                > self._objective_tolerance
            ):
                return VERIFICATION_INVALIDATED
        return VERIFICATION_VERIFIED

    # -- evaluation within the cycle ---------------------------------------------

    def _evaluate_stage(self, stage: StageConfig, now: datetime) -> None:
        version = self._versions[stage.stage_id]
        spec = stage.evaluator(version)
        submissions = self._store.for_stage(stage.stage_id)

        if spec.metric == METRIC_MAP_AT_K:
            truth = self._ground_truth(stage.stage_id)
            if truth is None:
                pendings = [
                    s for s in submissions if (s.submission_id, version) not in self._scores
                ]
                if pendings:
                    logger.warning(
                        "stage %s: no ground truth at %s; %d submission(s) wait",
                        stage.stage_id,
                        self._ground_truth_path(stage.stage_id),
                        len(pendings),
                    )
                return
            context = EvalContext(ground_truth=truth)
            for submission in submissions:
                key = (submission.submission_id, version)
                if key in self._scores:
                    continue
                record = evaluate(
                    submission.payload,
                    spec,
                    context,
                    submission_id=submission.submission_id,
                    evaluated_at=now,
                )
                self._commit_record(key, record)
            return

        # instance stages: quality is relative to the best known objective,
        # recomputed every cycle from all non-invalidated claims
        best_known = self._compute_best_known(submissions, spec, version)
        cache_key = (stage.stage_id, version)
        changed = self._best_known_cache.get(cache_key) != best_known
        self._best_known_cache[cache_key] = best_known
        context = EvalContext(best_known=best_known)
        for submission in submissions:
            key = (submission.submission_id, version)
            existing = self._scores.get(key)
            if existing is not None and not changed:
                continue
            if existing is not None and existing.verification == VERIFICATION_INVALIDATED:
                continue  # keep the invalidated claim as-is
            record = evaluate(
                submission.payload,
                spec,
                context,
                submission_id=submission.submission_id,
                evaluated_at=now,
            )
            if existing is not None:
                record = record.with_verification(existing.verification)
                if records_equal_ignoring_time(existing, record):
                    continue
            self._commit_record(key, record)

    def _compute_best_known(
        self, submissions: list[Submission], spec: EvaluatorSpec, version: int
    ) -> dict[str, float]:
        senses = spec.objective_sense
        best: dict[str, float] = {}
        for submission in submissions:
            record = self._scores.get((submission.submission_id, version))
            if record is not None and record.verification == VERIFICATION_INVALIDATED:
                continue
            log = self._parsed_log(submission)
            if log is None:
                continue
            for row in log.rows:
                if row.status != "solved" or row.objective is None:
                    continue
                sense = senses.get(row.instance)
                if sense is None:
                    continue
                current = best.get(row.instance)
                if current is None:
                    best[row.instance] = row.objective
                elif sense == "min":
                    best[row.instance] = min(current, row.objective)
                else:
                    best[row.instance] = max(current, row.objective)
        return best

    def _parsed_log(self, submission: Submission) -> Optional[InstanceLog]:
        sid = submission.submission_id
        if sid not in self._parsed_logs:
            try:
                self._parsed_logs[sid] = parse_instance_log_csv(submission.payload)
            except FormatError:
                self._parsed_logs[sid] = None
        return self._parsed_logs[sid]

    def _commit_record(self, key: tuple[int, int], record: ScoreRecord) -> None:
        self._scores[key] = record
        self._append_score(record)
        if record.verification == VERIFICATION_PENDING:
            self._queue.setdefault(
                key, VerificationEntry(submission_id=key[0], evaluator_version=key[1])
            )
        else:
            self._queue.pop(key, None)

    # -- snapshot publication ------------------------------------------------------

    def _publish_if_changed(
        self, stage: StageConfig, now: datetime
    ) -> Optional[LeaderboardSnapshot]:
        version = self._versions[stage.stage_id]
        rows = self.compute_leaderboard(stage.stage_id, version)
        live = self.latest_live_snapshot(stage.stage_id)
        if live is None:
            if not rows:
                return None
        elif live.rows == rows and live.evaluator_version == version:
            return None

        snapshot = LeaderboardSnapshot(
            snapshot_id=self._next_snapshot_id,
            created_at=now,
            stage_id=stage.stage_id,
            evaluator_version=version,
            rows=rows,
            csv_text=self.render_csv(rows),
        )
        self._next_snapshot_id += 1
        self._store_snapshot(snapshot)
        self._latest_live[stage.stage_id] = snapshot.snapshot_id

        board_path = self._public_dir / "boards" / f"{stage.stage_id}.csv"
        atomic_write_text(board_path, snapshot.csv_text)
        # the canonical single-file artifact tracks the active (or only) stage
        if len(self._config.stages) == 1 or active_stage(self._config, now) == stage.stage_id:
            atomic_write_text(self._public_dir / "leaderboard.csv", snapshot.csv_text)
        return snapshot

    # -- persistence ----------------------------------------------------------------

    def _payload_path(self, submission: Submission) -> Path:
        return (
            self._data_dir
            / "submissions"
            / submission.stage_id
            / submission.team_id
            / str(submission.submission_id)
            / "payload"
        )

    def _ground_truth_path(self, stage_id: str) -> Path:
        return self._data_dir / "private" / stage_id / "ground_truth.csv"

    def _ground_truth(self, stage_id: str) -> Optional[GroundTruth]:
        if stage_id not in self._ground_truths:
            path = self._ground_truth_path(stage_id)
            if path.exists():
                self._ground_truths[stage_id] = load_ground_truth_csv(path.read_bytes())
            else:
                self._ground_truths[stage_id] = None
        return self._ground_truths[stage_id]

    def _append_score(self, record: ScoreRecord) -> None:
        append_jsonl(
            self._scores_log,
            {
                "submission_id": record.submission_id,
                "evaluator_version": record.evaluator_version,
                "primary_score": record.primary_score,
                "aux": record.aux,
                "verification": record.verification,
                "evaluated_at": (
                    format_rfc3339(record.evaluated_at) if record.evaluated_at else None
                ),
            },
        )

    def _record_badge(self, award: BadgeAward) -> None:
        self._badges.append(award)
        append_jsonl(
            self._badges_log,
            {
                "badge_id": award.badge_id,
                "team_id": award.team_id,
                "stage_id": award.stage_id,
                "awarded_at": format_rfc3339(award.awarded_at),
                "origin": award.origin,
            },
        )

    def _store_snapshot(self, snapshot: LeaderboardSnapshot) -> None:
        self._snapshots[snapshot.snapshot_id] = snapshot
        atomic_write_json(
            self._snapshot_dir / f"{snapshot.snapshot_id:06d}.json",
            {
                "snapshot_id": snapshot.snapshot_id,
                "created_at": format_rfc3339(snapshot.created_at),
                "stage_id": snapshot.stage_id,
                "evaluator_version": snapshot.evaluator_version,
                "frozen": snapshot.frozen,
                "freeze_label": snapshot.freeze_label,
                "csv": snapshot.csv_text,
                "rows": [
                    {
                        "rank": row.rank,
                        "display_name": row.display_name,
                        "best_score": row.best_score,
                        "submission_count": row.submission_count,
                        "last_submission_at": (
                            format_rfc3339(row.last_submission_at)
                            if row.last_submission_at
                            else None
                        ),
                        "badges": list(row.badges),
                        "verification_flag": row.verification_flag,
                    }
                    for row in snapshot.rows
                ],
            },
        )

    def _persist_state(self) -> None:
        atomic_write_json(
            self._state_path,
            {
                "versions": self._versions,
                "scan_cursor": self._scan_cursor,
                "alerts": self._alerts,
            },
        )

    def _reload(self) -> None:
        state = read_json(self._state_path, {})
        versions = state.get("versions", {})
        for stage in self._config.stages:
            if stage.stage_id in versions:
                self._versions[stage.stage_id] = int(versions[stage.stage_id])
        self._scan_cursor = dict(state.get("scan_cursor", {}))
        self._alerts = list(state.get("alerts", []))

        for event in read_jsonl(self._scores_log):
            record = ScoreRecord(
                submission_id=event["submission_id"],
                evaluator_version=event["evaluator_version"],
                primary_score=event["primary_score"],
                aux=event.get("aux", {}),
                verification=event["verification"],
                evaluated_at=(
                    parse_rfc3339(event["evaluated_at"]) if event.get("evaluated_at") else None
                ),
            )
            self._scores[(record.submission_id, record.evaluator_version)] = record

        for event in read_jsonl(self._badges_log):
            award = BadgeAward(
                badge_id=event["badge_id"],
                team_id=event["team_id"],
                stage_id=event["stage_id"],
                awarded_at=parse_rfc3339(event["awarded_at"]),
                origin=event.get("origin", "rule"),
            )
            self._badges.append(award)
            if award.origin == "rule":
                self._fired_rules.add((award.stage_id, award.badge_id))

        if self._snapshot_dir.exists():
            for path in sorted(self._snapshot_dir.glob("*.json")):
                doc = read_json(path)
                snapshot = LeaderboardSnapshot(
                    snapshot_id=doc["snapshot_id"],
                    created_at=parse_rfc3339(doc["created_at"]),
                    stage_id=doc["stage_id"],
                    evaluator_version=doc["evaluator_version"],
                    frozen=doc["frozen"],
                    freeze_label=doc.get("freeze_label"),
                    csv_text=doc["csv"],
                    rows=tuple(
                        LeaderboardRow(
                            rank=row["rank"],
                            display_name=row["display_name"],
                            best_score=row["best_score"],
                            submission_count=row["submission_count"],
                            last_submission_at=(
                                parse_rfc3339(row["last_submission_at"])
                                if row.get("last_submission_at")
                                else None
                            ),
                            badges=tuple(row.get("badges", [])),
                            verification_flag=row.get("verification_flag", ""),
                        )
                        for row in doc["rows"]
                    ),
                )
                self._snapshots[snapshot.snapshot_id] = snapshot
                self._next_snapshot_id = max(self._next_snapshot_id, snapshot.snapshot_id + 1)
                if snapshot.frozen and snapshot.freeze_label:
                    self._frozen_by_label[snapshot.freeze_label] = snapshot.snapshot_id
                elif not snapshot.frozen:
                    current = self._latest_live.get(snapshot.stage_id)
                    if current is None or snapshot.snapshot_id > current:
                        self._latest_live[snapshot.stage_id] = snapshot.snapshot_id

        # pending records re-enter the verification queue (attempt counts
        # reset deliberately: a restart clears transient verifier trouble)
        for key, record in self._scores.items():
            if record.verification == VERIFICATION_PENDING:
                self._queue[key] = VerificationEntry(
                    submission_id=key[0], evaluator_version=key[1]
                )
