"""Submission intake: the push API path and the scanned-directory path,
unified behind one immutable Submission type.

Quota accounting uses calendar days in the competition's official time
zone, not rolling 24-hour windows. Acceptance (payload persistence plus
quota increment) is one atomic commit under the store lock, so the daily
limit holds under arbitrary concurrency.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, time, timedelta
from pathlib import Path
from typing import Optional

from .clock import format_rfc3339, parse_rfc3339
from .config import CompetitionConfig, StageConfig
from .registry import Registry, STATUS_ACTIVE
from .storage import atomic_write_json, read_json

logger = logging.getLogger(__name__)

SOURCE_API = "api"
SOURCE_SCAN = "scan"

DEFAULT_SIZE_CAP = 16 * 1024 * 1024  # result artifacts, not code or models

ARTIFACT_EXTENSION = ".csv"


class IngestionError(Exception):
    pass


class StageClosed(IngestionError):
    pass


class TeamInactive(IngestionError):
    pass


class PayloadTooLarge(IngestionError):
    pass


class QuotaExceeded(IngestionError):
    """Carries when the daily window resets, in the official time zone."""

    def __init__(self, limit: int, reset_at: datetime):
        self.limit = limit
        self.reset_at = reset_at
        super().__init__(
            f"daily submission limit of {limit} reached; quota resets at "
            f"{reset_at.isoformat()}"
        )


@dataclass(frozen=True)
class Submission:
    submission_id: int
    team_id: str
    stage_id: str
    received_at: datetime  # server clock, never the client's
    payload_digest: str
    payload: bytes
    source: str = SOURCE_API
    channel: Optional[str] = None
    duplicate: bool = False  # same digest seen before for this team+stage


class SubmissionStore:
    """Durable submission storage plus quota and deadline enforcement.

    Disk layout (docs/storage.md):
    ``data/submissions/<stage>/<team>/<submission_id>/payload`` with a
    ``meta.json`` sidecar. The sidecar is the commit marker: payload files
    without one are ignored on reload.
    """

    def __init__(
        self,
        config: CompetitionConfig,
        registry: Registry,
        data_dir: Path,
        *,
        size_cap: int = DEFAULT_SIZE_CAP,
    ):
        self._config = config
        self._registry = registry
        self._root = Path(data_dir) / "submissions"
        self._state_path = Path(data_dir) / "ingestion_state.json"
        self._size_cap = size_cap
        self._lock = threading.RLock()
        self._submissions: dict[int, Submission] = {}
        self._by_stage: dict[str, list[int]] = {}
        self._digests: set[tuple[str, str, str]] = set()  # (team, stage, digest)
        self._next_id = 1
        self._preliminary_enforced: set[str] = set()
        self._reload()

    # -- intake ---------------------------------------------------------------

    def accept_submission(
        self,
        team_id: str,
        stage_id: str,
        payload: bytes,
        now: datetime,
        *,
        source: str = SOURCE_API,
        channel: Optional[str] = None,
    ) -> Submission:
        """Persist one submission atomically with its quota increment.

        Duplicate payloads are accepted and flagged, not rejected:
        resubmission is legitimate iteration.
        """
        stage = self._config.stage(stage_id)
        if len(payload) > self._size_cap:
            raise PayloadTooLarge(
                f"payload of {len(payload)} bytes exceeds the {self._size_cap} byte cap"
            )
        with self._lock:
            record = self._registry.team(team_id)
            if record.status != STATUS_ACTIVE:
                raise TeamInactive(f"team is {record.status}")
            if not (stage.open <= now < stage.close):
                raise StageClosed(f"stage {stage_id} is not open")
            if source == SOURCE_API:
                used = self._count_today(team_id, stage_id, now)
                if used >= stage.daily_submission_limit:
                    raise QuotaExceeded(
                        stage.daily_submission_limit, self._next_reset(now)
                    )

            digest = hashlib.sha256(payload).hexdigest()
            duplicate = (team_id, stage_id, digest) in self._digests
            submission = Submission(
                submission_id=self._next_id,
                team_id=team_id,
                stage_id=stage_id,
                received_at=now,
                payload_digest=digest,
                payload=bytes(payload),
                source=source,
                channel=channel,
                duplicate=duplicate,
            )
            self._persist(submission)
            self._next_id += 1
            self._index(submission)
        return submission

    def scan_source(
        self, root: Path, cursor: Optional[dict], now: datetime
    ) -> tuple[list[Submission], dict]:
        """Ingest new artifacts from a scanned submission tree.

        Layout: ``<root>/<stage_id>/<team_token>/<artifact>.csv``. The
        cursor maps artifact path to content digest; an artifact is
        ingested at most once per (path, digest), so re-scans of an
        unchanged tree yield nothing and a rewritten file counts as a new
        submission. Artifacts that cannot be attributed (unknown token,
        inactive team, closed stage) are logged, remembered in the cursor
        and skipped. Unreadable files never crash the scan.
        """
        cursor = dict(cursor or {})
        root = Path(root)
        if not root.exists():
            return [], cursor

        candidates = []
        try:
            for stage_dir in sorted(root.iterdir()):
                if not stage_dir.is_dir():
                    continue
                for team_dir in sorted(stage_dir.iterdir()):
                    if not team_dir.is_dir():
                        continue
                    for artifact in sorted(team_dir.iterdir()):
                        if not artifact.is_file():
                            continue
                        if artifact.suffix != ARTIFACT_EXTENSION:
                            continue
                        try:
                            stat = artifact.stat()
                        except OSError as exc:
                            logger.warning("scan: cannot stat %s: %s", artifact, exc)
                            continue
                        candidates.append((stat.st_mtime, artifact, stage_dir.name, team_dir.name))
        except OSError as exc:
            logger.warning("scan: cannot walk %s: %s", root, exc)
            return [], cursor

        new_submissions = []
        for _mtime, artifact, stage_id, team_token in sorted(
            candidates, key=lambda item: (item[0], str(item[1]))
        ):
            key = str(artifact)
            try:
                payload = artifact.read_bytes()
            except OSError as exc:
                logger.warning("scan: cannot read %s: %s", artifact, exc)
                continue
            digest = hashlib.sha256(payload).hexdigest()
            if cursor.get(key) == digest:
                continue
            cursor[key] = digest

            team_id = self._registry.team_for_token(stage_id, team_token)
            if team_id is None:
                logger.warning("scan: unknown team token %r for stage %s", team_token, stage_id)
                continue
            try:
                submission = self.accept_submission(
                    team_id, stage_id, payload, now, source=SOURCE_SCAN
                )
            except IngestionError as exc:
                logger.warning("scan: skipping %s: %s", artifact, exc)
                continue
            new_submissions.append(submission)
        return new_submissions, cursor

    def enforce_preliminary_deadline(self, stage: StageConfig, now: datetime) -> list[str]:
        """Mark teams with zero submissions in the stage inactive.

        Effective at most once per stage; later invocations return [].
        """
        if stage.preliminary_deadline is None:
            raise ValueError(f"stage {stage.stage_id} has no preliminary deadline")
        if now < stage.preliminary_deadline:
            raise ValueError("preliminary deadline has not passed yet")
        with self._lock:
            if stage.stage_id in self._preliminary_enforced:
                return []
            submitted = {
                self._submissions[sid].team_id
                for sid in self._by_stage.get(stage.stage_id, [])
            }
            lapsed = [
                record.team_id
                for record in self._registry.teams()
                if record.status == STATUS_ACTIVE and record.team_id not in submitted
            ]
            for team_id in lapsed:
                self._registry.mark_inactive(team_id, "missed_preliminary")
            self._preliminary_enforced.add(stage.stage_id)
            self._write_state()
        return lapsed

    # -- queries --------------------------------------------------------------

    def submission(self, submission_id: int) -> Submission:
        with self._lock:
            try:
                return self._submissions[submission_id]
            except KeyError:
                raise IngestionError(f"unknown submission: {submission_id}") from None

    def for_stage(self, stage_id: str) -> list[Submission]:
        with self._lock:
            return [self._submissions[sid] for sid in self._by_stage.get(stage_id, [])]

    def quota_status(self, team_id: str, stage_id: str, now: datetime) -> dict:
        stage = self._config.stage(stage_id)
        with self._lock:
            used = self._count_today(team_id, stage_id, now)
        return {
            "limit": stage.daily_submission_limit,
            "used": used,
            "remaining": max(stage.daily_submission_limit - used, 0),
            "resets_at": self._next_reset(now),
        }

    # -- internals --------------------------------------------------------------

    def _local_day(self, at: datetime):
        return at.astimezone(self._config.zone()).date()

    def _next_reset(self, now: datetime) -> datetime:
        zone = self._config.zone()
        local = now.astimezone(zone)
        next_day = local.date() + timedelta(days=1)
        return datetime.combine(next_day, time.min, tzinfo=zone)

    def _count_today(self, team_id: str, stage_id: str, now: datetime) -> int:
        today = self._local_day(now)
        return sum(
            1
            for sid in self._by_stage.get(stage_id, [])
            if (sub := self._submissions[sid]).team_id == team_id
            and sub.source == SOURCE_API
            and self._local_day(sub.received_at) == today
        )

    def _submission_dir(self, submission: Submission) -> Path:
        return self._root / submission.stage_id / submission.team_id / str(submission.submission_id)

    def _persist(self, submission: Submission) -> None:
        directory = self._submission_dir(submission)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "payload").write_bytes(submission.payload)
        # the sidecar is written last and atomically: it commits the submission
        atomic_write_json(
            directory / "meta.json",
            {
                "submission_id": submission.submission_id,
                "team_id": submission.team_id,
                "stage_id": submission.stage_id,
                "received_at": format_rfc3339(submission.received_at),
                "payload_digest": submission.payload_digest,
                "source": submission.source,
                "channel": submission.channel,
                "duplicate": submission.duplicate,
            },
        )

    def _index(self, submission: Submission) -> None:
        self._submissions[submission.submission_id] = submission
        self._by_stage.setdefault(submission.stage_id, []).append(submission.submission_id)
        self._digests.add((submission.team_id, submission.stage_id, submission.payload_digest))

    def _write_state(self) -> None:
        atomic_write_json(
            self._state_path,
            {"preliminary_enforced": sorted(self._preliminary_enforced)},
        )

    def _reload(self) -> None:
        state = read_json(self._state_path, {})
        self._preliminary_enforced = set(state.get("preliminary_enforced", []))
        if not self._root.exists():
            return
        metas = []
        for meta_path in self._root.glob("*/*/*/meta.json"):
            try:
                meta = read_json(meta_path)
                payload = (meta_path.parent / "payload").read_bytes()
            except (OSError, ValueError) as exc:
                logger.warning("reload: skipping %s: %s", meta_path, exc)
                continue
            metas.append((meta, payload))
        metas.sort(key=lambda pair: pair[0]["submission_id"])
        for meta, payload in metas:
            submission = Submission(
                submission_id=meta["submission_id"],
                team_id=meta["team_id"],
                stage_id=meta["stage_id"],
                received_at=parse_rfc3339(meta["received_at"]),
                payload_digest=meta["payload_digest"],
                payload=payload,
                source=meta.get("source", SOURCE_API),
                channel=meta.get("channel"),
                duplicate=meta.get("duplicate", False),
            )
            self._index(submission)
            self._next_id = max(self._next_id, submission.submission_id + 1)
