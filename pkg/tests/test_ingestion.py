from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone

import pytest

from arena.ingestion import (
    PayloadTooLarge,
    QuotaExceeded,
    StageClosed,
    SubmissionStore,
    TeamInactive,
)
from arena.registry import Registry
from conftest import T0

PAYLOAD = b"user_id,item_id,rank\nu1,a,1\n"


@pytest.fixture
def registry(config, tmp_path):
    return Registry(config, tmp_path)


@pytest.fixture
def store(config, registry, tmp_path):
    return SubmissionStore(config, registry, tmp_path)


def new_team(registry, token, email):
    team_id, _ = registry.register_team(
        [(f"Member {token}", email)], {"stage1": token}, True, T0
    )
    return team_id


@pytest.fixture
def team(registry):
    return new_team(registry, "red-panda", "rp@example.org")


def test_accept_happy_path(store, team):
    submission = store.accept_submission(team, "stage1", PAYLOAD, T0)
    assert submission.submission_id == 1
    assert submission.payload_digest
    assert not submission.duplicate
    assert store.quota_status(team, "stage1", T0)["used"] == 1


def test_daily_limit_boundary(store, team, config):
    for n in range(10):
        store.accept_submission(team, "stage1", PAYLOAD + str(n).encode(), T0)
    with pytest.raises(QuotaExceeded) as err:
        store.accept_submission(team, "stage1", PAYLOAD, T0)
    # reset time reported in the official competition time zone
    assert err.value.reset_at.tzinfo is not None
    assert err.value.reset_at.utcoffset() == err.value.reset_at.astimezone(
        config.zone()
    ).utcoffset()
    assert err.value.reset_at > T0


def test_day_boundary_uses_official_time_zone(store, team):
    # 23:59 and 00:01 America/New_York fall on different local days
    before_midnight = datetime(2026, 3, 2, 4, 59, tzinfo=timezone.utc)
    after_midnight = datetime(2026, 3, 2, 5, 1, tzinfo=timezone.utc)
    for n in range(10):
        store.accept_submission(team, "stage1", PAYLOAD + str(n).encode(), before_midnight)
    with pytest.raises(QuotaExceeded):
        store.accept_submission(team, "stage1", PAYLOAD, before_midnight)
    fresh = store.accept_submission(team, "stage1", PAYLOAD, after_midnight)
    assert fresh.submission_id == 11


def test_stage_closed(store, team, config):
    at_close = config.stages[0].close
    with pytest.raises(StageClosed):
        store.accept_submission(team, "stage1", PAYLOAD, at_close)


def test_inactive_team_rejected(store, registry, team):
    registry.mark_inactive(team, "disqualified")
    with pytest.raises(TeamInactive):
        store.accept_submission(team, "stage1", PAYLOAD, T0)


def test_size_cap(config, registry, tmp_path, team):
    store = SubmissionStore(config, registry, tmp_path, size_cap=64)
    with pytest.raises(PayloadTooLarge):
        store.accept_submission(team, "stage1", b"x" * 65, T0)


def test_duplicate_payload_flagged_not_rejected(store, team):
    first = store.accept_submission(team, "stage1", PAYLOAD, T0)
    second = store.accept_submission(team, "stage1", PAYLOAD, T0)
    assert not first.duplicate
    assert second.duplicate
    assert second.submission_id > first.submission_id


def test_quota_safety_under_concurrency(store, team):
    results, errors = [], []
    barrier = threading.Barrier(50)

    def attempt(n):
        barrier.wait()
        try:
            results.append(store.accept_submission(team, "stage1", PAYLOAD + bytes([n]), T0))
        except QuotaExceeded as exc:
            errors.append(exc)

    threads = [threading.Thread(target=attempt, args=(n,)) for n in range(50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 10
    assert len(errors) == 40
    ids = sorted(s.submission_id for s in results)
    assert ids == list(range(1, 11))


def test_ids_monotone_with_received_at(store, team):
    from datetime import timedelta

    submissions = []
    for n in range(8):
        submissions.append(
            store.accept_submission(team, "stage1", PAYLOAD + bytes([n]), T0 + timedelta(seconds=n))
        )
    ids = [s.submission_id for s in submissions]
    times = [s.received_at for s in submissions]
    assert ids == sorted(ids)
    assert times == sorted(times)
    assert all(b > a for a, b in zip(ids, ids[1:]))


def test_reload_after_restart(config, registry, tmp_path, team):
    store = SubmissionStore(config, registry, tmp_path)
    original = store.accept_submission(team, "stage1", PAYLOAD, T0)

    reloaded = SubmissionStore(config, registry, tmp_path)
    copy = reloaded.submission(original.submission_id)
    assert copy.payload == PAYLOAD
    assert copy.payload_digest == original.payload_digest
    assert copy.received_at == original.received_at
    # ids keep increasing after reload
    again = reloaded.accept_submission(team, "stage1", PAYLOAD + b"2", T0)
    assert again.submission_id == original.submission_id + 1


class TestScanSource:
    def test_empty_directory(self, store, tmp_path):
        root = tmp_path / "incoming"
        root.mkdir()
        submissions, cursor = store.scan_source(root, {}, T0)
        assert submissions == []
        assert cursor == {}

    def test_single_new_artifact_then_idempotent_rescan(self, store, registry, team, tmp_path):
        root = tmp_path / "incoming"
        artifact_dir = root / "stage1" / "red-panda"
        artifact_dir.mkdir(parents=True)
        (artifact_dir / "results.csv").write_bytes(PAYLOAD)

        submissions, cursor = store.scan_source(root, {}, T0)
        assert len(submissions) == 1
        assert submissions[0].source == "scan"
        assert submissions[0].team_id == team

        again, cursor2 = store.scan_source(root, cursor, T0)
        assert again == []
        assert cursor2 == cursor

    def test_modified_artifact_is_new_submission(self, store, team, tmp_path):
        root = tmp_path / "incoming"
        artifact_dir = root / "stage1" / "red-panda"
        artifact_dir.mkdir(parents=True)
        artifact = artifact_dir / "results.csv"
        artifact.write_bytes(PAYLOAD)
        _, cursor = store.scan_source(root, {}, T0)
        artifact.write_bytes(PAYLOAD + b"u1,b,2\n")
        fresh, _ = store.scan_source(root, cursor, T0)
        assert len(fresh) == 1

    def test_unknown_token_skipped(self, store, tmp_path):
        root = tmp_path / "incoming"
        artifact_dir = root / "stage1" / "nobody"
        artifact_dir.mkdir(parents=True)
        (artifact_dir / "results.csv").write_bytes(PAYLOAD)
        submissions, cursor = store.scan_source(root, {}, T0)
        assert submissions == []
        # remembered: not retried forever
        assert len(cursor) == 1

    def test_non_artifact_files_ignored(self, store, team, tmp_path):
        root = tmp_path / "incoming"
        artifact_dir = root / "stage1" / "red-panda"
        artifact_dir.mkdir(parents=True)
        (artifact_dir / "notes.txt").write_text("not a result")
        submissions, _ = store.scan_source(root, {}, T0)
        assert submissions == []

    def test_ingestion_order_follows_mtime_then_path(self, store, team, tmp_path):
        import os

        root = tmp_path / "incoming"
        artifact_dir = root / "stage1" / "red-panda"
        artifact_dir.mkdir(parents=True)
        newer = artifact_dir / "a-newer.csv"
        older = artifact_dir / "z-older.csv"
        newer.write_bytes(PAYLOAD + b"1")
        older.write_bytes(PAYLOAD + b"2")
        os.utime(older, (1_000_000, 1_000_000))
        os.utime(newer, (2_000_000, 2_000_000))
        submissions, _ = store.scan_source(root, {}, T0)
        assert [s.payload[-1:] for s in submissions] == [b"2", b"1"]
        assert submissions[0].submission_id < submissions[1].submission_id


class TestPreliminaryDeadline:
    @pytest.fixture
    def deadline_config(self):
        import json

        from arena.config import load_config
        from conftest import make_config_doc

        doc = make_config_doc()
        doc["stages"][0]["preliminary_deadline"] = "2026-03-15T00:00:00Z"
        return load_config(json.dumps(doc).encode())

    def test_lapsed_team_marked_then_idempotent(self, deadline_config, tmp_path):
        registry = Registry(deadline_config, tmp_path)
        store = SubmissionStore(deadline_config, registry, tmp_path)
        submitting = new_team(registry, "red-panda", "alice@example.org")
        also_submitting = new_team(registry, "blue-fox", "bram@example.org")
        lapsed = new_team(registry, "green-owl", "chio@example.org")

        deadline = deadline_config.stages[0].preliminary_deadline
        store.accept_submission(submitting, "stage1", PAYLOAD, T0)
        # one second before the deadline still counts
        store.accept_submission(
            also_submitting, "stage1", PAYLOAD, deadline - timedelta(seconds=1)
        )

        marked = store.enforce_preliminary_deadline(deadline_config.stages[0], deadline)
        assert marked == [lapsed]
        assert registry.team(lapsed).status == "inactive_missed_preliminary"
        assert registry.team(also_submitting).status == "active"

        assert store.enforce_preliminary_deadline(deadline_config.stages[0], deadline) == []

    def test_enforcement_persists_across_restart(self, deadline_config, tmp_path):
        registry = Registry(deadline_config, tmp_path)
        store = SubmissionStore(deadline_config, registry, tmp_path)
        new_team(registry, "red-panda", "alice@example.org")
        deadline = deadline_config.stages[0].preliminary_deadline
        assert store.enforce_preliminary_deadline(deadline_config.stages[0], deadline) != []

        reloaded = SubmissionStore(deadline_config, registry, tmp_path)
        assert reloaded.enforce_preliminary_deadline(deadline_config.stages[0], deadline) == []
