from __future__ import annotations

import sys
from datetime import datetime, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from arena.clock import VirtualClock
from arena.config import load_config


T0 = datetime(2026, 3, 1, 12, 0, 0, tzinfo=timezone.utc)


def make_config_doc(**overrides):
    """A small, valid competition definition the tests mutate at will."""
    doc = {
        "competition_id": "demo",
        "title": "Demo Competition",
        "official_time_zone": "America/New_York",
        "registration_window": {"open": "2026-02-01T00:00:00Z", "close": "2026-06-01T00:00:00Z"},
        "data_manifest": [],
        "badge_rules": [],
        "stages": [
            {
                "stage_id": "stage1",
                "kind": "ranking_task",
                "open": "2026-03-01T00:00:00Z",
                "close": "2026-04-01T00:00:00Z",
                "daily_submission_limit": 10,
                "aggregation_cadence_s": 1,
                "evaluators": [
                    {
                        "version": 1,
                        "metric": "map_at_k",
                        "parameters": {"k": 10, "relevance_universe": "all_interactions"},
                    },
                    {
                        "version": 2,
                        "metric": "map_at_k",
                        "parameters": {"k": 10, "relevance_universe": "test_only"},
                    },
                ],
            }
        ],
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def clock():
    return VirtualClock(T0)


@pytest.fixture
def config():
    import json

    return load_config(json.dumps(make_config_doc()).encode())
