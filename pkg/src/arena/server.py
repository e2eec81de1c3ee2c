"""Public HTTP surface: registration, data distribution, submission
intake, leaderboards, badges, and the organizer admin endpoint.

Route map (JSON bodies unless noted):

    POST /api/register
    POST /api/submissions/{stage}        raw CSV payload body
    GET  /api/leaderboard/{stage}?format=csv|json[&frozen=label]
    GET  /api/data/{file}
    GET  /api/badges/{stage}
    GET  /api/quota/{stage}
    POST /api/admin/{action}             organizer bearer token

Teams authenticate with their registration credential as a bearer token;
leaderboards and badges are public. Responses never carry member contacts
or internal team ids: display tokens are the only team identifier that
leaves this process.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import config as config_mod
from .aggregator import (
    CSV_HEADER,
    AggregatorError,
    BadTwistVersion,
    FreezeLabelTaken,
    NoLiveSnapshot,
)
from .clock import format_rfc3339
from .config import METRIC_MAP_AT_K
from .evaluation import INSTANCE_LOG_HEADER, RANKING_HEADER
from .ingestion import (
    IngestionError,
    PayloadTooLarge,
    QuotaExceeded,
    StageClosed,
    TeamInactive,
)
from .registry import (
    DuplicateMember,
    RegistrationClosed,
    RegistryError,
    RulesNotAccepted,
    TokenCollision,
    TokenPolicyError,
    UnknownCredential,
    UnknownStage,
    UnknownTeam,
)
from .runtime import CompetitionRuntime

ADMIN_ACTIONS = (
    "freeze",
    "twist",
    "badge_grant",
    "reinstate",
    "registration_override",
    "verify_drain",
    "verification_status",
    "audit_log",
    "export",
)


def _error(status: int, message: str, **extra) -> JSONResponse:
    payload = {"error": message}
    payload.update(extra)
    return JSONResponse(status_code=status, content=payload)


def _bearer(request: Request) -> Optional[str]:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header[7:].strip()
    return None


def create_app(runtime: CompetitionRuntime) -> FastAPI:
    app = FastAPI(title=runtime.config.title, docs_url=None, redoc_url=None)
    config = runtime.config
    registry = runtime.registry
    store = runtime.store
    aggregator = runtime.aggregator

    def team_principal(request: Request) -> Optional[str]:
        credential = _bearer(request)
        if credential is None:
            return None
        try:
            return registry.authenticate(credential)
        except UnknownCredential:
            return None

    def is_organizer(request: Request) -> bool:
        token = _bearer(request)
        return bool(token) and token == runtime.organizer_token

    def expected_header(stage_id: str) -> list[str]:
        stage = config.stage(stage_id)
        version = aggregator.current_version(stage_id)
        if stage.evaluator(version).metric == METRIC_MAP_AT_K:
            return RANKING_HEADER
        return INSTANCE_LOG_HEADER

    # -- public routes ---------------------------------------------------------

    @app.post("/api/register")
    async def register(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(422, "request body must be JSON")
        contacts = [
            (entry.get("name", ""), entry.get("email", ""))
            for entry in body.get("contacts", [])
        ]
        tokens = body.get("tokens", {})
        if not isinstance(tokens, dict):
            return _error(422, "tokens must map stage ids to display names")
        try:
            _team_id, credential = registry.register_team(
                contacts, tokens, bool(body.get("accept_rules")), runtime.clock.now()
            )
        except RegistrationClosed as exc:
            return _error(403, str(exc))
        except RulesNotAccepted as exc:
            return _error(422, str(exc))
        except TokenCollision as exc:
            return _error(409, str(exc), stage=exc.stage_id)
        except (TokenPolicyError, UnknownStage) as exc:
            return _error(422, str(exc))
        except DuplicateMember as exc:
            return _error(409, str(exc))
        except RegistryError as exc:
            return _error(422, str(exc))
        # the credential is shown exactly once, here
        return {"credential": credential}

    @app.get("/api/leaderboard/{stage_id}")
    def leaderboard(stage_id: str, format: str = "json", frozen: Optional[str] = None):
        if not config.has_stage(stage_id):
            return _error(404, f"unknown stage: {stage_id}")
        if format not in ("json", "csv"):
            return _error(422, "format must be csv or json")

        if frozen is not None:
            snapshot = aggregator.frozen_snapshot(frozen)
            if snapshot is None or snapshot.stage_id != stage_id:
                return _error(404, f"unknown frozen label: {frozen}")
        else:
            snapshot = aggregator.latest_live_snapshot(stage_id)

        if format == "csv":
            text = snapshot.csv_text if snapshot else ",".join(CSV_HEADER) + "\n"
            return Response(content=text, media_type="text/csv; charset=utf-8")

        if snapshot is None:
            payload = {
                "snapshot_id": None,
                "created_at": None,
                "stage_id": stage_id,
                "evaluator_version": aggregator.current_version(stage_id),
                "frozen": False,
                "freeze_label": None,
                "rows": [],
            }
        else:
            payload = snapshot.json_payload()
        payload["frozen_labels"] = [
            label
            for label in aggregator.frozen_labels()
            if (s := aggregator.frozen_snapshot(label)) and s.stage_id == stage_id
        ]
        return payload

    @app.get("/api/badges/{stage_id}")
    def badges(stage_id: str):
        if not config.has_stage(stage_id):
            return _error(404, f"unknown stage: {stage_id}")
        awards = []
        for award in aggregator.badge_awards(stage_id):
            try:
                display = registry.resolve_display_name(award.team_id, stage_id)
            except (UnknownTeam, UnknownStage):
                continue
            awards.append(
                {
                    "badge_id": award.badge_id,
                    "team": display,
                    "awarded_at": format_rfc3339(award.awarded_at),
                    "origin": award.origin,
                }
            )
        return {"stage_id": stage_id, "awards": awards}

    @app.get("/api/data/{file_name}")
    def serve_data(file_name: str, request: Request):
        entry = config.manifest_entry(file_name)
        if entry is None:
            return _error(404, "no such file")  # no directory listing leakage
        if entry.visibility == "registered" and team_principal(request) is None:
            return _error(401, "authentication required")
        path = runtime.data_dir / "datafiles" / entry.name
        if not path.exists():
            return _error(404, "file not available")
        media = "text/csv; charset=utf-8" if entry.name.endswith(".csv") else "application/octet-stream"
        return Response(
            content=path.read_bytes(),
            media_type=media,
            headers={"X-Content-Digest": f"sha256:{entry.sha256}"},
        )

    # -- authenticated team routes ----------------------------------------------

    @app.post("/api/submissions/{stage_id}")
    async def submit(stage_id: str, request: Request):
        team_id = team_principal(request)
        if team_id is None:
            return _error(401, "authentication required")
        if not config.has_stage(stage_id):
            return _error(404, f"unknown stage: {stage_id}")
        payload = await request.body()

        # eager format check: reject payloads that cannot even be parsed as
        # the stage's CSV wire format before they consume quota
        try:
            first_line = payload.decode("utf-8").splitlines()[0]
        except (UnicodeDecodeError, IndexError):
            return _error(422, "payload must be non-empty UTF-8 CSV")
        header = [cell.strip() for cell in first_line.split(",")]
        if header != expected_header(stage_id):
            return _error(
                422,
                f"payload header must be {','.join(expected_header(stage_id))!r}",
            )

        channel = request.headers.get("x-arena-channel")
        try:
            submission = store.accept_submission(
                team_id, stage_id, payload, runtime.clock.now(), channel=channel
            )
        except TeamInactive as exc:
            return _error(403, str(exc))
        except StageClosed as exc:
            return _error(409, str(exc))
        except QuotaExceeded as exc:
            return _error(
                429,
                str(exc),
                resets_at=exc.reset_at.isoformat(),
                limit=exc.limit,
            )
        except PayloadTooLarge as exc:
            return _error(413, str(exc))
        except IngestionError as exc:
            return _error(422, str(exc))

        quota = store.quota_status(team_id, stage_id, runtime.clock.now())
        return {
            "submission_id": submission.submission_id,
            "duplicate": submission.duplicate,
            "quota": {
                "limit": quota["limit"],
                "used": quota["used"],
                "remaining": quota["remaining"],
                "resets_at": quota["resets_at"].isoformat(),
            },
            # feedback arrives via the leaderboard, not the receipt
            "status_url": f"/api/leaderboard/{stage_id}?format=json",
        }

    @app.get("/api/quota/{stage_id}")
    def quota(stage_id: str, request: Request):
        team_id = team_principal(request)
        if team_id is None:
            return _error(401, "authentication required")
        if not config.has_stage(stage_id):
            return _error(404, f"unknown stage: {stage_id}")
        status = store.quota_status(team_id, stage_id, runtime.clock.now())
        return {
            "stage_id": stage_id,
            "limit": status["limit"],
            "used": status["used"],
            "remaining": status["remaining"],
            "resets_at": status["resets_at"].isoformat(),
        }

    # -- organizer admin ----------------------------------------------------------

    @app.post("/api/admin/{action}")
    async def admin(action: str, request: Request):
        if not is_organizer(request):
            return _error(403, "organizer credentials required")
        if action not in ADMIN_ACTIONS:
            return _error(404, f"unknown admin action: {action}")
        try:
            body = await request.json()
        except json.JSONDecodeError:
            body = {}

        try:
            result = _run_admin_action(runtime, action, body)
        except (FreezeLabelTaken,) as exc:
            runtime.audit("organizer", action, body, f"rejected: {exc}")
            return _error(409, str(exc))
        except (BadTwistVersion, NoLiveSnapshot, AggregatorError) as exc:
            runtime.audit("organizer", action, body, f"rejected: {exc}")
            return _error(422, str(exc))
        except (KeyError, UnknownStage, UnknownTeam) as exc:
            runtime.audit("organizer", action, body, f"rejected: {exc}")
            return _error(404, str(exc))
        except (RegistryError, ValueError) as exc:
            runtime.audit("organizer", action, body, f"rejected: {exc}")
            return _error(422, str(exc))

        if isinstance(result, Response):
            runtime.audit("organizer", action, body, "ok")
            return result
        runtime.audit("organizer", action, body, "ok")
        return result

    # -- optional static UI bundle ---------------------------------------------------

    if runtime.ui_dir and runtime.ui_dir.exists():

        @app.get("/ui/config.json")
        def ui_config():
            return {
                "title": config.title,
                "discussion_url": config.discussion_url,
                "stages": [
                    {
                        "stage_id": stage.stage_id,
                        "kind": stage.kind,
                        "open": format_rfc3339(stage.open),
                        "close": format_rfc3339(stage.close),
                        "aggregation_cadence_s": stage.aggregation_cadence_s,
                    }
                    for stage in config.stages
                ],
            }

        app.mount("/ui", StaticFiles(directory=runtime.ui_dir, html=True), name="ui")

    return app


def _run_admin_action(runtime: CompetitionRuntime, action: str, body: dict):
    aggregator = runtime.aggregator
    registry = runtime.registry

    if action == "freeze":
        snapshot = aggregator.freeze(body["stage"], body["label"])
        return {
            "frozen": True,
            "label": snapshot.freeze_label,
            "snapshot_id": snapshot.snapshot_id,
            "stage_id": snapshot.stage_id,
        }

    if action == "twist":
        result = aggregator.apply_twist(body["stage"], int(body["version"]))
        return result

    if action == "badge_grant":
        team_id = _team_from_token(registry, body["stage"], body["team"])
        award = aggregator.grant_badge(body["stage"], team_id, body["badge_id"])
        return {
            "granted": award is not None,
            "badge_id": body["badge_id"],
            "team": body["team"],
            "stage_id": body["stage"],
        }

    if action == "reinstate":
        team_id = _team_from_token(registry, body["stage"], body["team"])
        record = registry.reinstate(team_id)
        return {"team": body["team"], "status": record.status}

    if action == "registration_override":
        if body.get("mode") == "replace_token":
            team_id = _team_from_token(registry, body["stage"], body["team"])
            registry.replace_token(team_id, body["stage"], body["new_token"])
            return {"team": body["new_token"], "stage_id": body["stage"]}
        contacts = [(c.get("name", ""), c.get("email", "")) for c in body.get("contacts", [])]
        _team_id, credential = registry.register_team(
            contacts,
            body.get("tokens", {}),
            bool(body.get("accept_rules", True)),
            runtime.clock.now(),
            enforce_window=False,
        )
        return {"credential": credential}

    if action == "verify_drain":
        return aggregator.drain_verification(runtime.clock.now())

    if action == "verification_status":
        return aggregator.verification_status()

    if action == "audit_log":
        return {"entries": runtime.audit_entries()}

    if action == "export":
        stage_id = body["stage"]
        runtime.config.stage(stage_id)
        return Response(
            content=_export_bundle(runtime, stage_id),
            media_type="application/zip",
            headers={"Content-Disposition": f'attachment; filename="{stage_id}-export.zip"'},
        )

    raise KeyError(action)


def _team_from_token(registry, stage_id: str, token: str) -> str:
    team_id = registry.team_for_token(stage_id, token)
    if team_id is None:
        raise UnknownTeam(f"no team holds token {token!r} in stage {stage_id}")
    return team_id


def _export_bundle(runtime: CompetitionRuntime, stage_id: str) -> bytes:
    """Zip of everything an organizer needs to archive or audit a stage."""
    aggregator = runtime.aggregator
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", zipfile.ZIP_DEFLATED) as bundle:
        bundle.writestr("config.json", config_mod.dump_config(runtime.config))
        bundle.writestr(
            "audit.jsonl",
            "".join(json.dumps(e, sort_keys=True) + "\n" for e in runtime.audit_entries()),
        )
        live = aggregator.latest_live_snapshot(stage_id)
        if live is not None:
            bundle.writestr(f"boards/{stage_id}-live.csv", live.csv_text)
        for label in aggregator.frozen_labels():
            snapshot = aggregator.frozen_snapshot(label)
            if snapshot and snapshot.stage_id == stage_id:
                bundle.writestr(f"boards/frozen-{label}.csv", snapshot.csv_text)
        awards = [
            {
                "badge_id": award.badge_id,
                "team": runtime.registry.resolve_display_name(award.team_id, stage_id),
                "awarded_at": format_rfc3339(award.awarded_at),
                "origin": award.origin,
            }
            for award in aggregator.badge_awards(stage_id)
        ]
        bundle.writestr("badges.json", json.dumps(awards, indent=2, sort_keys=True))
        records = [
            {
                "submission_id": record.submission_id,
                "evaluator_version": record.evaluator_version,
                "primary_score": record.primary_score,
                "verification": record.verification,
            }
            for record in aggregator.score_records(stage_id)
        ]
        bundle.writestr("scores.json", json.dumps(records, indent=2, sort_keys=True))
    return buffer.getvalue()
