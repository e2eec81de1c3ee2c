"""Team registration, credential issuance, and the per-stage anonymity
token scheme.

Private identity (names, emails) lives only here. The single public
identifier for a team is its stage token, returned by
resolve_display_name; nothing else in this module may leak into a public
payload. Tokens are never joined across stages in public output, which is
what keeps teams unlinkable between stages.

Persistence is an append-only JSONL event log plus a current-state file
under ``<data_dir>/registry/`` (layout in docs/storage.md). The log is
the source of truth; state.json is a convenience snapshot.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
from base64 import b32encode
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Optional

from .clock import format_rfc3339, parse_rfc3339
from .config import CompetitionConfig
from .storage import append_jsonl, atomic_write_json, read_jsonl

STATUS_ACTIVE = "active"
STATUS_INACTIVE_MISSED_PRELIMINARY = "inactive_missed_preliminary"
STATUS_DISQUALIFIED = "disqualified"

_INACTIVE_REASONS = {
    "missed_preliminary": STATUS_INACTIVE_MISSED_PRELIMINARY,
    "disqualified": STATUS_DISQUALIFIED,
}


class RegistryError(Exception):
    pass


class RegistrationClosed(RegistryError):
    pass


class RulesNotAccepted(RegistryError):
    pass


class TokenCollision(RegistryError):
    """Names the stage only, never the team already holding the token."""

    def __init__(self, stage_id: str):
        self.stage_id = stage_id
        super().__init__(f"token already taken for stage {stage_id}")


class TokenPolicyError(RegistryError):
    pass


class DuplicateMember(RegistryError):
    pass


class UnknownTeam(RegistryError):
    pass


class UnknownStage(RegistryError):
    pass


class UnknownCredential(RegistryError):
    """Uniform error: deliberately carries no hint of which check failed."""

    def __init__(self):
        super().__init__("unknown credential")


@dataclass(frozen=True)
class TeamRecord:
    team_id: str
    member_contacts: tuple[tuple[str, str], ...]  # (name, email); private
    rules_accepted_at: datetime
    credential_salt: str  # hex
    credential_digest: str  # hex, sha256(salt || credential)
    tokens: dict[str, str]  # stage_id -> display token
    status: str = STATUS_ACTIVE


def _new_credential() -> str:
    # 256-bit random value, base32 without padding: easy to copy, no
    # ambiguous characters
    return b32encode(secrets.token_bytes(32)).decode("ascii").rstrip("=")


def _digest(salt_hex: str, credential: str) -> str:
    return hashlib.sha256(bytes.fromhex(salt_hex) + credential.encode("utf-8")).hexdigest()


def _token_ok(token: str) -> bool:
    return 1 <= len(token) <= 32 and token.isprintable()


class Registry:
    """Fig-2 style "team metadata" store with a single serialized writer."""

    def __init__(self, config: CompetitionConfig, data_dir: Path):
        self._config = config
        self._dir = Path(data_dir) / "registry"
        self._log_path = self._dir / "log.jsonl"
        self._state_path = self._dir / "state.json"
        self._lock = threading.RLock()
        self._teams: dict[str, TeamRecord] = {}
        self._token_index: dict[tuple[str, str], str] = {}  # (stage, token.lower()) -> team
        self._email_index: dict[str, str] = {}  # email.lower() -> team
        self._replay()

    # -- queries ------------------------------------------------------------

    def team(self, team_id: str) -> TeamRecord:
        with self._lock:
            record = self._teams.get(team_id)
        if record is None:
            raise UnknownTeam(f"unknown team: {team_id}")
        return record

    def teams(self) -> list[TeamRecord]:
        with self._lock:
            return list(self._teams.values())

    def team_count(self) -> int:
        with self._lock:
            return len(self._teams)

    def resolve_display_name(self, team_id: str, stage_id: str) -> str:
        """The ONLY team-identifying string a public payload may carry."""
        record = self.team(team_id)
        if not self._config.has_stage(stage_id):
            raise UnknownStage(f"unknown stage: {stage_id}")
        token = record.tokens.get(stage_id)
        if token is None:
            raise UnknownStage(f"team holds no token for stage {stage_id}")
        return token

    def team_for_token(self, stage_id: str, token: str) -> Optional[str]:
        with self._lock:
            return self._token_index.get((stage_id, token.lower()))

    def authenticate(self, credential: str) -> str:
        """Map a plaintext credential to its team id.

        Every stored digest is checked with a constant-time comparison and
        the error is uniform, so a caller cannot distinguish "no such
        credential" from "wrong credential".
        """
        if not isinstance(credential, str):
            raise UnknownCredential()
        with self._lock:
            records = list(self._teams.values())
        matched: Optional[str] = None
        for record in records:
            candidate = _digest(record.credential_salt, credential)
            if hmac.compare_digest(candidate, record.credential_digest):
                matched = record.team_id
        if matched is None:
            raise UnknownCredential()
        return matched

    # -- writes -------------------------------------------------------------

    def register_team(
        self,
        contacts: list[tuple[str, str]],
        tokens: dict[str, str],
        accept_rules: bool,
        now: datetime,
        *,
        enforce_window: bool = True,
    ) -> tuple[str, str]:
        """Create a team; returns (team_id, plaintext credential).

        The credential is shown exactly once; only its salted digest is
        stored. enforce_window=False is the organizer override path.
        """
        if not accept_rules:
            raise RulesNotAccepted("rules not accepted")
        if enforce_window:
            opens, closes = self._config.registration_window
            if not (opens <= now < closes):
                raise RegistrationClosed("registration closed")
        if not contacts:
            raise RegistryError("at least one member contact required")

        stage_ids = {s.stage_id for s in self._config.stages}
        supplied = set(tokens)
        if supplied != stage_ids:
            missing = sorted(stage_ids - supplied)
            extra = sorted(supplied - stage_ids)
            parts = []
            if missing:
                parts.append(f"missing tokens for stages: {', '.join(missing)}")
            if extra:
                parts.append(f"tokens for unknown stages: {', '.join(extra)}")
            raise TokenPolicyError("; ".join(parts))

        with self._lock:
            for _name, email in contacts:
                if email.lower() in self._email_index:
                    # deliberately does not echo the address: registration
                    # errors travel back over a public route
                    raise DuplicateMember(
                        "a supplied member already belongs to a registered team"
                    )
            lowered = [t.lower() for t in tokens.values()]
            if len(set(lowered)) != len(lowered):
                raise TokenPolicyError("stage tokens must differ from each other")
            for stage_id, token in tokens.items():
                self._check_token(stage_id, token, contacts)

            team_id = "t-" + secrets.token_hex(8)
            credential = _new_credential()
            salt = secrets.token_hex(16)
            record = TeamRecord(
                team_id=team_id,
                member_contacts=tuple((n, e) for n, e in contacts),
                rules_accepted_at=now,
                credential_salt=salt,
                credential_digest=_digest(salt, credential),
                tokens=dict(tokens),
                status=STATUS_ACTIVE,
            )
            self._commit({"event": "registered", "team": self._serialize(record)})
            self._index(record)
        return team_id, credential

    def mark_inactive(self, team_id: str, reason: str) -> TeamRecord:
        """Transition to an inactive/disqualified status. Idempotent."""
        status = _INACTIVE_REASONS.get(reason)
        if status is None:
            raise RegistryError(f"unknown inactivation reason: {reason}")
        return self._set_status(team_id, status, reason)

    def reinstate(self, team_id: str) -> TeamRecord:
        """Organizer override: back to active."""
        return self._set_status(team_id, STATUS_ACTIVE, "reinstated")

    def replace_token(self, team_id: str, stage_id: str, token: str) -> TeamRecord:
        """Organizer-mediated token change (re-pairing support)."""
        with self._lock:
            record = self.team(team_id)
            if not self._config.has_stage(stage_id):
                raise UnknownStage(f"unknown stage: {stage_id}")
            self._check_token(stage_id, token, list(record.member_contacts), exclude_team=team_id)
            old = record.tokens.get(stage_id)
            new_tokens = dict(record.tokens)
            new_tokens[stage_id] = token
            updated = replace(record, tokens=new_tokens)
            self._commit(
                {
                    "event": "token_changed",
                    "team_id": team_id,
                    "stage_id": stage_id,
                    "token": token,
                }
            )
            if old is not None:
                self._token_index.pop((stage_id, old.lower()), None)
            self._teams[team_id] = updated
            self._token_index[(stage_id, token.lower())] = team_id
            self._write_state()
        return updated

    # -- internals ----------------------------------------------------------

    def _set_status(self, team_id: str, status: str, reason: str) -> TeamRecord:
        with self._lock:
            record = self.team(team_id)
            if record.status == status:
                return record  # idempotent
            updated = replace(record, status=status)
            self._commit(
                {
                    "event": "status_changed",
                    "team_id": team_id,
                    "status": status,
                    "reason": reason,
                }
            )
            self._teams[team_id] = updated
            self._write_state()
        return updated

    def _check_token(
        self,
        stage_id: str,
        token: str,
        contacts: list[tuple[str, str]],
        exclude_team: Optional[str] = None,
    ) -> None:
        if not self._config.has_stage(stage_id):
            raise UnknownStage(f"unknown stage: {stage_id}")
        if not _token_ok(token):
            raise TokenPolicyError(
                f"token for stage {stage_id} must be 1-32 printable characters"
            )
        holder = self._token_index.get((stage_id, token.lower()))
        if holder is not None and holder != exclude_team:
            raise TokenCollision(stage_id)

        # anonymity: token must not contain any registered member's name or
        # email local-part (the team's own members included)
        lowered = token.lower()
        all_contacts = list(contacts)
        for record in self._teams.values():
            all_contacts.extend(record.member_contacts)
        for name, email in all_contacts:
            name = name.strip().lower()
            local = email.split("@", 1)[0].strip().lower()
            for fragment in (name, local):
                if fragment and fragment in lowered:
                    raise TokenPolicyError(
                        f"token for stage {stage_id} must not contain a member name or email"
                    )

    def _index(self, record: TeamRecord) -> None:
        self._teams[record.team_id] = record
        for stage_id, token in record.tokens.items():
            self._token_index[(stage_id, token.lower())] = record.team_id
        for _name, email in record.member_contacts:
            self._email_index[email.lower()] = record.team_id
        self._write_state()

    def _commit(self, event: dict) -> None:
        append_jsonl(self._log_path, event)

    def _write_state(self) -> None:
        atomic_write_json(
            self._state_path,
            {"teams": [self._serialize(r) for r in self._teams.values()]},
        )

    @staticmethod
    def _serialize(record: TeamRecord) -> dict:
        return {
            "team_id": record.team_id,
            "member_contacts": [{"name": n, "email": e} for n, e in record.member_contacts],
            "rules_accepted_at": format_rfc3339(record.rules_accepted_at),
            "credential_salt": record.credential_salt,
            "credential_digest": record.credential_digest,
            "tokens": record.tokens,
            "status": record.status,
        }

    @staticmethod
    def _deserialize(doc: dict) -> TeamRecord:
        return TeamRecord(
            team_id=doc["team_id"],
            member_contacts=tuple((c["name"], c["email"]) for c in doc["member_contacts"]),
            rules_accepted_at=parse_rfc3339(doc["rules_accepted_at"]),
            credential_salt=doc["credential_salt"],
            credential_digest=doc["credential_digest"],
            tokens=dict(doc["tokens"]),
            status=doc["status"],
        )

    def _replay(self) -> None:
        for event in read_jsonl(self._log_path):
            kind = event.get("event")
            if kind == "registered":
                record = self._deserialize(event["team"])
                self._teams[record.team_id] = record
                for stage_id, token in record.tokens.items():
                    self._token_index[(stage_id, token.lower())] = record.team_id
                for _name, email in record.member_contacts:
                    self._email_index[email.lower()] = record.team_id
            elif kind == "status_changed":
                team_id = event["team_id"]
                if team_id in self._teams:
                    self._teams[team_id] = replace(self._teams[team_id], status=event["status"])
            elif kind == "token_changed":
                team_id = event["team_id"]
                if team_id in self._teams:
                    record = self._teams[team_id]
                    old = record.tokens.get(event["stage_id"])
                    if old is not None:
                        self._token_index.pop((event["stage_id"], old.lower()), None)
                    new_tokens = dict(record.tokens)
                    new_tokens[event["stage_id"]] = event["token"]
                    self._teams[team_id] = replace(record, tokens=new_tokens)
                    self._token_index[(event["stage_id"], event["token"].lower())] = team_id
