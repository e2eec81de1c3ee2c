"""Declarative competition definition: loading, validation, and queries.

A competition is a single UTF-8 JSON document (schema in
docs/config-schema.md). The loaded value is immutable; every other module
reads it and nothing mutates it. Timestamps are RFC 3339 and normalized
to UTC on load; the official time zone only matters for daily-quota day
boundaries and display.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import BinaryIO, Optional, Union
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

from .clock import format_rfc3339, parse_rfc3339

RANKING_TASK = "ranking_task"
INSTANCE_TASK = "instance_task"
METRIC_MAP_AT_K = "map_at_k"
METRIC_INSTANCE_LOG = "instance_log"

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
_IDENTIFIER_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class ConfigError(ValueError):
    """Config parse or validation failure. `path` is the JSON field path
    of the offending value, e.g. "stages[1].open"."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class EvaluatorSpec:
    version: int
    metric: str
    # map_at_k: k, relevance_universe (all_interactions | test_only),
    #           list_filter (bool), verification (deferred | none)
    # instance_log: benchmark_manifest (data file name),
    #               objective_sense (instance -> min | max), verification
    parameters: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.parameters["k"])

    @property
    def relevance_universe(self) -> str:
        return self.parameters.get("relevance_universe", "all_interactions")

    @property
    def list_filter(self) -> bool:
        return bool(self.parameters.get("list_filter", False))

    @property
    def objective_sense(self) -> dict:
        return self.parameters.get("objective_sense", {})

    @property
    def instance_names(self) -> tuple:
        return tuple(self.objective_sense.keys())

    @property
    def verification(self) -> str:
        return self.parameters.get("verification", "deferred")


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    kind: str
    open: datetime
    close: datetime
    daily_submission_limit: int
    aggregation_cadence_s: int
    evaluators: tuple[EvaluatorSpec, ...]
    preliminary_deadline: Optional[datetime] = None
    baseline_score: Optional[float] = None

    def evaluator(self, version: int) -> EvaluatorSpec:
        for spec in self.evaluators:
            if spec.version == version:
                return spec
        raise KeyError(f"stage {self.stage_id} has no evaluator version {version}")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    sha256: str
    visibility: str  # public | registered


@dataclass(frozen=True)
class BadgeRule:
    badge_id: str
    display_name: str
    trigger: str  # first_submission | first_past_baseline | custom
    predicate: Optional[str] = None  # custom predicate name, when trigger=custom


@dataclass(frozen=True)
class CompetitionConfig:
    competition_id: str
    title: str
    official_time_zone: str
    registration_window: tuple[datetime, datetime]
    stages: tuple[StageConfig, ...]
    data_manifest: tuple[ManifestEntry, ...] = ()
    badge_rules: tuple[BadgeRule, ...] = ()
    discussion_url: Optional[str] = None

    def zone(self) -> ZoneInfo:
        return ZoneInfo(self.official_time_zone)

    def stage(self, stage_id: str) -> StageConfig:
        for stage in self.stages:
            if stage.stage_id == stage_id:
                return stage
        raise KeyError(f"unknown stage: {stage_id}")

    def has_stage(self, stage_id: str) -> bool:
        return any(s.stage_id == stage_id for s in self.stages)

    def manifest_entry(self, name: str) -> Optional[ManifestEntry]:
        for entry in self.data_manifest:
            if entry.name == name:
                return entry
        return None


def load_config(source: Union[bytes, str, BinaryIO]) -> CompetitionConfig:
    """Parse and validate a competition definition.

    Raises ConfigError with a field path on any malformed or
    invariant-violating input. Deterministic: identical bytes always
    produce structurally identical configs.
    """
    if hasattr(source, "read"):
        raw = source.read()
    else:
        raw = source
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError("$", f"config is not valid UTF-8: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("$", "top-level value must be an object")
    return _validate(doc)


def load_config_file(path) -> CompetitionConfig:
    with open(path, "rb") as f:
        return load_config(f)


def dump_config(config: CompetitionConfig) -> str:
    """Serialize back to the documented JSON format. load(dump(c)) == c."""
    doc = {
        "competition_id": config.competition_id,
        "title": config.title,
        "official_time_zone": config.official_time_zone,
        "registration_window": {
            "open": format_rfc3339(config.registration_window[0]),
            "close": format_rfc3339(config.registration_window[1]),
        },
        "stages": [_dump_stage(s) for s in config.stages],
        "data_manifest": [
            {"name": e.name, "sha256": e.sha256, "visibility": e.visibility}
            for e in config.data_manifest
        ],
        "badge_rules": [_dump_badge_rule(r) for r in config.badge_rules],
    }
    if config.discussion_url is not None:
        doc["discussion_url"] = config.discussion_url
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def active_stage(config: CompetitionConfig, now: datetime) -> Optional[str]:
    """The unique stage whose [open, close) interval contains now, if any.
    Comparison happens in UTC; non-overlap makes the answer unique."""
    if now.tzinfo is None:
        raise ValueError("now must be timezone-aware")
    at = now.astimezone(ZoneInfo("UTC"))
    for stage in config.stages:
        if stage.open <= at < stage.close:
            return stage.stage_id
    return None


# -- validation -------------------------------------------------------------


def _require(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(_join(path, key), "expected a number")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(_join(path, key), "expected an integer")
        return value
    if not isinstance(value, kind):
        raise ConfigError(_join(path, key), f"expected {kind.__name__}")
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _timestamp(doc: dict, key: str, path: str) -> datetime:
    text = _require(doc, key, str, path)
    try:
        return parse_rfc3339(text)
    except ValueError as exc:
        raise ConfigError(_join(path, key), str(exc)) from exc


def _identifier(doc: dict, key: str, path: str) -> str:
    value = _require(doc, key, str, path)
    if not _IDENTIFIER_RE.match(value):
        raise ConfigError(_join(path, key), f"not a valid identifier: {value!r}")
    return value


def _validate(doc: dict) -> CompetitionConfig:
    competition_id = _identifier(doc, "competition_id", "")
    title = _require(doc, "title", str, "")

    zone_name = _require(doc, "official_time_zone", str, "")
    try:
        ZoneInfo(zone_name)
    except (ZoneInfoNotFoundError, ValueError) as exc:
        raise ConfigError("official_time_zone", f"unknown time zone: {zone_name!r}") from exc

    window_doc = _require(doc, "registration_window", dict, "")
    window = (
        _timestamp(window_doc, "open", "registration_window"),
        _timestamp(window_doc, "close", "registration_window"),
    )
    if window[0] >= window[1]:
        raise ConfigError("registration_window", "open must precede close")

    stages_doc = _require(doc, "stages", list, "")
    if not stages_doc:
        raise ConfigError("stages", "at least one stage is required")
    stages = tuple(
        _validate_stage(stage_doc, f"stages[{i}]") for i, stage_doc in enumerate(stages_doc)
    )
    _check_stage_layout(stages)

    manifest = tuple(
        _validate_manifest_entry(entry, f"data_manifest[{i}]")
        for i, entry in enumerate(doc.get("data_manifest", []))
    )
    seen_names = set()
    for i, entry in enumerate(manifest):
        if entry.name in seen_names:
            raise ConfigError(f"data_manifest[{i}].name", f"duplicate file name: {entry.name!r}")
        seen_names.add(entry.name)

    for i, stage in enumerate(stages):
        for j, spec in enumerate(stage.evaluators):
            if spec.metric == METRIC_INSTANCE_LOG:
                ref = spec.parameters.get("benchmark_manifest")
                if ref is not None and ref not in seen_names:
                    raise ConfigError(
                        f"stages[{i}].evaluators[{j}].parameters.benchmark_manifest",
                        f"references data file not in data_manifest: {ref!r}",
                    )

    badge_rules = tuple(
        _validate_badge_rule(rule, f"badge_rules[{i}]")
        for i, rule in enumerate(doc.get("badge_rules", []))
    )
    seen_badges = set()
    for i, rule in enumerate(badge_rules):
        if rule.badge_id in seen_badges:
            raise ConfigError(f"badge_rules[{i}].badge_id", f"duplicate badge id: {rule.badge_id!r}")
        seen_badges.add(rule.badge_id)

    discussion_url = doc.get("discussion_url")
    if discussion_url is not None:
        if not isinstance(discussion_url, str) or not discussion_url.startswith(("http://", "https://")):
            raise ConfigError("discussion_url", "must be an http(s) URL")

    return CompetitionConfig(
        competition_id=competition_id,
        title=title,
        official_time_zone=zone_name,
        registration_window=window,
        stages=stages,
        data_manifest=manifest,
        badge_rules=badge_rules,
        discussion_url=discussion_url,
    )


def _validate_stage(doc, path: str) -> StageConfig:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    stage_id = _identifier(doc, "stage_id", path)
    kind = _require(doc, "kind", str, path)
    if kind not in (RANKING_TASK, INSTANCE_TASK):
        raise ConfigError(_join(path, "kind"), f"must be {RANKING_TASK} or {INSTANCE_TASK}")

    opens = _timestamp(doc, "open", path)
    closes = _timestamp(doc, "close", path)
    if opens >= closes:
        raise ConfigError(path, f"stage {stage_id!r}: open must precede close")

    preliminary = None
    if doc.get("preliminary_deadline") is not None:
        preliminary = _timestamp(doc, "preliminary_deadline", path)
        if not (opens < preliminary < closes):
            raise ConfigError(
                _join(path, "preliminary_deadline"),
                "must lie strictly between stage open and close",
            )

    limit = _require(doc, "daily_submission_limit", int, path)
    if limit < 1:
        raise ConfigError(_join(path, "daily_submission_limit"), "must be >= 1")

    cadence = _require(doc, "aggregation_cadence_s", int, path)
    if cadence < 1:
        raise ConfigError(_join(path, "aggregation_cadence_s"), "must be >= 1 second")

    baseline = None
    if doc.get("baseline_score") is not None:
        baseline = _require(doc, "baseline_score", float, path)

    evaluators_doc = _require(doc, "evaluators", list, path)
    if not evaluators_doc:
        raise ConfigError(_join(path, "evaluators"), "at least one evaluator version required")
    evaluators = tuple(
        _validate_evaluator(spec_doc, f"{path}.evaluators[{i}]", kind)
        for i, spec_doc in enumerate(evaluators_doc)
    )
    for i, spec in enumerate(evaluators):
        if spec.version != i + 1:
            raise ConfigError(
                f"{path}.evaluators[{i}].version",
                f"versions must increase consecutively from 1, got {spec.version}",
            )

    return StageConfig(
        stage_id=stage_id,
        kind=kind,
        open=opens,
        close=closes,
        preliminary_deadline=preliminary,
        daily_submission_limit=limit,
        aggregation_cadence_s=cadence,
        baseline_score=baseline,
        evaluators=evaluators,
    )


def _validate_evaluator(doc, path: str, stage_kind: str) -> EvaluatorSpec:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    version = _require(doc, "version", int, path)
    if version < 1:
        raise ConfigError(_join(path, "version"), "must be a positive integer")
    metric = _require(doc, "metric", str, path)
    if metric not in (METRIC_MAP_AT_K, METRIC_INSTANCE_LOG):
        raise ConfigError(_join(path, "metric"), f"must be {METRIC_MAP_AT_K} or {METRIC_INSTANCE_LOG}")
    expected = METRIC_MAP_AT_K if stage_kind == RANKING_TASK else METRIC_INSTANCE_LOG
    if metric != expected:
        raise ConfigError(_join(path, "metric"), f"stage kind {stage_kind} requires metric {expected}")

    params = doc.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError(_join(path, "parameters"), "expected an object")

    if metric == METRIC_MAP_AT_K:
        k = params.get("k")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise ConfigError(_join(path, "parameters.k"), "k must be an integer >= 1")
        universe = params.get("relevance_universe", "all_interactions")
        if universe not in ("all_interactions", "test_only"):
            raise ConfigError(
                _join(path, "parameters.relevance_universe"),
                "must be all_interactions or test_only",
            )
    else:
        sense = params.get("objective_sense")
        if not isinstance(sense, dict) or not sense:
            raise ConfigError(
                _join(path, "parameters.objective_sense"),
                "instance_log requires a non-empty objective_sense map",
            )
        for name, direction in sense.items():
            if direction not in ("min", "max"):
                raise ConfigError(
                    _join(path, f"parameters.objective_sense.{name}"),
                    "objective sense must be min or max",
                )

    verification = params.get("verification", "deferred")
    if verification not in ("deferred", "none"):
        raise ConfigError(_join(path, "parameters.verification"), "must be deferred or none")

    return EvaluatorSpec(version=version, metric=metric, parameters=params)


def _check_stage_layout(stages: tuple[StageConfig, ...]) -> None:
    seen: dict[str, int] = {}
    for i, stage in enumerate(stages):
        if stage.stage_id in seen:
            raise ConfigError(
                f"stages[{i}].stage_id",
                f"duplicate stage id {stage.stage_id!r} (also stages[{seen[stage.stage_id]}])",
            )
        seen[stage.stage_id] = i
    for i in range(1, len(stages)):
        if stages[i].open < stages[i - 1].open:
            raise ConfigError(
                f"stages[{i}]",
                f"stages must be ordered by open time: {stages[i].stage_id!r} "
                f"opens before {stages[i - 1].stage_id!r}",
            )
    # with open-sorted stages, any overlap shows up between neighbors
    for i in range(1, len(stages)):
        prev, cur = stages[i - 1], stages[i]
        if cur.open < prev.close:
            raise ConfigError(
                f"stages[{i}]",
                f"stages {prev.stage_id!r} and {cur.stage_id!r} overlap in time",
            )


def _validate_manifest_entry(doc, path: str) -> ManifestEntry:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    name = _require(doc, "name", str, path)
    if not name or "/" in name or name.startswith("."):
        raise ConfigError(_join(path, "name"), f"not a plain file name: {name!r}")
    digest = _require(doc, "sha256", str, path)
    if not _SHA256_RE.match(digest):
        raise ConfigError(
            _join(path, "sha256"),
            "must be a 64-character lowercase hex SHA-256 digest",
        )
    visibility = _require(doc, "visibility", str, path)
    if visibility not in ("public", "registered"):
        raise ConfigError(_join(path, "visibility"), "must be public or registered")
    return ManifestEntry(name=name, sha256=digest, visibility=visibility)


def _validate_badge_rule(doc, path: str) -> BadgeRule:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    badge_id = _identifier(doc, "badge_id", path)
    display_name = _require(doc, "display_name", str, path)
    trigger = _require(doc, "trigger", str, path)
    if trigger not in ("first_submission", "first_past_baseline", "custom"):
        raise ConfigError(
            _join(path, "trigger"),
            "must be first_submission, first_past_baseline or custom",
        )
    predicate = doc.get("predicate")
    if trigger == "custom":
        if not isinstance(predicate, str) or not predicate:
            raise ConfigError(_join(path, "predicate"), "custom trigger requires a predicate name")
    elif predicate is not None:
        raise ConfigError(_join(path, "predicate"), "only custom triggers take a predicate")
    return BadgeRule(badge_id=badge_id, display_name=display_name, trigger=trigger, predicate=predicate)


def _dump_stage(stage: StageConfig) -> dict:
    doc = {
        "stage_id": stage.stage_id,
        "kind": stage.kind,
        "open": format_rfc3339(stage.open),
        "close": format_rfc3339(stage.close),
        "daily_submission_limit": stage.daily_submission_limit,
        "aggregation_cadence_s": stage.aggregation_cadence_s,
        "evaluators": [
            {"version": spec.version, "metric": spec.metric, "parameters": spec.parameters}
            for spec in stage.evaluators
        ],
    }
    if stage.preliminary_deadline is not None:
        doc["preliminary_deadline"] = format_rfc3339(stage.preliminary_deadline)
    if stage.baseline_score is not None:
        doc["baseline_score"] = stage.baseline_score
    return doc


def _dump_badge_rule(rule: BadgeRule) -> dict:
    doc = {"badge_id": rule.badge_id, "display_name": rule.display_name, "trigger": rule.trigger}
    if rule.predicate is not None:
        doc["predicate"] = rule.predicate
    return doc
