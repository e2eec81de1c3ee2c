"""Command-line client and service launcher.

One binary, role split by subcommand: organizers bootstrap and operate a
competition (`init`, `freeze`, `twist`, `verify-drain`, `export`),
participants register, pull data, submit, and watch the board. Every
participant/organizer command is a thin HTTP client: anything the CLI can
do is achievable with raw requests against the documented routes.

Exit codes: 0 success, 1 server or validation error, 2 usage error,
3 download integrity (digest mismatch).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import secrets
import sys
from pathlib import Path

import click
import httpx

from .config import ConfigError, load_config_file

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INTEGRITY = 3

DEFAULT_SERVER = "http://127.0.0.1:8000"


class Session:
    def __init__(self, server: str, credential_file: str, output: str):
        self.server = server.rstrip("/")
        self.credential_file = credential_file
        self.output = output

    def credential(self) -> str:
        credential = os.environ.get("ARENA_CREDENTIAL")
        if credential:
            return credential.strip()
        if self.credential_file and Path(self.credential_file).exists():
            return Path(self.credential_file).read_text().strip()
        raise click.ClickException(
            "no credential: set ARENA_CREDENTIAL or pass --credential-file"
        )

    def organizer_token(self) -> str:
        token_file = os.environ.get("ARENA_ORGANIZER_TOKEN_FILE")
        if token_file and Path(token_file).exists():
            return Path(token_file).read_text().strip()
        raise click.ClickException(
            "no organizer token: point ARENA_ORGANIZER_TOKEN_FILE at the token file"
        )

    def request(self, method: str, path: str, *, token: str = None, **kwargs) -> httpx.Response:
        headers = kwargs.pop("headers", {})
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            return httpx.request(
                method, f"{self.server}{path}", headers=headers, timeout=30.0, **kwargs
            )
        except httpx.HTTPError as exc:
            raise click.ClickException(f"cannot reach server {self.server}: {exc}")

    def emit(self, payload, text_lines=None):
        if self.output == "json":
            click.echo(json.dumps(payload, indent=2, sort_keys=True, default=str))
        else:
            for line in text_lines if text_lines is not None else [str(payload)]:
                click.echo(line)


def _fail(response: httpx.Response):
    try:
        message = response.json().get("error", response.text)
    except json.JSONDecodeError:
        message = response.text
    click.echo(f"error [{response.status_code}]: {message}", err=True)
    sys.exit(EXIT_ERROR)


def _check(response: httpx.Response) -> dict:
    if response.status_code >= 400:
        _fail(response)
    if "json" in response.headers.get("content-type", ""):
        return response.json()
    return {}


@click.group()
@click.option("--server", default=lambda: os.environ.get("ARENA_SERVER", DEFAULT_SERVER))
@click.option("--credential-file", default=lambda: os.environ.get("ARENA_CREDENTIAL_FILE", ""))
@click.option("--output", type=click.Choice(["text", "json"]), default="text")
@click.pass_context
def main(ctx, server, credential_file, output):
    """Competition platform client."""
    ctx.obj = Session(server, credential_file, output)


# -- organizer ------------------------------------------------------------------


@main.command()
@click.argument("config_path", type=click.Path(exists=True), required=False)
@click.option("--data-dir", default=lambda: os.environ.get("ARENA_DATA_DIR", "./arena-data"))
@click.option("--bind", default=lambda: os.environ.get("ARENA_BIND_ADDR", "127.0.0.1:8000"))
@click.option("--ui-dir", default=lambda: os.environ.get("ARENA_UI_DIR", ""))
@click.option("--validate-only", is_flag=True, help="Validate the config and exit.")
@click.pass_obj
def init(session, config_path, data_dir, bind, ui_dir, validate_only):
    """Validate the config (CONFIG_PATH or $ARENA_CONFIG) and start the service."""
    config_path = config_path or os.environ.get("ARENA_CONFIG")
    if not config_path:
        click.echo("no config: pass a path or set ARENA_CONFIG", err=True)
        sys.exit(EXIT_ERROR)
    try:
        config = load_config_file(config_path)
    except ConfigError as exc:
        click.echo(f"invalid config: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    if session.output == "json":
        click.echo(json.dumps({"config": "ok", "competition_id": config.competition_id,
                               "stages": [s.stage_id for s in config.stages]}))
    else:
        click.echo(f"config ok: {config.competition_id} with {len(config.stages)} stage(s)")
    if validate_only:
        return

    import uvicorn

    from .runtime import CompetitionRuntime
    from .server import create_app

    data_dir = Path(data_dir)
    token_file = os.environ.get("ARENA_ORGANIZER_TOKEN_FILE")
    if token_file and Path(token_file).exists():
        organizer_token = Path(token_file).read_text().strip()
    else:
        token_path = data_dir / "organizer_token"
        if not token_path.exists():
            token_path.parent.mkdir(parents=True, exist_ok=True)
            token_path.write_text(secrets.token_urlsafe(32))
            token_path.chmod(0o600)
        organizer_token = token_path.read_text().strip()
        click.echo(f"organizer token file: {token_path}")

    runtime = CompetitionRuntime(
        config,
        data_dir,
        organizer_token=organizer_token,
        ui_dir=Path(ui_dir) if ui_dir else None,
    )
    runtime.start_aggregation_loop()
    host, _, port = bind.partition(":")
    click.echo(f"serving {config.competition_id} on {bind}")
    try:
        uvicorn.run(create_app(runtime), host=host, port=int(port or 8000), log_level="warning")
    finally:
        runtime.stop_aggregation_loop()


@main.command()
@click.argument("stage")
@click.argument("label")
@click.pass_obj
def freeze(session, stage, label):
    """Freeze the live leaderboard of STAGE under LABEL."""
    body = _check(
        session.request(
            "POST",
            "/api/admin/freeze",
            token=session.organizer_token(),
            json={"stage": stage, "label": label},
        )
    )
    session.emit(body, [f"frozen {stage} as {body.get('label')} (snapshot {body.get('snapshot_id')})"])


@main.command()
@click.argument("stage")
@click.argument("version", type=int)
@click.pass_obj
def twist(session, stage, version):
    """Advance STAGE to evaluator VERSION (auto-freezes the old board)."""
    body = _check(
        session.request(
            "POST",
            "/api/admin/twist",
            token=session.organizer_token(),
            json={"stage": stage, "version": version},
        )
    )
    label = body.get("auto_freeze_label")
    lines = [f"stage {stage} now at evaluator version {body.get('version')}"]
    if label:
        lines.append(f"pre-twist board frozen as {label}")
    lines.append("all cached submissions will be re-scored next cycle")
    session.emit(body, lines)


@main.command("verify-drain")
@click.argument("stage")
@click.pass_obj
def verify_drain(session, stage):
    """Run the deferred-verification queue for STAGE to completion."""
    body = _check(
        session.request(
            "POST",
            "/api/admin/verify_drain",
            token=session.organizer_token(),
            json={"stage": stage},
        )
    )
    session.emit(
        body,
        [
            f"verified {body.get('verified', 0)}, invalidated {body.get('invalidated', 0)}, "
            f"failed {body.get('failed', 0)}"
        ],
    )


@main.command()
@click.argument("stage")
@click.option("-o", "--out", default="", help="Output zip path (default <stage>-export.zip)")
@click.pass_obj
def export(session, stage, out):
    """Download the full audit bundle for STAGE."""
    response = session.request(
        "POST", "/api/admin/export", token=session.organizer_token(), json={"stage": stage}
    )
    if response.status_code >= 400:
        _fail(response)
    target = Path(out or f"{stage}-export.zip")
    target.write_bytes(response.content)
    session.emit({"written": str(target), "bytes": len(response.content)}, [f"wrote {target}"])


# -- participant -----------------------------------------------------------------


@main.command()
@click.option("--member", "members", multiple=True, required=True, help='"Name <email>", repeatable')
@click.option("--token", "tokens", multiple=True, required=True, help="stage=display-name, repeatable")
@click.option("--accept-rules", is_flag=True)
@click.pass_obj
def register(session, members, tokens, accept_rules):
    """Register a team; prints the credential exactly once."""
    contacts = []
    for member in members:
        name, _, rest = member.partition("<")
        email = rest.rstrip(">").strip()
        contacts.append({"name": name.strip(), "email": email})
    token_map = {}
    for item in tokens:
        stage, _, value = item.partition("=")
        token_map[stage.strip()] = value.strip()
    body = _check(
        session.request(
            "POST",
            "/api/register",
            json={"contacts": contacts, "tokens": token_map, "accept_rules": accept_rules},
        )
    )
    session.emit(
        body,
        [
            "registered; store this credential now, it is shown exactly once:",
            body["credential"],
        ],
    )


@main.group()
def data():
    """Competition data files."""


@data.command("pull")
@click.argument("file_name")
@click.option("-o", "--out", default="", help="Output path (default: file name)")
@click.pass_obj
def data_pull(session, file_name, out):
    """Download FILE_NAME and verify its manifest digest."""
    try:
        token = session.credential()
    except click.ClickException:
        token = None  # public files need no credential
    response = session.request("GET", f"/api/data/{file_name}", token=token)
    if response.status_code >= 400:
        _fail(response)
    expected = response.headers.get("x-content-digest", "")
    actual = "sha256:" + hashlib.sha256(response.content).hexdigest()
    if expected and expected != actual:
        click.echo(f"digest mismatch: expected {expected}, got {actual}", err=True)
        sys.exit(EXIT_INTEGRITY)
    target = Path(out or file_name)
    target.write_bytes(response.content)
    session.emit(
        {"written": str(target), "digest": actual},
        [f"wrote {target} ({len(response.content)} bytes, digest verified)"],
    )


@main.command()
@click.argument("stage")
@click.argument("file_path", type=click.Path(exists=True))
@click.option("--channel", default="", help="Member tag for independent parallel submissions")
@click.pass_obj
def submit(session, stage, file_path, channel):
    """Submit FILE_PATH to STAGE."""
    payload = Path(file_path).read_bytes()
    headers = {"Content-Type": "text/csv"}
    if channel:
        headers["X-Arena-Channel"] = channel
    body = _check(
        session.request(
            "POST",
            f"/api/submissions/{stage}",
            token=session.credential(),
            content=payload,
            headers=headers,
        )
    )
    quota = body.get("quota", {})
    session.emit(
        body,
        [
            f"submission {body.get('submission_id')} accepted"
            + (" (duplicate payload)" if body.get("duplicate") else ""),
            f"quota: {quota.get('remaining')}/{quota.get('limit')} remaining today",
        ],
    )


@main.command()
@click.argument("stage")
@click.pass_obj
def quota(session, stage):
    """Show today's remaining submission quota for STAGE."""
    body = _check(
        session.request("GET", f"/api/quota/{stage}", token=session.credential())
    )
    session.emit(
        body,
        [
            f"{body.get('remaining')}/{body.get('limit')} submissions remaining today "
            f"(resets {body.get('resets_at')})"
        ],
    )


@main.command()
@click.argument("stage")
@click.option("--frozen", default="", help="Show a frozen snapshot instead of the live board")
@click.pass_obj
def board(session, stage, frozen):
    """Render the leaderboard as an aligned table."""
    path = f"/api/leaderboard/{stage}?format=csv"
    if frozen:
        path += f"&frozen={frozen}"
    response = session.request("GET", path)
    if response.status_code >= 400:
        _fail(response)
    if session.output == "json":
        json_path = path.replace("format=csv", "format=json")
        session.emit(_check(session.request("GET", json_path)))
        return
    rows = list(csv.reader(io.StringIO(response.text)))
    if not rows:
        click.echo("empty board")
        return
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    for row in rows:
        click.echo("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())


if __name__ == "__main__":
    main()
