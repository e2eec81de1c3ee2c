from __future__ import annotations

import hashlib
import json
import socket
import threading
import time
from pathlib import Path

import httpx
import pytest
import uvicorn
from click.testing import CliRunner

from arena.cli import main
from arena.server import create_app
from test_server import ORGANIZER_TOKEN, build_runtime
from harness import ranking_config_doc

PERFECT = b"user_id,item_id,rank\nu1,t1,1\nu1,x1,2\nu2,t2,1\nu2,x2,2\n"


def free_port():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


class LiveServer:
    def __init__(self, runtime):
        self.runtime = runtime
        self.port = free_port()
        config = uvicorn.Config(
            create_app(runtime), host="127.0.0.1", port=self.port, log_level="error"
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=5)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.port}"


@pytest.fixture
def live(tmp_path):
    runtime = build_runtime(tmp_path)
    with LiveServer(runtime) as server:
        yield server


def run_cli(server_url, *args, env=None, **kwargs):
    runner = CliRunner()
    return runner.invoke(
        main, ["--server", server_url, *args], env=env or {}, catch_exceptions=False, **kwargs
    )


def register_via_cli(live, token="red-panda", email="rp@example.org"):
    result = run_cli(
        live.url,
        "register",
        "--member",
        f"Registered Member <{email}>",
        "--token",
        f"stage1={token}",
        "--accept-rules",
    )
    assert result.exit_code == 0, result.output
    return result.output.strip().splitlines()[-1]


class TestInit:
    def test_valid_config(self, tmp_path):
        config_path = tmp_path / "good.json"
        config_path.write_text(json.dumps(ranking_config_doc()))
        result = CliRunner().invoke(
            main, ["init", str(config_path), "--validate-only"], catch_exceptions=False
        )
        assert result.exit_code == 0
        assert "config ok" in result.output

    def test_overlapping_stages_named(self, tmp_path):
        doc = ranking_config_doc()
        doc["stages"].append(dict(doc["stages"][0], stage_id="stage2"))
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(doc))
        result = CliRunner().invoke(main, ["init", str(config_path), "--validate-only"])
        assert result.exit_code == 1
        assert "stage1" in result.output and "stage2" in result.output


class TestParticipantFlow:
    def test_register_submit_quota_board(self, live, tmp_path):
        credential = register_via_cli(live)
        env = {"ARENA_CREDENTIAL": credential}

        payload_path = tmp_path / "results.csv"
        payload_path.write_bytes(PERFECT)
        result = run_cli(live.url, "submit", "stage1", str(payload_path), env=env)
        assert result.exit_code == 0
        assert "submission 1 accepted" in result.output
        assert "99/100" in result.output

        result = run_cli(live.url, "quota", "stage1", env=env)
        assert result.exit_code == 0
        assert "99/100" in result.output

        live.runtime.aggregator.run_cycle(live.runtime.clock.now())
        result = run_cli(live.url, "board", "stage1")
        assert result.exit_code == 0
        lines = result.output.strip().splitlines()
        assert lines[0].startswith("rank")
        assert "red-panda" in lines[1]

        # board order matches the served CSV exactly
        served = httpx.get(f"{live.url}/api/leaderboard/stage1?format=csv").text
        served_teams = [row.split(",")[1] for row in served.strip().splitlines()[1:]]
        table_teams = [line.split()[1] for line in lines[1:]]
        assert table_teams == served_teams

    def test_output_json_mode(self, live, tmp_path):
        credential = register_via_cli(live)
        payload_path = tmp_path / "results.csv"
        payload_path.write_bytes(PERFECT)
        result = run_cli(
            live.url,
            "--output",
            "json",
            "submit",
            "stage1",
            str(payload_path),
            env={"ARENA_CREDENTIAL": credential},
        )
        assert result.exit_code == 0
        body = json.loads(result.output)
        assert body["submission_id"] == 1

    def test_submit_without_credential_fails(self, live, tmp_path):
        payload_path = tmp_path / "results.csv"
        payload_path.write_bytes(PERFECT)
        result = CliRunner().invoke(
            main, ["--server", live.url, "submit", "stage1", str(payload_path)], env={}
        )
        assert result.exit_code == 1
        assert "no credential" in result.output


class TestDataPull:
    def build_with_file(self, tmp_path, *, corrupt=False):
        payload = b"user_id,item_id,label,split\nu1,a,1,train\n"
        digest = hashlib.sha256(payload).hexdigest()
        doc = ranking_config_doc()
        doc["data_manifest"] = [
            {"name": "train.csv", "sha256": digest, "visibility": "public"}
        ]
        runtime = build_runtime(tmp_path, doc)
        files = runtime.data_dir / "datafiles"
        files.mkdir(parents=True, exist_ok=True)
        stored = payload + b"tampered\n" if corrupt else payload
        (files / "train.csv").write_bytes(stored)
        return runtime

    def test_pull_verifies_digest(self, tmp_path):
        runtime = self.build_with_file(tmp_path)
        with LiveServer(runtime) as live:
            runner = CliRunner()
            with runner.isolated_filesystem():
                result = runner.invoke(
                    main,
                    ["--server", live.url, "data", "pull", "train.csv"],
                    catch_exceptions=False,
                )
                assert result.exit_code == 0
                assert "digest verified" in result.output
                assert Path("train.csv").exists()

    def test_pull_detects_corruption(self, tmp_path):
        runtime = self.build_with_file(tmp_path, corrupt=True)
        with LiveServer(runtime) as live:
            runner = CliRunner()
            with runner.isolated_filesystem():
                result = runner.invoke(
                    main, ["--server", live.url, "data", "pull", "train.csv"]
                )
                assert result.exit_code == 3
                assert "digest mismatch" in result.output


class TestOrganizerFlow:
    def test_freeze_twist_verify_export(self, live, tmp_path):
        credential = register_via_cli(live)
        payload_path = tmp_path / "results.csv"
        payload_path.write_bytes(PERFECT)
        run_cli(live.url, "submit", "stage1", str(payload_path), env={"ARENA_CREDENTIAL": credential})
        live.runtime.aggregator.run_cycle(live.runtime.clock.now())

        token_file = tmp_path / "organizer_token"
        token_file.write_text(ORGANIZER_TOKEN)
        env = {"ARENA_ORGANIZER_TOKEN_FILE": str(token_file)}

        result = run_cli(live.url, "freeze", "stage1", "week-1", env=env)
        assert result.exit_code == 0
        assert "frozen stage1 as week-1" in result.output

        result = run_cli(live.url, "twist", "stage1", "2", env=env)
        assert result.exit_code == 0
        assert "version 2" in result.output
        assert "frozen as stage1-pre-v2" in result.output
        assert "re-scored" in result.output

        result = run_cli(live.url, "verify-drain", "stage1", env=env)
        assert result.exit_code == 0
        assert "verified" in result.output

        runner = CliRunner()
        with runner.isolated_filesystem():
            result = runner.invoke(
                main,
                ["--server", live.url, "export", "stage1"],
                env=env,
                catch_exceptions=False,
            )
            assert result.exit_code == 0
            assert Path("stage1-export.zip").exists()

        # every CLI effect is visible through the plain HTTP surface
        labels = httpx.get(f"{live.url}/api/leaderboard/stage1?format=json").json()[
            "frozen_labels"
        ]
        assert set(labels) == {"week-1", "stage1-pre-v2"}

    def test_freeze_without_live_board_fails(self, live, tmp_path):
        token_file = tmp_path / "organizer_token"
        token_file.write_text(ORGANIZER_TOKEN)
        result = run_cli(
            live.url,
            "freeze",
            "stage1",
            "too-early",
            env={"ARENA_ORGANIZER_TOKEN_FILE": str(token_file)},
        )
        assert result.exit_code == 1
