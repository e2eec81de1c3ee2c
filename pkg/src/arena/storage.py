"""On-disk persistence primitives: atomic file publication and append-only
JSONL logs. Layout documented in docs/storage.md."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterator


def atomic_write_bytes(target: Path, content: bytes) -> Path:
    """Write content atomically: temp file in the target directory, fsync,
    then rename into place. Readers never observe a partial file."""
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(suffix=".tmp", dir=target.parent)
    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
            f.flush()
            os.fsync(f.fileno())
        tmp_path.rename(target)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    return target


def atomic_write_text(target: Path, content: str) -> Path:
    return atomic_write_bytes(target, content.encode("utf-8"))


def atomic_write_json(target: Path, payload: Any) -> Path:
    text = json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=1)
    return atomic_write_text(target, text + "\n")


def append_jsonl(target: Path, record: dict) -> None:
    """Append one record to a JSONL log. Single line per record; the log is
    the durable source of truth, so flush before returning."""
    target.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, sort_keys=True, ensure_ascii=False)
    with open(target, "a", encoding="utf-8") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


def read_jsonl(target: Path) -> Iterator[dict]:
    """Yield records from a JSONL log; a torn trailing line (crash during
    append) is skipped rather than raised."""
    if not target.exists():
        return
    with open(target, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                continue


def read_json(target: Path, default: Any = None) -> Any:
    if not target.exists():
        return default
    with open(target, "r", encoding="utf-8") as f:
        return json.load(f)
