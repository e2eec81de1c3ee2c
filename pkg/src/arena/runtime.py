"""Composition root: wires config, registry, submission store and
aggregator over one data directory, owns the audit log, and runs the
background aggregation loop for live deployments."""

from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Optional

from .aggregator import Aggregator, VerifierHook, recomputing_verifier
from .clock import Clock, SystemClock, format_rfc3339
from .config import CompetitionConfig, load_config_file
from .ingestion import SubmissionStore
from .registry import Registry
from .storage import append_jsonl, read_jsonl

logger = logging.getLogger(__name__)


class CompetitionRuntime:
    def __init__(
        self,
        config: CompetitionConfig,
        data_dir: Path,
        *,
        clock: Optional[Clock] = None,
        organizer_token: Optional[str] = None,
        public_dir: Optional[Path] = None,
        scan_dir: Optional[Path] = None,
        ui_dir: Optional[Path] = None,
        verifier_hook: VerifierHook = recomputing_verifier,
        verification_batch: int = 10,
        custom_predicates: Optional[dict] = None,
    ):
        self.config = config
        self.clock = clock or SystemClock()
        self.data_dir = Path(data_dir)
        self.public_dir = Path(public_dir) if public_dir else self.data_dir / "public"
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.organizer_token = organizer_token
        self.registry = Registry(config, self.data_dir)
        self.store = SubmissionStore(config, self.registry, self.data_dir)
        self.aggregator = Aggregator(
            config,
            self.registry,
            self.store,
            self.data_dir,
            self.public_dir,
            self.clock,
            scan_dir=scan_dir,
            verifier_hook=verifier_hook,
            verification_batch=verification_batch,
            custom_predicates=custom_predicates,
        )
        self._audit_path = self.data_dir / "audit.jsonl"
        self._stop = threading.Event()
        self._loop_thread: Optional[threading.Thread] = None

    @classmethod
    def from_config_file(cls, config_path, data_dir, **kwargs) -> "CompetitionRuntime":
        return cls(load_config_file(config_path), data_dir, **kwargs)

    # -- audit ----------------------------------------------------------------

    def audit(self, actor: str, action: str, params: dict, result: str) -> dict:
        entry = {
            "at": format_rfc3339(self.clock.now()),
            "actor": actor,
            "action": action,
            "params": params,
            "result": result,
        }
        append_jsonl(self._audit_path, entry)
        return entry

    def audit_entries(self) -> list[dict]:
        return list(read_jsonl(self._audit_path))

    # -- background aggregation loop -------------------------------------------

    def cadence_s(self) -> int:
        return min(stage.aggregation_cadence_s for stage in self.config.stages)

    def start_aggregation_loop(self) -> None:
        if self._loop_thread is not None:
            return

        def loop():
            while not self._stop.wait(self.cadence_s()):
                try:
                    self.aggregator.run_cycle(self.clock.now())
                except Exception:
                    # a bad cycle must never kill the heartbeat
                    logger.exception("aggregation cycle failed")

        self._loop_thread = threading.Thread(target=loop, name="aggregator", daemon=True)
        self._loop_thread.start()

    def stop_aggregation_loop(self) -> None:
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=10)
            self._loop_thread = None
        self._stop.clear()
