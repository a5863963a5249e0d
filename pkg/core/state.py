"""
Event-Sourced Experiment Journal

An append-only event log is the single record of what an experiment has
finished. Resume logic reads the state folded from those events rather
than trusting whatever files happen to sit in the work directory.
"""

import json
import shutil
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigError, DataError

JOURNAL_VERSION = "1.0"
EVENT_TYPES = ("experiment_created", "stage_trained", "fold_completed", "report_written")


class EventStore:
    """Append-only JSON event log with atomic writes and a backup copy"""

    def __init__(self, events_file: Path):
        self.events_file = Path(events_file)
        self._events: List[Dict[str, Any]] = []
        self._lock = threading.Lock()
        self._load_events()

    def _load_events(self) -> None:
        """Load events from disk, falling back to the backup copy"""
        last_error: Optional[Exception] = None
        for candidate in (self.events_file, self._backup_file()):
            if not candidate.exists():
                continue
            try:
                with open(candidate, "r", encoding="utf-8") as f:
                    self._events = json.load(f)["events"]
                return
            except (json.JSONDecodeError, KeyError) as exc:
                last_error = exc
        if self.events_file.exists():
            raise DataError(f"Experiment journal is corrupted: {self.events_file} ({last_error})")
        self._events = []

    def _backup_file(self) -> Path:
        return self.events_file.with_suffix(".json.backup")

    def add_event(self, event_type: str, data: Dict[str, Any]) -> str:
        """Append one event and persist the log"""
        if event_type not in EVENT_TYPES:
            raise ValueError(f"Unknown journal event type: {event_type}")
        event = {
            "id": str(uuid.uuid4()),
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "type": event_type,
            "data": data,
        }
        with self._lock:
            self._events.append(event)
            self._save_events()
        return event["id"]

    def get_events(self) -> List[Dict[str, Any]]:
        with self._lock:
            return list(self._events)

    def get_events_by_type(self, event_type: str) -> List[Dict[str, Any]]:
        return [e for e in self.get_events() if e["type"] == event_type]

    def _save_events(self) -> None:
        self.events_file.parent.mkdir(parents=True, exist_ok=True)
        if self.events_file.exists():
            shutil.copy2(self.events_file, self._backup_file())

        temp_file = self.events_file.with_suffix(".json.temp")
        with open(temp_file, "w", encoding="utf-8") as f:
            json.dump({"version": JOURNAL_VERSION, "event_count": len(self._events),
                       "events": self._events}, f, indent=2)
        temp_file.replace(self.events_file)

    def validate_integrity(self) -> Dict[str, Any]:
        """Check ids, ordering and required fields"""
        events = self.get_events()
        issues = []

        event_ids = [e.get("id") for e in events]
        if len(event_ids) != len(set(event_ids)):
            issues.append("Duplicate event IDs found")

        timestamps = [e.get("timestamp", "") for e in events]
        if timestamps != sorted(timestamps):
            issues.append("Events not in chronological order")

        for i, event in enumerate(events):
            missing = [f for f in ("id", "timestamp", "type", "data") if f not in event]
            if missing:
                issues.append(f"Event {i}: missing fields {missing}")

        if events and events[0].get("type") != "experiment_created":
            issues.append("First event is not experiment_created")

        return {"valid": not issues, "issues": issues, "event_count": len(events)}


class ExperimentState:
    """Current experiment progress computed from the event log"""

    def __init__(self, event_store: EventStore):
        self.event_store = event_store

    def get_current_state(self) -> Dict[str, Any]:
        state: Dict[str, Any] = {
            "config_hash": None,
            "stages": {},
            "folds": {},
            "reports": [],
        }
        for event in self.event_store.get_events():
            self._apply_event_to_state(state, event)
        return state

    def _apply_event_to_state(self, state: Dict[str, Any], event: Dict[str, Any]) -> None:
        data = event["data"]
        if event["type"] == "experiment_created":
            state["config_hash"] = data["config_hash"]
        elif event["type"] == "stage_trained":
            state["stages"][data["setup"]] = data["checkpoint"]
        elif event["type"] == "fold_completed":
            state["folds"][data["speaker_id"]] = data["result"]
        elif event["type"] == "report_written":
            state["reports"].append(data["path"])

    @property
    def config_hash(self) -> Optional[str]:
        return self.get_current_state()["config_hash"]

    def completed_folds(self) -> Dict[str, str]:
        return dict(self.get_current_state()["folds"])

    def trained_stages(self) -> Dict[str, str]:
        return dict(self.get_current_state()["stages"])


class ExperimentJournal:
    """Journal bound to one work directory and config hash"""

    def __init__(self, workdir: Path, config_hash: str):
        self.workdir = Path(workdir)
        self.store = EventStore(self.workdir / "journal.json")
        self.state = ExperimentState(self.store)

        recorded = self.state.config_hash
        if recorded is None:
            self.store.add_event("experiment_created", {"config_hash": config_hash})
        elif recorded != config_hash:
            raise ConfigError(
                f"Work directory {self.workdir} belongs to config {recorded}, not {config_hash}; "
                "refusing to resume with a different configuration"
            )
        self.config_hash = config_hash

    def stage_trained(self, setup: str, checkpoint: Path) -> None:
        self.store.add_event("stage_trained", {"setup": setup, "checkpoint": str(checkpoint)})

    def fold_completed(self, speaker_id: str, result: Path) -> None:
        self.store.add_event("fold_completed", {"speaker_id": speaker_id, "result": str(result)})

    def report_written(self, path: Path) -> None:
        self.store.add_event("report_written", {"path": str(path)})
