"""
Response wrapper utilities for consistent command output
"""
import json
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional


def success_response(data: Any) -> Dict[str, Any]:
    """Create a standardized success payload"""
    return {
        "success": True,
        "data": data,
        "timestamp": datetime.now().isoformat(),
    }


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


class JsonlWriter:
    """Append-only JSON-lines log (loss curves, metric curves)"""

    def __init__(self, path: Path, truncate: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate and self.path.exists():
            self.path.unlink()
        self._t0 = time.perf_counter()

    def write(self, record: Dict[str, Any], wall_time: Optional[float] = None) -> Dict[str, Any]:
        record = dict(record)
        record["wall_time"] = round(time.perf_counter() - self._t0, 4) if wall_time is None else wall_time
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, default=float) + "\n")
        return record

    def truncate_after(self, key: str, value: int) -> None:
        """Drop records with record[key] > value (used when resuming a run)"""
        if not self.path.exists():
            return
        kept = [
            line for line in self.path.read_text().splitlines()
            if line.strip() and json.loads(line).get(key, 0) <= value
        ]
        self.path.write_text("".join(line + "\n" for line in kept))

    def read(self) -> list[Dict[str, Any]]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]
