import json
import os
import sys
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

logger = logging.getLogger(__name__)

def resource_path(relative_path):
    """Return the absolute path to a resource, works in dev and PyInstaller."""
    try:
        # PyInstaller stores temp path in _MEIPASS.
        base_path = sys._MEIPASS
    except AttributeError:
        # In dev, use the directory of this file.
        base_path = os.path.abspath(os.path.dirname(__file__))
    return os.path.join(base_path, relative_path)


def to_ticks(seconds: float) -> int:
    """Convert simulated seconds to whole ticks."""
    from constants import TICKS_PER_SECOND
    return int(round(seconds * TICKS_PER_SECOND))


def to_seconds(ticks: float) -> float:
    """Convert ticks to simulated seconds."""
    from constants import TICKS_PER_SECOND
    return ticks / TICKS_PER_SECOND


def resolve_output_dir(requested: Optional[str] = None) -> Path:
    """
    Resolve the report output directory.

    CHAINBENCH_OUT_DIR overrides the config value; the directory is created if missing.

    Args:
        requested: Output directory from the experiment config or CLI

    Returns:
        Path: Existing output directory
    """
    out = os.getenv("CHAINBENCH_OUT_DIR") or requested or "results"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


class JsonLinesWriter:
    """
    Append-only JSON-lines sink used for chain dumps, receipts, snapshots and traces.
    Records are written with sorted keys so that equal content gives equal bytes.
    """

    def __init__(self, path, mode: str = "w"):
        self.path = str(path)
        self._fh = open(self.path, mode, encoding="utf-8", newline="\n")
        self.count = 0

    def write(self, record: Dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
        self.count += 1

    def write_all(self, records: Iterable[Dict[str, Any]]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()
            logger.debug(f"Wrote {self.count} records to {self.path}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_json_lines(path) -> Iterable[Dict[str, Any]]:
    """Yield records from a JSON-lines file, skipping blank lines."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
