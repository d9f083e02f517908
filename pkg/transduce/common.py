# transduce/common.py
import datetime
import hashlib
import json
import logging
import os
import shutil
from typing import Any

logger = logging.getLogger(__name__)


def get_repo_root():
    # `__file__` is inside transduce/
    return os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


def get_data_dir():
    path = os.environ.get("TRANSDUCE_DATA_DIR") or os.path.join(get_repo_root(), "data")
    os.makedirs(path, exist_ok=True)
    return path


def get_runs_dir():
    """Return the directory where all workflow runs are stored."""
    runs_dir = os.path.join(get_data_dir(), "runs")
    os.makedirs(runs_dir, exist_ok=True)
    return runs_dir


def canonical_dumps(obj: Any) -> str:
    """UTF-8 JSON, insertion-order keys, no insignificant whitespace."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json_atomic(path: str, payload: Any, canonical: bool = False) -> str:
    """Write JSON through a temp file + rename so readers never see half a file."""
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        if canonical:
            f.write(canonical_dumps(payload))
        else:
            json.dump(payload, f, indent=2, default=str)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)
    return path


def create_run_dir(workflow=None, runs_dir=None):
    """Create a unique run directory for one workflow execution."""
    safe_name = workflow.replace(" ", "_").replace("/", "_") if workflow else "unknown"
    timestamp = datetime.datetime.now().strftime("%Y-%m-%dT%H-%M-%S-%f")
    run_dir = os.path.join(runs_dir or get_runs_dir(), f"{timestamp}_{safe_name}")
    return init_run_dir(run_dir, workflow)


def init_run_dir(run_dir, workflow=None):
    """Make sure ``run_dir`` exists and carries a metadata.json."""
    os.makedirs(run_dir, exist_ok=True)
    if read_metadata(run_dir) is not None:
        return run_dir
    metadata = {
        "saved": False,
        "workflow": workflow or "unknown",
        "notes": "",
        "timestamp": datetime.datetime.now().astimezone().isoformat(),
    }
    write_json_atomic(os.path.join(run_dir, "metadata.json"), metadata)
    return run_dir


def read_metadata(run_dir):
    meta_path = os.path.join(run_dir, "metadata.json")
    if not os.path.isfile(meta_path):
        return None
    with open(meta_path, encoding="utf-8") as f:
        return json.load(f)


def update_metadata(run_dir, **fields):
    meta = read_metadata(run_dir) or {}
    meta.update(fields)
    write_json_atomic(os.path.join(run_dir, "metadata.json"), meta)
    return meta


def cleanup_unsaved_runs(runs_dir=None):
    """Delete run directories that have not been marked as saved."""
    runs_dir = runs_dir or get_runs_dir()
    removed = []
    for entry in os.scandir(runs_dir):
        if not entry.is_dir():
            continue
        try:
            meta = read_metadata(entry.path)
            if meta is not None and not meta.get("saved", False):
                shutil.rmtree(entry.path, ignore_errors=True)
                removed.append(entry.name)
        except Exception as e:
            logger.warning("[!] Failed to cleanup %s: %s", entry.path, e)
    return removed


def list_saved_runs(runs_dir=None):
    runs_dir = runs_dir or get_runs_dir()
    results = []
    for d in os.listdir(runs_dir):
        path = os.path.join(runs_dir, d)
        meta = read_metadata(path)
        if not meta or not meta.get("saved"):
            continue
        ts = meta.get("timestamp")
        if not ts:
            # fallback to directory mtime if not recorded
            ts = datetime.datetime.fromtimestamp(os.path.getmtime(path)).isoformat()
        results.append({
            "workflow": meta.get("workflow", "unknown"),
            "timestamp": ts,
            "notes": meta.get("notes", ""),
            "dir": d,
        })
    # newest first
    results.sort(key=lambda r: r["timestamp"], reverse=True)
    return results


def get_latest_run_dir(runs_dir=None):
    """Return the absolute path to the newest run directory, or None if none exist."""
    runs_dir = runs_dir or get_runs_dir()
    run_dirs = [
        os.path.join(runs_dir, d)
        for d in os.listdir(runs_dir)
        if os.path.isdir(os.path.join(runs_dir, d))
    ]
    return max(run_dirs, key=os.path.getmtime) if run_dirs else None


def resolve_run_dir(name, runs_dir=None):
    """Map a client-supplied run directory name onto the runs dir (no traversal)."""
    path = os.path.join(runs_dir or get_runs_dir(), os.path.basename(name or ""))
    return path if name and os.path.isdir(path) else None
