"""
run_summary.py
--------------
Aggregates one workflow run into run_summary.json.

Combines:
  • Workflow identity (name, final type, backend, policy)
  • Per-stage counts, failures, envelope record ids and durations
  • Execution metadata (timestamp, total duration, errors)
"""
import logging
from typing import Any, Dict, List, Optional

from transduce.common import write_json_atomic

logger = logging.getLogger(__name__)


def build_run_summary(
    workflow: str,
    backend: str,
    policy: Dict[str, Any],
    stages: List[Any],
    final_type: Optional[str],
    output_count: int,
    final_record_ids: List[int],
    errors: List[str],
    timestamp: Optional[str] = None,
    execution_duration_s: Optional[float] = None,
) -> Dict:
    """Aggregate stage reports and metadata into a single JSON-ready structure."""

    summary = {
        "workflow": workflow,
        "backend": backend,
        "policy": policy,
        "timestamp": timestamp,
        "execution_duration_s": round(execution_duration_s or 0, 2),
        "status": "success" if not errors else "failure",
        "final_type": final_type,
        "output_count": output_count,
        "final_record_ids": list(final_record_ids),
        "error_count": len(errors),
        "errors": list(errors),
        "stages": [],
    }

    for report in stages:
        summary["stages"].append({
            "stage_index": report.index,
            "kind": report.kind,
            "label": report.label,
            "function": report.function,
            "input_count": report.input_count,
            "output_count": report.output_count,
            "failures": report.failures,
            "record_ids": list(report.record_ids),
            "duration_s": round(report.duration_s or 0, 3),
        })

    return summary


def save_run_summary(summary: Dict, output_path: str) -> str:
    write_json_atomic(output_path, summary)
    logger.info("[+] Run summary saved to %s", output_path)
    return output_path
