"""
cli.py
------
Command line: validate a workflow, run it, inspect its trace.

    transduce validate demo/discovery/workflow.json
    transduce run demo/discovery/workflow.json --backend mock --out out/
    transduce trace show out/trace.jsonl --status error
    transduce trace lineage out/trace.jsonl 1

Exit status: 0 clean, 1 for any TransduceError, 2 for usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from transduce import trace
from transduce.errors import TransduceError, WorkflowError
from transduce.runner import make_backend, run_workflow
from transduce.settings import ExecutionPolicy, build, load_env
from transduce.workflow import compile_workflow_file

logger = logging.getLogger(__name__)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        compiled = compile_workflow_file(args.workflow)
    except WorkflowError as e:
        for line in e.diagnostics:
            print(f"[x] {line}")
        return 1
    print(f"[+] {args.workflow}: ok ({len(compiled.stages)} stages, "
          f"{sum(len(s) for s in compiled.sources)} input states, output {compiled.final_type.name})")
    return 0


def _policy(args: argparse.Namespace, base: ExecutionPolicy) -> ExecutionPolicy:
    return build(
        ExecutionPolicy,
        base.model_dump(),
        max_concurrency=args.max_concurrency,
        batch_size=args.batch_size,
        failure_mode=args.failure_mode,
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        compiled = compile_workflow_file(args.workflow)
    except WorkflowError as e:
        for line in e.diagnostics:
            print(f"[x] {line}")
        return 1
    policy = _policy(args, compiled.policy)
    backend = make_backend(args.backend, compiled, rules_path=args.rules, model=args.model, base_url=args.base_url)

    outcome = run_workflow(compiled, backend, policy, out_dir=args.out, trace_path=args.trace,
                           backend_name=args.backend)
    print(f"[+] Run directory: {outcome.run_dir}")
    print(f"[+] Outputs: {outcome.outputs_path} ({len(outcome.outputs)} {compiled.final_type.name})")
    print(f"[+] Trace: {outcome.trace_path}")
    if outcome.final_record_ids:
        print(f"[+] Final records: {', '.join(f'#{rid}' for rid in outcome.final_record_ids)}")
    for line in outcome.errors:
        print(f"[!] {line}")
    return 0 if outcome.ok else 1


def cmd_trace(args: argparse.Namespace) -> int:
    records = trace.load_jsonl(args.trace_file)
    if args.trace_cmd == "show":
        report = trace.show(records, status=args.status)
        if report:
            print(report)
        return 0

    lin = trace.lineage(records, args.record_id)
    print(f"[+] Record #{lin.record.record_id}: {lin.record.target} << {lin.record.source} ({lin.record.kind})")
    print("    chain: " + " <- ".join(f"#{rid}" for rid in lin.chain))
    for slot_name, evidence in lin.evidence.items():
        print(f"    {slot_name}: {', '.join(evidence) if evidence else '-'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transduce", description="Typed LLM transduction workflows")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="Check a workflow file without running it")
    p_validate.add_argument("workflow")
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="Run a workflow")
    p_run.add_argument("workflow")
    p_run.add_argument("--backend", choices=("mock", "http"), default="mock")
    p_run.add_argument("--out", help="Output directory (default: a new directory under data/runs)")
    p_run.add_argument("--trace", help="Trace file (default: <out>/trace.jsonl)")
    p_run.add_argument("--max-concurrency", type=int)
    p_run.add_argument("--batch-size", type=int)
    p_run.add_argument("--failure-mode", choices=("fail_fast", "collect"))
    p_run.add_argument("--rules", help="Mock rules file (default: the workflow's mock_rules)")
    p_run.add_argument("--model", help="Model name for --backend http")
    p_run.add_argument("--base-url", help="OpenAI-compatible endpoint for --backend http")
    p_run.set_defaults(func=cmd_run)

    p_trace = sub.add_parser("trace", help="Inspect a trace file")
    trace_sub = p_trace.add_subparsers(dest="trace_cmd", required=True)
    p_show = trace_sub.add_parser("show", help="List records in id order")
    p_show.add_argument("trace_file")
    p_show.add_argument("--status", choices=(trace.STATUS_OK, trace.STATUS_ERROR, trace.STATUS_CANCELLED))
    p_lineage = trace_sub.add_parser("lineage", help="Ancestors and per-slot evidence of one record")
    p_lineage.add_argument("trace_file")
    p_lineage.add_argument("record_id", type=int)
    p_trace.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
    )
    load_env()
    try:
        return args.func(args)
    except TransduceError as e:
        print(f"[x] {type(e).__name__}: {e}")
        return 1
    except OSError as e:
        print(f"[x] {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
