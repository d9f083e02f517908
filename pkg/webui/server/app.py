# server/app.py
import json
import logging
import os
import secrets

from flask import Flask, jsonify, request, send_file, send_from_directory

from transduce import trace
from transduce.common import (
    get_latest_run_dir,
    get_repo_root,
    get_runs_dir,
    list_saved_runs,
    read_metadata,
    resolve_run_dir,
    update_metadata,
)
from transduce.errors import UnknownRecord
from transduce.runner import OUTPUTS_FILE, PARTIAL_OUTPUTS_FILE, SUMMARY_FILE, TRACE_FILE
from transduce.settings import load_env

logger = logging.getLogger(__name__)

API_KEY_FILE = os.path.join(os.path.dirname(__file__), "api_key.txt")
BASE_DIR = get_repo_root()
DOWNLOADABLE = {OUTPUTS_FILE, PARTIAL_OUTPUTS_FILE, SUMMARY_FILE, TRACE_FILE, "metadata.json"}

# Prefer .env, fallback to .env.example for new users
load_env()

app = Flask(__name__)


def get_api_key():
    """TRANSDUCE_API_KEY, else the key in api_key.txt (generated on first use)."""
    key = app.config.get("API_KEY") or os.environ.get("TRANSDUCE_API_KEY")
    if key:
        return key
    if os.path.exists(API_KEY_FILE):
        with open(API_KEY_FILE) as f:
            key = f.read().strip()
    else:
        key = secrets.token_urlsafe(32)
        with open(API_KEY_FILE, "w") as f:
            f.write(key)
        logger.info("[+] Generated new API key in %s", API_KEY_FILE)
    app.config["API_KEY"] = key
    return key


@app.before_request
def require_api_key_for_api():
    # Only enforce on /api routes; the docs stay public
    if not request.path.startswith("/api/") or request.path.startswith("/api/docs"):
        return
    key = request.headers.get("X-API-Key")
    if not key or not secrets.compare_digest(key, get_api_key()):
        return jsonify({"error": "Unauthorized"}), 401


@app.after_request
def add_no_cache_headers(response):
    if request.path.startswith("/api/download"):
        response.headers["Cache-Control"] = "no-store, no-cache, must-revalidate, max-age=0"
        response.headers["Pragma"] = "no-cache"
        response.headers["Expires"] = "0"
    return response


def _load_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _run_dir_or_404(name):
    run_dir = resolve_run_dir(name)
    if run_dir is None:
        return None, (jsonify({"error": f"run not found: {name}"}), 404)
    return run_dir, None


@app.route("/api/runs")
def list_runs():
    """Saved runs, newest first."""
    return jsonify(list_saved_runs())


@app.route("/api/latest_run_summary")
def latest_summary():
    latest_dir = get_latest_run_dir()
    if not latest_dir:
        return jsonify({"error": "No runs found yet"}), 404

    summary_path = os.path.join(latest_dir, SUMMARY_FILE)
    if not os.path.exists(summary_path):
        logger.warning("[!] %s not found in %s", SUMMARY_FILE, latest_dir)
        return jsonify({"error": "No summary found yet"}), 404

    return jsonify({
        "mtime": os.path.getmtime(summary_path),
        "data": _load_json(summary_path),
        "run_dir": os.path.basename(latest_dir),
    })


@app.route("/api/runs/<run_name>/summary")
def run_summary(run_name):
    run_dir, err = _run_dir_or_404(run_name)
    if err:
        return err
    summary_path = os.path.join(run_dir, SUMMARY_FILE)
    if not os.path.exists(summary_path):
        return jsonify({"error": f"{SUMMARY_FILE} not found"}), 404
    summary = _load_json(summary_path)
    # --- merge in metadata.json if it exists ---
    meta = read_metadata(run_dir) or {}
    summary["notes"] = meta.get("notes", "")
    summary["saved"] = meta.get("saved", False)
    return jsonify(summary)


@app.route("/api/runs/<run_name>/outputs")
def run_outputs(run_name):
    run_dir, err = _run_dir_or_404(run_name)
    if err:
        return err
    for filename, partial in ((OUTPUTS_FILE, False), (PARTIAL_OUTPUTS_FILE, True)):
        path = os.path.join(run_dir, filename)
        if os.path.exists(path):
            return jsonify({"partial": partial, **_load_json(path)})
    return jsonify({"error": "no outputs in this run"}), 404


def _trace_records(run_dir):
    path = os.path.join(run_dir, TRACE_FILE)
    return trace.load_jsonl(path) if os.path.exists(path) else None


@app.route("/api/runs/<run_name>/trace")
def run_trace(run_name):
    run_dir, err = _run_dir_or_404(run_name)
    if err:
        return err
    records = _trace_records(run_dir)
    if records is None:
        return jsonify({"error": f"{TRACE_FILE} not found"}), 404
    status = request.args.get("status")
    return jsonify([r.to_dict() for r in records if not status or r.status == status])


@app.route("/api/runs/<run_name>/lineage/<int:record_id>")
def run_lineage(run_name, record_id):
    run_dir, err = _run_dir_or_404(run_name)
    if err:
        return err
    records = _trace_records(run_dir)
    if records is None:
        return jsonify({"error": f"{TRACE_FILE} not found"}), 404
    try:
        lin = trace.lineage(records, record_id)
    except UnknownRecord as e:
        return jsonify({"error": str(e)}), 404
    return jsonify({
        "record_id": record_id,
        "source": lin.record.source,
        "target": lin.record.target,
        "chain": lin.chain,
        "evidence": lin.evidence,
    })


# ====== Save/Download API ======

@app.route("/api/save_run", methods=["POST"])
def save_run():
    """Marks a run directory as saved and optionally adds notes."""
    data = request.get_json(force=True, silent=True) or {}
    name = data.get("run_dir")
    notes = data.get("notes", "")

    if not name:
        return jsonify({"error": "Missing run_dir"}), 400
    run_dir, err = _run_dir_or_404(name)
    if err:
        return err
    if read_metadata(run_dir) is None:
        return jsonify({"error": f"metadata.json not found in {name}"}), 404

    update_metadata(run_dir, saved=True, notes=notes)
    logger.info("[+] Marked run as saved: %s", run_dir)
    return jsonify({"status": "saved", "run_dir": os.path.basename(run_dir), "notes": notes})


@app.route("/api/download")
def download():
    filename = os.path.basename(request.args.get("filename", OUTPUTS_FILE))
    if filename not in DOWNLOADABLE:
        return jsonify({"error": f"not downloadable: {filename}"}), 400
    run_dir_arg = request.args.get("dir")

    # Use provided run dir if available, otherwise fall back to latest
    run_dir = resolve_run_dir(run_dir_arg) if run_dir_arg else get_latest_run_dir()
    if not run_dir or not os.path.isdir(run_dir):
        return jsonify({"error": "No valid run directory found"}), 404

    path = os.path.join(run_dir, filename)
    if not os.path.exists(path):
        return jsonify({"error": f"File not found: {filename}"}), 404
    return send_file(path, as_attachment=True, conditional=False)


@app.route("/api/docs")
@app.route("/api/docs/<path:filename>")
def api_docs(filename="openapi.yaml"):
    return send_from_directory(os.path.join(BASE_DIR, "docs"), filename)


def run_server(port=8443):
    """Run the Flask server, with HTTPS when certificates are present."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cert_dir = os.path.join(os.path.dirname(__file__), "certs")
    cert_path = os.path.join(cert_dir, "server.crt")
    key_path = os.path.join(cert_dir, "server.key")

    if not os.path.exists(cert_path) or not os.path.exists(key_path):
        logger.warning("[!] HTTPS certificate not found in %s, falling back to HTTP", cert_dir)
        ssl_context = None
    else:
        ssl_context = (cert_path, key_path)
        logger.info("[+] Using HTTPS certificate from %s", cert_dir)

    get_api_key()
    logger.info("[+] Serving runs from %s", get_runs_dir())
    app.run(host="0.0.0.0", port=port, debug=False, ssl_context=ssl_context)
