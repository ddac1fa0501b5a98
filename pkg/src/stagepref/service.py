"""HTTP labeling service: brokers human preference labels into a loop.

The service owns a table of pending queries (each carrying render-ready
segment payloads) and a JSONL-backed preference buffer. All mutations are
serialized through one lock, and every label is flushed to disk before the
200 goes out, so an acknowledged label survives a crash. Rebuilding the
store from the same query source and log replays the labels.

Wire format (JSON over HTTP/1.1, UTF-8):

* ``GET /api/queries/next`` -> the oldest pending query, or 204 when none;
* ``POST /api/queries/{id}/label`` with ``{"label": 0|1|"tie"}`` for
  preference queries, ``{"same_stage": true|false}`` for same-stage
  judgments, or ``{"skip": true}`` for either -> 200; 404 unknown id,
  409 already resolved, 400 malformed body;
* ``GET /api/status`` -> counts by status;
* ``GET /api/segments/{id}`` -> one segment's rendering payload.

Query payloads never expose selector provenance or rewards.
"""
from __future__ import annotations

import json
import mimetypes
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .gridworld import GridWorld
from .loop import LabelMailbox
from .mdp import Trajectory, segment_arrays
from .rewards import PreferenceLog, PreferenceRecord, segment_from_dict

QUERY_MODES = ("preference", "same_stage")


@dataclass
class StoredQuery:
    qid: str
    mode: str
    record: PreferenceRecord
    segments: list[dict]
    status: str = "pending"

    def public_payload(self, grid: dict) -> dict:
        # no selector, no rewards: labelers must not know which algorithm asked
        return {
            "id": self.qid,
            "mode": self.mode,
            "segments": self.segments,
            "grid": grid,
        }


class QueryStore:
    """Pending-query table plus the preference buffer, with one-writer locking."""

    def __init__(self, grid: dict, log_path: str | None = None):
        self.grid = dict(grid)
        self.lock = threading.Lock()
        self.queries: dict[str, StoredQuery] = {}
        self.order: list[str] = []
        self.log = PreferenceLog(log_path)
        self._fresh: list[PreferenceRecord] = []
        self._replayed = {
            r.query_id: r for r in self.log.records if r.query_id
        }

    # -- population ---------------------------------------------------------

    def add_query(self, qid: str, mode: str, record: PreferenceRecord,
                  segments: list[dict]) -> None:
        if mode not in QUERY_MODES:
            raise ValueError(f"mode must be one of {QUERY_MODES}")
        if len(segments) != 2:
            raise ValueError("a query carries exactly two segment payloads")
        with self.lock:
            if qid in self.queries:
                raise ValueError(f"duplicate query id {qid!r}")
            record.query_id = qid
            q = StoredQuery(qid=qid, mode=mode, record=record, segments=segments)
            replayed = self._replayed.get(qid)
            if replayed is not None:
                # the log already holds a label from a previous process life
                q.status = "skipped" if replayed.label == "skip" else "labeled"
                q.record = replayed
            self.queries[qid] = q
            self.order.append(qid)

    # -- reads ---------------------------------------------------------------

    def next_pending(self) -> StoredQuery | None:
        with self.lock:
            for qid in self.order:
                if self.queries[qid].status == "pending":
                    return self.queries[qid]
        return None

    def status_counts(self) -> dict:
        with self.lock:
            counts = {"pending": 0, "labeled": 0, "skipped": 0}
            for q in self.queries.values():
                counts[q.status] += 1
            counts["total"] = len(self.queries)
            return counts

    def segment_payload(self, sid: str) -> dict | None:
        with self.lock:
            for q in self.queries.values():
                for seg in q.segments:
                    if seg.get("id") == sid:
                        return seg
        return None

    # -- label intake ---------------------------------------------------------

    def submit_label(self, qid: str, body: dict) -> tuple[int, dict]:
        """Returns (http status, response payload); persists before 200."""
        with self.lock:
            q = self.queries.get(qid)
            if q is None:
                return 404, {"error": f"unknown query id {qid!r}"}
            if q.status != "pending":
                return 409, {"error": f"query {qid!r} already {q.status}"}
            label = _parse_label(q.mode, body)
            if label is None:
                return 400, {"error": "malformed label body for mode " + q.mode}
            q.record.label = label
            q.status = "skipped" if label == "skip" else "labeled"
            # flush-before-ack: the record hits the JSONL before the 200
            self.log.append(q.record)
            self._fresh.append(q.record)
            return 200, {"id": qid, "status": q.status}

    def drain_labeled(self) -> list[PreferenceRecord]:
        with self.lock:
            out, self._fresh = self._fresh, []
            return out


def _parse_label(mode: str, body: dict):
    if not isinstance(body, dict):
        return None
    if body.get("skip") is True and len(body) == 1:
        return "skip"
    if mode == "preference":
        if set(body) != {"label"}:
            return None
        v = body["label"]
        if v in (0, 1) and not isinstance(v, bool):
            return int(v)
        if v == "tie":
            return "tie"
        return None
    if set(body) != {"same_stage"}:
        return None
    v = body["same_stage"]
    if isinstance(v, bool):
        return "same" if v else "different"
    return None


# ---------------------------------------------------------------------------
# bridging a store to a running loop


class ServiceMailbox(LabelMailbox):
    """Routes a human-teacher loop's queries through a :class:`QueryStore`.

    Submitted records become pending queries with rendered payloads; collect
    drains whatever the store has labeled since the last call.
    """

    def __init__(self, store: QueryStore, world: GridWorld,
                 trajectories: list[Trajectory], mode: str = "preference"):
        super().__init__()
        self.store = store
        self.world = world
        self.trajectories = trajectories
        self.mode = mode
        self._counter = 0

    def submit(self, records: list[PreferenceRecord]) -> None:
        for record in records:
            self._counter += 1
            qid = f"q{self._counter:05d}"
            segments = [
                _segment_payload(self.world, self.trajectories, record, 0, qid),
                _segment_payload(self.world, self.trajectories, record, 1, qid),
            ]
            self.store.add_query(qid, self.mode, record, segments)
        self.pending.extend(records)

    def collect(self) -> list[PreferenceRecord]:
        ready = self.store.drain_labeled()
        done = {id(r) for r in ready}
        self.pending = [r for r in self.pending if id(r) not in done]
        return ready


def _segment_payload(world: GridWorld, trajs: list[Trajectory],
                     record: PreferenceRecord, which: int, qid: str) -> dict:
    seg = record.sigma0 if which == 0 else record.sigma1
    states, _ = segment_arrays(trajs[seg.source], seg)
    return {"id": f"{qid}-{which}", "frames": world.frames(states)}


# ---------------------------------------------------------------------------
# static query files (serve without a live loop)


def export_query_file(path: str, world: GridWorld, trajs: list[Trajectory],
                      records: list[PreferenceRecord], mode: str = "preference") -> None:
    """Write a self-contained query file for the standalone service."""
    queries = []
    for i, record in enumerate(records, start=1):
        qid = f"q{i:05d}"
        queries.append({
            "id": qid,
            "mode": mode,
            "selector": record.selector,
            "teacher": record.teacher,
            "sigma0": record.to_json_dict()["sigma0"],
            "sigma1": record.to_json_dict()["sigma1"],
            "segments": [
                _segment_payload(world, trajs, record, 0, qid),
                _segment_payload(world, trajs, record, 1, qid),
            ],
        })
    doc = {"grid": world.grid_payload(), "queries": queries}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_query_file(path: str, log_path: str | None = None) -> QueryStore:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    store = QueryStore(grid=doc["grid"], log_path=log_path)
    for q in doc["queries"]:
        record = PreferenceRecord(
            sigma0=segment_from_dict(q["sigma0"]),
            sigma1=segment_from_dict(q["sigma1"]),
            label=None,
            teacher=str(q.get("teacher", "human")),
            created_at=0.0,
            selector=str(q.get("selector", "")),
        )
        store.add_query(q["id"], q["mode"], record, q["segments"])
    return store


def aligned_ratio_report(records: list[PreferenceRecord]) -> dict[str, dict]:
    """Per-selector share of same-stage judgments answered "same".

    Only same/different labels participate; preference labels and skips are
    ignored. Selectors with no judgments are omitted.
    """
    tally: dict[str, list[int]] = {}
    for r in records:
        if r.label not in ("same", "different"):
            continue
        sel = r.selector or "unknown"
        hit = tally.setdefault(sel, [0, 0])
        hit[0] += int(r.label == "same")
        hit[1] += 1
    return {
        sel: {"same": n_same, "total": total, "ratio": n_same / total}
        for sel, (n_same, total) in sorted(tally.items())
    }


# ---------------------------------------------------------------------------
# the HTTP layer


class _Handler(BaseHTTPRequestHandler):
    server_version = "stagepref/0.1"

    @property
    def store(self) -> QueryStore:
        return self.server.store  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # quiet by default
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    def _send_json(self, code: int, payload: dict | None) -> None:
        body = b"" if payload is None else json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self._cors()
        if body:
            self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def do_OPTIONS(self) -> None:  # CORS preflight
        self._send_json(204, None)

    def do_GET(self) -> None:
        path = self.path.split("?", 1)[0]
        if path == "/api/queries/next":
            q = self.store.next_pending()
            if q is None:
                self._send_json(204, None)
            else:
                self._send_json(200, q.public_payload(self.store.grid))
            return
        if path == "/api/status":
            self._send_json(200, self.store.status_counts())
            return
        if path.startswith("/api/segments/"):
            seg = self.store.segment_payload(path.rsplit("/", 1)[1])
            if seg is None:
                self._send_json(404, {"error": "unknown segment id"})
            else:
                self._send_json(200, seg)
            return
        if self._serve_static(path):
            return
        self._send_json(404, {"error": f"no route for {path}"})

    def do_POST(self) -> None:
        path = self.path.split("?", 1)[0]
        parts = path.strip("/").split("/")
        if len(parts) == 4 and parts[:2] == ["api", "queries"] and parts[3] == "label":
            try:
                n = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(n).decode("utf-8")) if n else {}
            except (ValueError, json.JSONDecodeError):
                self._send_json(400, {"error": "body must be JSON"})
                return
            code, payload = self.store.submit_label(parts[2], body)
            self._send_json(code, payload)
            return
        self._send_json(404, {"error": f"no route for {path}"})

    def _serve_static(self, path: str) -> bool:
        root = getattr(self.server, "static_dir", None)
        if root is None or path.startswith("/api/"):
            return False
        rel = "index.html" if path == "/" else path.lstrip("/")
        full = os.path.realpath(os.path.join(root, rel))
        if not full.startswith(os.path.realpath(root) + os.sep) \
                and full != os.path.realpath(root):
            return False
        if not os.path.isfile(full):
            return False
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            data = fh.read()
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)
        return True


class LabelingService:
    """Owns the HTTP server; start() binds, serve() blocks, stop() shuts down."""

    def __init__(self, store: QueryStore, port: int = 8787,
                 static_dir: str | None = None, verbose: bool = False):
        self.server = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
        self.server.store = store  # type: ignore[attr-defined]
        self.server.static_dir = static_dir  # type: ignore[attr-defined]
        self.server.verbose = verbose  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def start_background(self) -> "LabelingService":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve(self) -> None:
        self.server.serve_forever()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
