"""Local HTTP service for human scoring sessions.

Serves the explained cases (overlay slices plus table-relevance bars) to a
browser UI, collects 1/2/3 agreement scores and the 18-feature ranking, and
flushes the buffered scores to the run directory's scores file on close.
When a built UI bundle directory is configured, its flat files are served
at / alongside the API.

Ground-truth labels and correctness never appear in any payload. Handlers
run on the threading server; every session mutation and read goes through
one lock, so score writes are serialized.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import threading
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .agreement import FEATURE_NAMES, save_ranking, write_scores_csv

_QUEUE_STREAM = 13
_OVERLAY_NAME = re.compile(r"^[A-Za-z0-9_]+\.png$")

# the UI bundle is flat; a single path segment keeps traversal impossible
_STATIC_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")
_STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".svg": "image/svg+xml",
    ".map": "application/json",
}


class ScoringSession:
    """Shuffled val+test case queue with buffered, re-editable scores.

    Scores live in memory until close(), which writes the scores CSV via
    write-temp-rename so a crash never leaves a half file.
    """

    def __init__(self, case_ids, seed: int, scores_path):
        rng = np.random.default_rng([seed, _QUEUE_STREAM])
        order = rng.permutation(len(case_ids))
        self.queue = [case_ids[i] for i in order]
        self.scores_path = Path(scores_path)
        self.scores: dict = {}
        self.open = True
        self.lock = threading.Lock()

    def record(self, case_id: str, alpha_image: int, rater: str) -> None:
        timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        self.scores[case_id] = (case_id, alpha_image, rater, timestamp)

    def next_unscored(self):
        for case_id in self.queue:
            if case_id not in self.scores:
                return case_id
        return None

    def pending_count(self) -> int:
        with self.lock:
            return len(self.scores) if self.open else 0

    def close(self) -> int:
        rows = [self.scores[cid] for cid in self.queue if cid in self.scores]
        fd, tmp = tempfile.mkstemp(dir=self.scores_path.parent,
                                   suffix=".tmp")
        os.close(fd)
        try:
            write_scores_csv(rows, tmp)
            os.replace(tmp, self.scores_path)
        except BaseException:
            os.unlink(tmp)
            raise
        self.open = False
        return len(rows)


class _Handler(BaseHTTPRequestHandler):
    # the noisy default logger drowns test output
    def log_message(self, *args) -> None:
        pass

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._reply(status, {"error": message})

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return None

    # ---- GET ----

    def do_GET(self) -> None:
        server = self.server
        if self.path == "/api/cases":
            with server.session.lock:
                self._reply(200, self._queue_payload())
            return
        match = re.fullmatch(r"/api/cases/([A-Za-z0-9_]+)/slices", self.path)
        if match:
            self._get_slices(match.group(1))
            return
        if self.path == "/api/ranking":
            with server.session.lock:
                self._reply(200, {"ranking": list(server.ranking)})
            return
        match = re.fullmatch(r"/files/overlays/([^/]+)", self.path)
        if match:
            self._get_overlay(match.group(1))
            return
        if server.static_dir is not None and not self.path.startswith("/api/"):
            self._get_static(self.path)
            return
        self._error(404, f"no route {self.path}")

    def _queue_payload(self) -> dict:
        session = self.server.session
        cases = []
        for case_id in session.queue:
            row = session.scores.get(case_id)
            cases.append({"case_id": case_id, "scored": row is not None,
                          "alpha_image": row[1] if row else None})
        return {
            "open": session.open,
            "progress": {"scored": len(session.scores),
                         "total": len(session.queue)},
            "cases": cases,
            "next_unscored": session.next_unscored(),
        }

    def _get_slices(self, case_id: str) -> None:
        server = self.server
        maps = server.maps_by_case.get(case_id)
        if maps is None or case_id not in set(server.session.queue):
            self._error(404, f"unknown case {case_id!r}")
            return
        names = sorted(p.name for p in
                       server.overlays_dir.glob(f"{case_id}_slice_*.png"))
        with server.session.lock:
            row = server.session.scores.get(case_id)
            payload = {
                "case_id": case_id,
                "slices": [f"/files/overlays/{name}" for name in names],
                "table_relevance": {
                    "names": list(FEATURE_NAMES),
                    "values": [float(v) for v in maps.feature_relevance],
                },
                "degenerate_image": maps.degenerate_image,
                "degenerate_table": maps.degenerate_table,
                "alpha_image": row[1] if row else None,
            }
        self._reply(200, payload)

    def _get_overlay(self, name: str) -> None:
        if not _OVERLAY_NAME.fullmatch(name):
            self._error(404, "bad overlay name")
            return
        path = self.server.overlays_dir / name
        if not path.is_file():
            self._error(404, f"no overlay {name}")
            return
        data = path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _get_static(self, path: str) -> None:
        name = "index.html" if path == "/" else path.lstrip("/")
        content_type = _STATIC_TYPES.get(Path(name).suffix)
        if not _STATIC_NAME.fullmatch(name) or content_type is None:
            self._error(404, f"no route {path}")
            return
        file_path = self.server.static_dir / name
        if not file_path.is_file():
            self._error(404, f"no bundle file {name}")
            return
        data = file_path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    # ---- POST / PUT ----

    def do_POST(self) -> None:
        match = re.fullmatch(r"/api/cases/([A-Za-z0-9_]+)/score", self.path)
        if match:
            self._post_score(match.group(1))
            return
        if self.path == "/api/session/close":
            self._post_close()
            return
        self._error(404, f"no route {self.path}")

    def _post_score(self, case_id: str) -> None:
        server = self.server
        body = self._read_json()
        if body is None or not isinstance(body, dict):
            self._error(422, "body must be a JSON object")
            return
        alpha = body.get("alpha_image")
        rater = body.get("rater")
        if alpha not in (1, 2, 3):
            self._error(422, f"alpha_image must be 1, 2 or 3, got {alpha!r}")
            return
        if not isinstance(rater, str) or not rater:
            self._error(422, "rater must be a non-empty string")
            return
        with server.session.lock:
            if case_id not in set(server.session.queue):
                self._error(404, f"unknown case {case_id!r}")
                return
            if not server.session.open:
                self._error(409, "session is closed")
                return
            server.session.record(case_id, alpha, rater)
            payload = {"recorded": True, "case_id": case_id,
                       "alpha_image": alpha,
                       "next_unscored": server.session.next_unscored()}
        self._reply(200, payload)

    def _post_close(self) -> None:
        server = self.server
        with server.session.lock:
            if not server.session.open:
                self._error(409, "session already closed")
                return
            n_rows = server.session.close()
        self._reply(200, {"closed": True, "n_scores": n_rows,
                          "scores_file": str(server.session.scores_path)})

    def do_PUT(self) -> None:
        if self.path != "/api/ranking":
            self._error(404, f"no route {self.path}")
            return
        server = self.server
        body = self._read_json()
        if body is None or not isinstance(body, dict):
            self._error(422, "body must be a JSON object")
            return
        ranking = body.get("ranking")
        if (not isinstance(ranking, list)
                or sorted(ranking) != sorted(FEATURE_NAMES)):
            self._error(422, "ranking must be a permutation of the "
                             "18 feature names")
            return
        with server.session.lock:
            if not server.session.open:
                self._error(409, "session is closed")
                return
            server.ranking = list(ranking)
            save_ranking(server.ranking, server.ranking_path)
        self._reply(200, {"ranking": list(ranking)})


class ScoringServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, maps_by_case, case_ids, ranking,
                 overlays_dir, scores_path, ranking_path, seed: int,
                 static_dir=None):
        super().__init__(address, _Handler)
        self.maps_by_case = dict(maps_by_case)
        self.ranking = list(ranking)
        self.overlays_dir = Path(overlays_dir)
        self.ranking_path = Path(ranking_path)
        self.static_dir = Path(static_dir) if static_dir is not None else None
        self.session = ScoringSession(list(case_ids), seed, scores_path)


def make_server(maps_by_case, case_ids, ranking, overlays_dir, scores_path,
                ranking_path, seed: int, port: int,
                host: str = "127.0.0.1", static_dir=None) -> ScoringServer:
    return ScoringServer((host, port), maps_by_case, case_ids, ranking,
                         overlays_dir, scores_path, ranking_path, seed,
                         static_dir=static_dir)
