"""Shared fixtures: tiny datasets and a local HTTP text-backend stub."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from crosskt.data import InteractionRecord, preprocess


def small_dataset():
    """Two courses, four questions and two concepts each, all filters passed."""
    records = []
    for i in range(6):
        learner = f"L{i}"
        ts = 0
        for j in range(4):
            ts += 10
            records.append(InteractionRecord(learner, "alg", f"aq{j}",
                                             (i + j) % 2, ts))
            ts += 10
            records.append(InteractionRecord(learner, "ds", f"dq{j}",
                                             (i + j + 1) % 2, ts))
    cmap = {
        "aq0": {"ac0"}, "aq1": {"ac0", "ac1"}, "aq2": {"ac1"}, "aq3": {"ac1"},
        "dq0": {"dc0"}, "dq1": {"dc0"}, "dq2": {"dc1"}, "dq3": {"dc1"},
    }
    return preprocess(records, min_answers_per_question=1, min_per_course=1,
                      min_cross_course=2, concept_map=cmap)


@pytest.fixture
def dataset():
    return small_dataset()


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length) or b"{}")
        server = self.server
        server.requests.append({
            "path": self.path,
            "payload": payload,
            "auth": self.headers.get("Authorization"),
        })
        if server.fail_next > 0:
            server.fail_next -= 1
            self.send_response(500)
            self.end_headers()
            return
        reply = server.reply_fn(payload)
        body = json.dumps({"reply": reply}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        pass


class StubServer:
    """Local HTTP endpoint answering {"prompt": ...} with {"reply": ...}."""

    def __init__(self, reply_fn=None):
        self.httpd = HTTPServer(("127.0.0.1", 0), _StubHandler)
        self.httpd.requests = []
        self.httpd.fail_next = 0
        self.httpd.reply_fn = reply_fn or (lambda payload: "yes")
        self.thread = threading.Thread(target=self.httpd.serve_forever,
                                       daemon=True)
        self.thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/complete"

    @property
    def requests(self):
        return self.httpd.requests

    def fail_next(self, n: int) -> None:
        self.httpd.fail_next = n

    def set_reply(self, fn) -> None:
        self.httpd.reply_fn = fn

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()
