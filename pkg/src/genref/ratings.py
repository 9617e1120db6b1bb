"""Blinded rating collection service.

Raters receive question/answer/rationale triples drawn from two pools, model
outputs and reference texts, shuffled per session at a configured mixing
ratio. The pool a task came from is never serialized to the rater. Submitted
scores go to an append-only JSONL log, fsynced per record, and aggregate into
mean and sample standard deviation per criterion and per pool.
"""

import hashlib
import json
import os
import statistics
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

CRITERIA = (
    "How well-formed and grammatically correct is the answer?",
    "How well-formed and grammatically correct is the rationale?",
    "How relevant is the answer to the image-question pair?",
    "How well does the rationale explain the answer with respect to the image-question pair?",
    "Irrespective of the image-question pair, how well does the rationale explain the answer?",
)
N_CRITERIA = len(CRITERIA)
SOURCES = ("generated", "ground_truth")


class ServiceError(Exception):
    def __init__(self, status, code, message, detail=""):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail

    def to_wire(self):
        return {"code": self.code, "message": self.message, "detail": self.detail}


def validate_scores(scores):
    """Exactly five integers, each 1..5; errors name the first bad criterion."""
    if not isinstance(scores, (list, tuple)) or len(scores) != N_CRITERIA:
        raise ServiceError(400, "validation", "exactly five scores required",
                           "got %r" % (scores,))
    for i, s in enumerate(scores):
        if isinstance(s, bool) or not isinstance(s, int):
            raise ServiceError(400, "validation",
                               "criterion %d score must be an integer" % (i + 1),
                               "got %r" % (s,))
        if not 1 <= s <= 5:
            raise ServiceError(400, "validation",
                               "criterion %d score out of range 1..5" % (i + 1),
                               "got %d" % s)
    return tuple(scores)


@dataclass(frozen=True)
class RatingTask:
    task_id: str
    sample_id: str
    question: str
    answer: str
    rationale: str
    source: str  # kept server-side; excluded from to_wire()
    criteria: tuple = CRITERIA

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError("unknown source %r" % self.source)

    def to_wire(self):
        # blinding: the rater-facing payload carries no source marker
        return {
            "task_id": self.task_id,
            "sample_id": self.sample_id,
            "question": self.question,
            "answer": self.answer,
            "rationale": self.rationale,
            "criteria": list(self.criteria),
        }


@dataclass(frozen=True)
class RatingRecord:
    session_id: str
    task_id: str
    scores: tuple
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "scores", validate_scores(self.scores))


@dataclass
class AggregateReport:
    criteria: tuple
    by_source: dict  # source -> list of {"mean","std","count"} per criterion
    total_records: int

    def __post_init__(self):
        for rows in self.by_source.values():
            for row in rows:
                if row["count"] == 0:
                    continue
                if not 1.0 <= row["mean"] <= 5.0:
                    raise ValueError("mean out of [1,5]: %r" % row)
                if row["std"] < 0.0:
                    raise ValueError("negative std: %r" % row)

    def to_wire(self):
        return {
            "criteria": list(self.criteria),
            "by_source": self.by_source,
            "total_records": self.total_records,
        }

    def table(self):
        """One row per criterion, mean ± std columns per source."""
        def cell(row):
            if row["count"] == 0:
                return "-"
            return "%.2f ± %.2f (n=%d)" % (row["mean"], row["std"], row["count"])

        rows = [("criterion",) + SOURCES]
        for i, text in enumerate(self.criteria):
            rows.append((text,) + tuple(cell(self.by_source[s][i]) for s in SOURCES))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        )


def aggregate_records(records):
    """records: iterable of dicts with "source" and "scores" keys."""
    records = list(records)
    if not records:
        raise ServiceError(409, "empty_report", "no ratings recorded yet")
    buckets = {s: [[] for _ in range(N_CRITERIA)] for s in SOURCES}
    for rec in records:
        for i, score in enumerate(rec["scores"]):
            buckets[rec["source"]][i].append(score)
    by_source = {}
    for source, cols in buckets.items():
        rows = []
        for vals in cols:
            if not vals:
                rows.append({"mean": None, "std": None, "count": 0})
            else:
                std = statistics.stdev(vals) if len(vals) > 1 else 0.0
                rows.append({
                    "mean": float(statistics.mean(vals)),
                    "std": float(std),
                    "count": len(vals),
                })
        by_source[source] = rows
    return AggregateReport(criteria=CRITERIA, by_source=by_source,
                           total_records=len(records))


def aggregate_from_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        return aggregate_records(json.loads(ln) for ln in fh if ln.strip())


def _task_id(source, sample_id, seed):
    raw = "%s|%s|%d" % (source, sample_id, seed)
    return hashlib.sha256(raw.encode()).hexdigest()[:12]


class RatingService:
    """Sessions, playlists, rating intake, and aggregation.

    generated / ground_truth: lists of dicts with sample_id, question,
    answer, rationale. Playlists are deterministic in (seed, session_id).
    """

    def __init__(self, generated, ground_truth, playlist_size=10,
                 gt_ratio=0.34, seed=0, log_path=None):
        if not 0.0 <= gt_ratio <= 1.0:
            raise ValueError("gt_ratio must lie in [0,1]")
        n_gt = round(playlist_size * gt_ratio)
        n_gen = playlist_size - n_gt
        if n_gt > len(ground_truth) or n_gen > len(generated):
            raise ValueError(
                "pools too small: playlist needs %d reference and %d model items" % (n_gt, n_gen))
        self.playlist_size = playlist_size
        self.n_gt = n_gt
        self.n_gen = n_gen
        self.seed = int(seed)
        self._tasks = {}
        self._pool_ids = {"generated": [], "ground_truth": []}
        for source, items in (("generated", generated), ("ground_truth", ground_truth)):
            for it in items:
                tid = _task_id(source, it["sample_id"], self.seed)
                if tid in self._tasks:
                    raise ValueError("duplicate sample_id %r in %s pool" % (it["sample_id"], source))
                self._tasks[tid] = RatingTask(
                    task_id=tid,
                    sample_id=str(it["sample_id"]),
                    question=str(it["question"]),
                    answer=str(it["answer"]),
                    rationale=str(it["rationale"]),
                    source=source,
                )
                self._pool_ids[source].append(tid)
        self._lock = threading.Lock()
        self._rng = np.random.default_rng(self.seed)
        self._sessions = {}   # session_id -> {"playlist": [...], "rated": set, "issued": set}
        self._records = []    # append-only; mirrors the log
        self._acks = {}       # (session_id, task_id) -> original ack dict
        self._session_count = 0
        self._log_path = log_path
        self._log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def close(self):
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    # -- sessions ----------------------------------------------------------

    def _playlist_for(self, session_id):
        digest = hashlib.sha256(session_id.encode()).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "big")])
        gt = rng.choice(len(self._pool_ids["ground_truth"]), size=self.n_gt, replace=False)
        gen = rng.choice(len(self._pool_ids["generated"]), size=self.n_gen, replace=False)
        ids = [self._pool_ids["ground_truth"][int(i)] for i in gt]
        ids += [self._pool_ids["generated"][int(i)] for i in gen]
        order = rng.permutation(len(ids))
        return [ids[int(i)] for i in order]

    def create_session(self):
        with self._lock:
            self._session_count += 1
            raw = "%d|%d|%d" % (self.seed, self._session_count, self._rng.integers(2 ** 32))
            sid = "sess-" + hashlib.sha256(raw.encode()).hexdigest()[:12]
            self._sessions[sid] = {
                "playlist": self._playlist_for(sid),
                "rated": set(),
                "issued": set(),
            }
            return sid

    def _session(self, session_id):
        sess = self._sessions.get(session_id)
        if sess is None:
            raise ServiceError(404, "unknown_session", "no such session",
                               "session_id=%r" % session_id)
        return sess

    def next_task(self, session_id):
        """The next unrated task in the playlist, or None when done."""
        with self._lock:
            sess = self._session(session_id)
            for tid in sess["playlist"]:
                if tid not in sess["rated"]:
                    sess["issued"].add(tid)
                    return self._tasks[tid]
            return None

    # -- ratings -----------------------------------------------------------

    def submit_rating(self, session_id, task_id, scores, timestamp=None):
        scores = validate_scores(scores)
        with self._lock:
            sess = self._session(session_id)
            key = (session_id, task_id)
            if key in self._acks:
                # duplicate: first write wins, log untouched
                return self._acks[key]
            if task_id not in sess["issued"]:
                raise ServiceError(400, "task_not_issued",
                                   "task was not issued to this session",
                                   "task_id=%r" % task_id)
            record = RatingRecord(
                session_id=session_id,
                task_id=task_id,
                scores=scores,
                timestamp=time.time() if timestamp is None else float(timestamp),
            )
            entry = {
                "session_id": record.session_id,
                "task_id": record.task_id,
                "sample_id": self._tasks[task_id].sample_id,
                "source": self._tasks[task_id].source,
                "scores": list(record.scores),
                "timestamp": record.timestamp,
            }
            if self._log_fh:
                self._log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                self._log_fh.flush()
                os.fsync(self._log_fh.fileno())
            self._records.append(entry)
            sess["rated"].add(task_id)
            ack = {"status": "ok", "record_id": len(self._records) - 1}
            self._acks[key] = ack
            return ack

    def aggregate(self):
        # append-only list: a slice is a consistent snapshot without the lock
        return aggregate_records(self._records[:])


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def _make_handler(service):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _send(self, status, payload):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _read_json(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            try:
                return json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ServiceError(400, "bad_json", "request body is not valid JSON", str(exc))

        def _route(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if self.command == "GET" and parts == ["health"]:
                return 200, {"status": "ok"}
            if self.command == "POST" and parts == ["session"]:
                return 200, {"session_id": service.create_session()}
            if self.command == "GET" and len(parts) == 3 and parts[0] == "session" and parts[2] == "next":
                task = service.next_task(parts[1])
                return 200, ({"done": True} if task is None else task.to_wire())
            if self.command == "POST" and parts == ["rating"]:
                body = self._read_json()
                missing = [k for k in ("session_id", "task_id", "scores") if k not in body]
                if missing:
                    raise ServiceError(400, "validation",
                                       "missing fields: %s" % ", ".join(missing))
                ack = service.submit_rating(body["session_id"], body["task_id"], body["scores"])
                return 200, ack
            if self.command == "GET" and parts == ["aggregate"]:
                return 200, service.aggregate().to_wire()
            raise ServiceError(404, "not_found", "no such route",
                               "%s %s" % (self.command, self.path))

        def _handle(self):
            try:
                status, payload = self._route()
            except ServiceError as exc:
                status, payload = exc.status, exc.to_wire()
            self._send(status, payload)

        do_GET = _handle
        do_POST = _handle

    return Handler


def make_server(service, host="127.0.0.1", port=0):
    """ThreadingHTTPServer bound to (host, port); port 0 picks a free one."""
    return ThreadingHTTPServer((host, port), _make_handler(service))
