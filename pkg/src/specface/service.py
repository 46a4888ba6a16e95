"""Enrollment and verification over newline-delimited JSON.

The server only ever sees protected templates. Every request is one JSON
object on one line with an ``op`` field (ENROLL, VERIFY, REVOKE, PING); the
reply is one JSON line echoing the client's ``req_id``. Records live in an
append-only JSON-lines journal where revocations are tombstones; the journal
is compacted whenever the store is opened.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .protect import ProtectedTemplate

DEFAULT_PORT = 7399
PROTOCOL_VERSION = 1
MAX_LINE = 1 << 20

log = logging.getLogger("specface.service")


class ServiceError(Exception):
    """Request-level failure with a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class JsonLogFormatter(logging.Formatter):
    """One JSON object per log record; ``extra={"event": {...}}`` fields are merged in."""

    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 6), "level": record.levelname.lower(), "msg": record.getMessage()}
        out.update(getattr(record, "event", {}) or {})
        return json.dumps(out, sort_keys=True)


def _event(msg: str, level: int = logging.INFO, **fields) -> None:
    log.log(level, msg, extra={"event": fields})


# ---------------------------------------------------------------------------
# records and store
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnrollmentRecord:
    user_id: str
    key_id: str
    template: ProtectedTemplate
    enrolled_at: float

    def to_json(self) -> dict:
        # whitelist: nothing but ids, the protected vector and its public parameters
        return {"user_id": self.user_id, "key_id": self.key_id, "enrolled_at": self.enrolled_at,
                "template": self.template.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "EnrollmentRecord":
        return cls(str(obj["user_id"]), str(obj["key_id"]), ProtectedTemplate.from_json(obj["template"]),
                   float(obj["enrolled_at"]))


class RWLock:
    """Writer-preferring readers/writer lock."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting = 0

    def acquire_read(self):
        with self._cond:
            while self._writer or self._waiting:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            self._waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting -= 1
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


class _Guard:
    def __init__(self, enter, leave):
        self._enter, self._leave = enter, leave

    def __enter__(self):
        self._enter()

    def __exit__(self, *exc):
        self._leave()


class TemplateStore:
    """Protected templates keyed by ``(user_id, key_id)``, persisted to a journal.

    ``params`` is the (K, T, d) triple every template must carry. With
    ``path=None`` the store is memory-only.
    """

    def __init__(self, path, params: tuple):
        self.path = Path(path) if path is not None else None
        self.params = tuple(int(p) for p in params)
        self._records: dict[tuple, EnrollmentRecord] = {}
        self._lock = RWLock()
        self.read = _Guard(self._lock.acquire_read, self._lock.release_read)
        self.write = _Guard(self._lock.acquire_write, self._lock.release_write)
        if self.path is not None:
            self._replay()
            self._compact()

    def __len__(self):
        with self.read:
            return len(self._records)

    def __contains__(self, ident):
        with self.read:
            return tuple(ident) in self._records

    def _replay(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    ident = (entry["user_id"], entry["key_id"])
                    if entry["op"] == "enroll":
                        self._records[ident] = EnrollmentRecord.from_json(entry["record"])
                    elif entry["op"] == "revoke":
                        self._records.pop(ident, None)
                except (ValueError, KeyError, TypeError) as exc:
                    # a torn final line from a crash mid-append is dropped; anything else is corruption
                    if fh.read().strip():
                        raise ValueError(f"{self.path}:{lineno}: corrupt journal entry") from exc
                    _event("dropped torn journal tail", logging.WARNING, line=lineno)

    def _compact(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in self._records.values():
                fh.write(_journal_line("enroll", rec.user_id, rec.key_id, rec))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def _append(self, line: str) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def enroll(self, user_id: str, key_id: str, template: ProtectedTemplate) -> EnrollmentRecord:
        if template.params != self.params:
            raise ServiceError("param_mismatch", f"template (K, T, d) = {template.params}, server expects {self.params}")
        if template.key_id != key_id:
            raise ServiceError("malformed", "template key_id does not match the request key_id")
        with self.write:
            if (user_id, key_id) in self._records:
                raise ServiceError("duplicate", f"{user_id!r} is already enrolled under key {key_id}")
            rec = EnrollmentRecord(user_id, key_id, template, time.time())
            self._append(_journal_line("enroll", user_id, key_id, rec))
            self._records[(user_id, key_id)] = rec
        return rec

    def get(self, user_id: str, key_id: str) -> EnrollmentRecord:
        with self.read:
            rec = self._records.get((user_id, key_id))
        if rec is None:
            raise ServiceError("not_enrolled", f"no enrollment for {user_id!r} under key {key_id}")
        return rec

    def revoke(self, user_id: str, key_id: str) -> None:
        with self.write:
            if (user_id, key_id) not in self._records:
                raise ServiceError("not_enrolled", f"no enrollment for {user_id!r} under key {key_id}")
            self._append(_journal_line("revoke", user_id, key_id))
            del self._records[(user_id, key_id)]

    def records(self) -> list[EnrollmentRecord]:
        with self.read:
            return list(self._records.values())


def _journal_line(op: str, user_id: str, key_id: str, rec: EnrollmentRecord | None = None) -> str:
    entry = {"op": op, "user_id": user_id, "key_id": key_id}
    if rec is not None:
        entry["record"] = rec.to_json()
    return json.dumps(entry, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# request handling
# ---------------------------------------------------------------------------

def _field(msg: dict, name: str) -> str:
    v = msg.get(name)
    if not isinstance(v, str) or not v:
        raise ServiceError("malformed", f"missing or non-string field {name!r}")
    return v


def _template(msg: dict) -> ProtectedTemplate:
    obj = msg.get("template")
    if not isinstance(obj, dict):
        raise ServiceError("malformed", "missing template object")
    try:
        return ProtectedTemplate.from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ServiceError("malformed", f"bad template: {exc}") from None


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ServiceError("malformed", "zero template")
    return float(a @ b / (na * nb))


class Verifier:
    """Protocol logic independent of the transport."""

    def __init__(self, store: TemplateStore, threshold: float):
        if not -1.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")
        self.store = store
        self.threshold = float(threshold)

    def handle(self, msg) -> dict:
        req_id = msg.get("req_id") if isinstance(msg, dict) else None
        try:
            if not isinstance(msg, dict):
                raise ServiceError("malformed", "request must be a JSON object")
            op = msg.get("op")
            handler = {"ENROLL": self._enroll, "VERIFY": self._verify, "REVOKE": self._revoke,
                       "PING": self._ping}.get(op)
            if handler is None:
                raise ServiceError("unknown_op", f"unsupported op {op!r}")
            out = {"ok": True, **handler(msg)}
        except ServiceError as exc:
            _event("request failed", logging.WARNING, op=msg.get("op") if isinstance(msg, dict) else None,
                   code=exc.code, req_id=req_id)
            out = {"ok": False, "error": {"code": exc.code, "message": str(exc)}}
        if req_id is not None:
            out["req_id"] = req_id
        return out

    def _enroll(self, msg):
        user, key_id = _field(msg, "user_id"), _field(msg, "key_id")
        rec = self.store.enroll(user, key_id, _template(msg))
        _event("enroll", op="ENROLL", user_id=user, key_id=key_id, store_size=len(self.store))
        return {"enrolled_at": rec.enrolled_at}

    def _verify(self, msg):
        user, key_id = _field(msg, "user_id"), _field(msg, "key_id")
        query = _template(msg)
        rec = self.store.get(user, key_id)
        if query.params != rec.template.params:
            raise ServiceError("param_mismatch", "query parameters differ from the enrolled template")
        s = similarity(rec.template.z_t, query.z_t)
        decision = "match" if s > self.threshold else "no_match"
        _event("verify", op="VERIFY", user_id=user, key_id=key_id, similarity=s, decision=decision)
        return {"decision": decision, "similarity": s, "threshold": self.threshold}

    def _revoke(self, msg):
        user, key_id = _field(msg, "user_id"), _field(msg, "key_id")
        self.store.revoke(user, key_id)
        _event("revoke", op="REVOKE", user_id=user, key_id=key_id, store_size=len(self.store))
        return {}

    def _ping(self, msg):
        return {"protocol": PROTOCOL_VERSION, "params": list(self.store.params)}


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        verifier: Verifier = self.server.verifier
        while True:
            line = self.rfile.readline(MAX_LINE + 1)
            if not line:
                return
            if len(line) > MAX_LINE:
                self._send({"ok": False, "error": {"code": "malformed", "message": "line too long"}})
                return
            if not line.strip():
                continue
            try:
                msg = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, ValueError):
                self._send({"ok": False, "error": {"code": "malformed", "message": "not a JSON line"}})
                continue
            self._send(verifier.handle(msg))

    def _send(self, obj):
        self.wfile.write(json.dumps(obj).encode("utf-8") + b"\n")
        self.wfile.flush()


class TemplateServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, verifier: Verifier, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.verifier = verifier
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, name="specface-server", daemon=True)
        th.start()
        _event("listening", host=self.server_address[0], port=self.port)
        return th


class Client:
    """Blocking NDJSON client. ``tap``, if given, receives every raw byte string sent or received."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 10.0, tap=None):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")
        self._tap = tap
        self._next = 0

    def close(self):
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, op: str, **payload) -> dict:
        self._next += 1
        req_id = f"r{self._next}"
        raw = json.dumps({"op": op, "req_id": req_id, **payload}).encode("utf-8") + b"\n"
        if self._tap is not None:
            self._tap(raw)
        self._sock.sendall(raw)
        line = self._rfile.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        if self._tap is not None:
            self._tap(line)
        reply = json.loads(line)
        if reply.get("req_id") != req_id:
            raise ConnectionError(f"reply for {reply.get('req_id')!r}, expected {req_id!r}")
        return reply

    def ping(self) -> dict:
        return self.request("PING")

    def enroll(self, user_id: str, template: ProtectedTemplate) -> dict:
        return self.request("ENROLL", user_id=user_id, key_id=template.key_id, template=template.to_json())

    def verify(self, user_id: str, template: ProtectedTemplate) -> dict:
        return self.request("VERIFY", user_id=user_id, key_id=template.key_id, template=template.to_json())

    def revoke(self, user_id: str, key_id: str) -> dict:
        return self.request("REVOKE", user_id=user_id, key_id=key_id)


def configure_logging(level: int = logging.INFO, stream=None) -> None:
    handler = logging.StreamHandler(stream)
    handler.setFormatter(JsonLogFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
