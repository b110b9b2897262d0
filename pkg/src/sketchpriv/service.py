"""File-backed sketch store with a merge/estimate query service.

Sketches are stored one per file at ``<root>/<dimension>/<period>.skp`` in
the binary sketch format.  The service owns the secret salt; clients only
ever see fingerprints.  In RESTRICTED mode the only queries answered are
ingestion and merge-then-estimate, estimates are rounded, and every request
is appended to a JSON-lines audit log.

Endpoints (JSON bodies)::

    PUT  /sketch    {dimension, period, sketch: base64, overwrite}
    GET  /sketch?dimension=..&period=..          (RAW mode only)
    POST /ingest    {dimension, period, elements: [str], algo, param, overwrite}
    POST /estimate  {keys: [[dimension, period], ...], rounding}
                 -> {estimate: int, merged: int}
"""

from __future__ import annotations

import base64
import datetime as dt
import enum
import json
import logging
import os
import re
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Iterator, Sequence
from urllib.parse import parse_qs, urlparse

from sketchpriv import sketches as sk
from sketchpriv.errors import (
    DomainError,
    DuplicateKey,
    FormatError,
    InvalidElement,
    ParamMismatch,
    PolicyViolation,
    SaltMismatch,
    ServiceUnavailable,
    SketchPrivError,
    UnknownKey,
)
from sketchpriv.sketches import Algo, Salt, Sketch

log = logging.getLogger(__name__)

SUFFIX = ".skp"
RAW_DIR = ".raw"
_DIMENSION_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.\-]{0,127}$")

Key = tuple[str, str]

_MISSING = (FileNotFoundError, NotADirectoryError, IsADirectoryError)


def check_key(dimension: str, period: str) -> Key:
    if not isinstance(dimension, str) or not _DIMENSION_RE.match(dimension) or dimension == RAW_DIR:
        raise DomainError(f"invalid dimension {dimension!r}")
    try:
        dt.date.fromisoformat(period)
    except (TypeError, ValueError):
        raise DomainError(f"period must be an ISO-8601 date, got {period!r}") from None
    return dimension, period


@dataclass(frozen=True)
class SketchRecord:
    dimension: str
    period: str
    sketch: Sketch
    created_at: float | None = None

    @property
    def key(self) -> Key:
        return self.dimension, self.period

    @property
    def salt_fingerprint(self) -> int:
        return self.sketch.salt_fingerprint


class SketchStore:
    """Durable ``(dimension, period) -> sketch`` map on the local filesystem."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[Key, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def path(self, key: Key) -> Path:
        dimension, period = check_key(*key)
        return self.root / dimension / f"{period}{SUFFIX}"

    @contextmanager
    def _locked(self, key: Key) -> Iterator[None]:
        with self._locks_guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            yield

    def put(self, record: SketchRecord, overwrite: bool = False) -> None:
        path = self.path(record.key)
        data = sk.serialize(record.sketch)
        with self._locked(record.key):
            if path.exists() and not overwrite:
                raise DuplicateKey(f"{record.key!r} already stored")
            _atomic_write(path, data)

    def get(self, key: Key) -> SketchRecord:
        path = self.path(key)
        try:
            data = path.read_bytes()
            mtime = path.stat().st_mtime
        except _MISSING:
            raise UnknownKey(f"no sketch stored under {tuple(key)!r}") from None
        return SketchRecord(key[0], key[1], sk.deserialize(data), mtime)

    def get_bytes(self, key: Key) -> bytes:
        try:
            return self.path(key).read_bytes()
        except _MISSING:
            raise UnknownKey(f"no sketch stored under {tuple(key)!r}") from None

    def __contains__(self, key: Key) -> bool:
        return self.path(key).exists()

    def keys(self) -> list[Key]:
        out = []
        for d in sorted(self.root.iterdir()):
            if not d.is_dir() or d.name == RAW_DIR:
                continue
            for f in sorted(d.glob(f"*{SUFFIX}")):
                out.append((d.name, f.name[: -len(SUFFIX)]))
        return out

    def scan(self, start: str | None = None, end: str | None = None,
             dimension: str | None = None) -> list[SketchRecord]:
        """Records with ``start <= period <= end``, ordered by key."""
        out = []
        for key in self.keys():
            if dimension is not None and key[0] != dimension:
                continue
            if start is not None and key[1] < start:
                continue
            if end is not None and key[1] > end:
                continue
            out.append(self.get(key))
        return out

    # raw element archive, needed to rebuild sketches after a salt change

    def raw_path(self, key: Key) -> Path:
        dimension, period = check_key(*key)
        return self.root / RAW_DIR / dimension / f"{period}.txt"

    def put_raw(self, key: Key, elements: Sequence[bytes]) -> None:
        _atomic_write(self.raw_path(key), b"".join(e + b"\n" for e in elements))

    def get_raw(self, key: Key) -> list[bytes] | None:
        try:
            data = self.raw_path(key).read_bytes()
        except FileNotFoundError:
            return None
        return [line for line in data.split(b"\n") if line]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # the ".part" suffix keeps in-flight files out of keys() globbing
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ApiMode(enum.Enum):
    RAW = "raw"
    RESTRICTED = "restricted"


@dataclass(frozen=True)
class ApiPolicy:
    mode: ApiMode = ApiMode.RAW
    rounding: int = 1
    audit_log_path: str | os.PathLike | None = None

    def __post_init__(self):
        if self.rounding < 1:
            raise DomainError("rounding granularity must be a positive integer")
        object.__setattr__(self, "mode", ApiMode(self.mode))

    @property
    def restricted(self) -> bool:
        return self.mode is ApiMode.RESTRICTED


def round_estimate(value: float, granularity: int) -> int:
    """Nearest multiple of ``granularity``; halves go to the even multiple."""
    return int(round(value / granularity)) * granularity


def parse_elements(stream: bytes | Iterable[bytes]) -> list[bytes]:
    """Newline-delimited byte strings; blank lines (and a trailing CR) are skipped."""
    if isinstance(stream, (bytes, bytearray)):
        lines = bytes(stream).split(b"\n")
    else:
        lines = stream
    out = []
    for line in lines:
        if isinstance(line, str):
            line = line.encode("utf-8")
        line = line.rstrip(b"\r\n")
        if line:
            out.append(line)
    return out


def _normalize_keys(keys) -> list[Key] | None:
    """``[(dimension, period), ...]`` or None when the shape is wrong."""
    if isinstance(keys, (str, bytes)):
        return None
    try:
        out = [tuple(k) for k in keys]
    except TypeError:
        return None
    if any(len(k) != 2 or not all(isinstance(x, str) for x in k) for k in out):
        return None
    return out


class SketchService:
    """In-process service: the same surface the HTTP server exposes."""

    def __init__(self, store: SketchStore | str | os.PathLike, salt: Salt,
                 policy: ApiPolicy | None = None, algo: Algo | str = Algo.HLL,
                 param: int = 15, keep_raw: bool = True):
        self.store = store if isinstance(store, SketchStore) else SketchStore(store)
        self._salt = salt
        self.policy = policy or ApiPolicy()
        self.default_algo = sk.parse_algo(algo)
        self.default_param = param
        self.keep_raw = keep_raw
        self._audit_lock = threading.Lock()
        sk.empty(self.default_algo, param, salt)  # validates defaults

    @property
    def salt_fingerprint(self) -> int:
        return self._salt.fingerprint

    def audit(self, endpoint: str, keys: Sequence[Key] = (), outcome: str = "ok") -> None:
        if not self.policy.restricted or self.policy.audit_log_path is None:
            return
        entry = {
            "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
            "endpoint": endpoint,
            "keys": [list(k) for k in keys],
            "mode": self.policy.mode.value,
            "outcome": outcome,
        }
        line = json.dumps(entry, sort_keys=True) + "\n"
        with self._audit_lock, open(self.policy.audit_log_path, "a", encoding="utf-8") as fh:
            fh.write(line)

    def _audited(self, endpoint: str, keys: Sequence[Key], fn):
        try:
            result = fn()
        except SketchPrivError as exc:
            self.audit(endpoint, keys, type(exc).__name__)
            raise
        self.audit(endpoint, keys)
        return result

    def put(self, dimension: str, period: str, sketch: Sketch, overwrite: bool = False) -> None:
        def run():
            if self.policy.restricted:
                raise PolicyViolation("sketch upload is disabled in RESTRICTED mode")
            if sketch.salt_fingerprint != self._salt.fingerprint:
                raise SaltMismatch("uploaded sketch was not built with the service salt")
            self.store.put(SketchRecord(dimension, period, sketch), overwrite)

        self._audited("PUT /sketch", [(dimension, period)], run)

    def get_bytes(self, dimension: str, period: str) -> bytes:
        def run():
            if self.policy.restricted:
                raise PolicyViolation("raw sketch access is disabled in RESTRICTED mode")
            return self.store.get_bytes((dimension, period))

        return self._audited("GET /sketch", [(dimension, period)], run)

    def ingest(self, dimension: str, period: str, elements: bytes | Iterable[bytes],
               algo: Algo | str | None = None, param: int | None = None,
               overwrite: bool = False) -> SketchRecord:
        """Fold ``add`` over a newline-delimited element stream and store the result."""

        def run():
            a = self.default_algo if algo is None else sk.parse_algo(algo)
            prm = self.default_param if param is None else int(param)
            elems = parse_elements(elements)
            try:
                m = sk.build(a, prm, elems, self._salt)
            except ValueError as exc:
                if isinstance(exc, InvalidElement):
                    raise
                raise DomainError(str(exc)) from None
            rec = SketchRecord(dimension, period, m)
            self.store.put(rec, overwrite)
            if self.keep_raw:
                self.store.put_raw(rec.key, elems)
            return rec

        return self._audited("POST /ingest", [(dimension, period)], run)

    def estimate(self, keys: Sequence[Key], rounding: int | None = None) -> dict:
        """Merge the referenced sketches and return the rounded estimate.

        A requested ``rounding`` can coarsen, never refine, the policy's.
        """
        keys = _normalize_keys(keys)

        def run():
            if keys is None:
                raise DomainError("keys must be a list of [dimension, period] pairs")
            if not keys:
                raise DomainError("estimate needs at least one key")
            try:
                requested = int(rounding or 0)
            except (TypeError, ValueError):
                raise DomainError(f"rounding must be an integer, got {rounding!r}") from None
            merged = sk.merge_all(self.store.get(k).sketch for k in keys)
            g = max(self.policy.rounding, requested)
            return {"estimate": round_estimate(sk.estimate(merged), g), "merged": len(keys)}

        return self._audited("POST /estimate", keys or (), run)

    def rotate_salt(self, new_salt: Salt, raw_streams_available: bool = True) -> dict:
        """Re-key every stored sketch; needs the raw element streams.

        Without raw streams nothing is touched and the number of records that
        would be stranded under the old salt is reported.
        """
        keys = self.store.keys()
        stale = [k for k in keys if self.store.get(k).salt_fingerprint != new_salt.fingerprint]
        report = {
            "old_fingerprint": f"{self._salt.fingerprint:016x}",
            "new_fingerprint": f"{new_salt.fingerprint:016x}",
            "records": len(keys),
        }
        missing = [k for k in stale if self.store.get_raw(k) is None] if raw_streams_available else stale
        if not raw_streams_available or missing:
            report.update(rotated=0, refused=True, stranded=len(missing))
            return report
        for k in stale:
            old = self.store.get(k).sketch
            m = sk.build(old.algo, old.param, self.store.get_raw(k), new_salt)
            self.store.put(SketchRecord(k[0], k[1], m), overwrite=True)
        self._salt = new_salt
        report.update(rotated=len(stale), refused=False, stranded=0)
        return report


# --- HTTP front end ----------------------------------------------------------

_STATUS = {
    UnknownKey: HTTPStatus.NOT_FOUND,
    DuplicateKey: HTTPStatus.CONFLICT,
    ParamMismatch: HTTPStatus.CONFLICT,
    SaltMismatch: HTTPStatus.CONFLICT,
    PolicyViolation: HTTPStatus.FORBIDDEN,
    FormatError: HTTPStatus.BAD_REQUEST,
    InvalidElement: HTTPStatus.BAD_REQUEST,
    DomainError: HTTPStatus.BAD_REQUEST,
}

_ERRORS = {cls.__name__: cls for cls in _STATUS}


def _status_for(exc: Exception) -> HTTPStatus:
    for cls, status in _STATUS.items():
        if isinstance(exc, cls):
            return status
    return HTTPStatus.INTERNAL_SERVER_ERROR


class _Handler(BaseHTTPRequestHandler):
    service: SketchService  # set on the subclass built by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DomainError(f"malformed JSON: {exc}") from None
        if not isinstance(body, dict):
            raise DomainError("request body must be a JSON object")
        return body

    def _dispatch(self, endpoint: str, parse, call) -> None:
        """Parse the request, then hand it to the service.

        The service audits what it handles; requests rejected while parsing
        are audited here so every request leaves exactly one audit line.
        """
        try:
            args = parse()
        except (SketchPrivError, KeyError, TypeError, ValueError) as exc:
            name = type(exc).__name__ if isinstance(exc, SketchPrivError) else "DomainError"
            self.service.audit(endpoint, (), name)
            status = _status_for(exc) if isinstance(exc, SketchPrivError) else HTTPStatus.BAD_REQUEST
            self._send(status, {"error": name, "message": str(exc)})
            return
        try:
            self._send(HTTPStatus.OK, call(*args))
        except SketchPrivError as exc:
            self._send(_status_for(exc), {"error": type(exc).__name__, "message": str(exc)})

    def _not_found(self, endpoint: str) -> None:
        self.service.audit(endpoint, (), "NotFound")
        self._send(HTTPStatus.NOT_FOUND, {"error": "NotFound", "message": endpoint})

    def do_GET(self):
        url = urlparse(self.path)
        if url.path != "/sketch":
            self._not_found(f"GET {url.path}")
            return

        def parse():
            qs = parse_qs(url.query)
            return qs["dimension"][0], qs["period"][0]

        def call(dim, period):
            data = self.service.get_bytes(dim, period)
            return {"dimension": dim, "period": period,
                    "sketch": base64.b64encode(data).decode("ascii")}

        self._dispatch("GET /sketch", parse, call)

    def do_PUT(self):
        path = urlparse(self.path).path
        if path != "/sketch":
            self._not_found(f"PUT {path}")
            return

        def parse():
            body = self._body()
            m = sk.deserialize(base64.b64decode(body["sketch"]))
            return body["dimension"], body["period"], m, bool(body.get("overwrite"))

        def call(dim, period, m, overwrite):
            self.service.put(dim, period, m, overwrite)
            return {"stored": [dim, period]}

        self._dispatch("PUT /sketch", parse, call)

    def do_POST(self):
        path = urlparse(self.path).path

        def parse_ingest():
            body = self._body()
            elems = [e.encode("utf-8") for e in body.get("elements", [])]
            return (body["dimension"], body["period"], elems, body.get("algo"),
                    body.get("param"), bool(body.get("overwrite")))

        def ingest(*args):
            rec = self.service.ingest(*args)
            return {"stored": list(rec.key), "algo": rec.sketch.algo.name,
                    "param": rec.sketch.param}

        def parse_estimate():
            body = self._body()
            return [tuple(k) for k in body["keys"]], body.get("rounding")

        routes = {
            "/ingest": (parse_ingest, ingest),
            "/estimate": (parse_estimate, self.service.estimate),
        }
        if path not in routes:
            self._not_found(f"POST {path}")
            return
        self._dispatch(f"POST {path}", *routes[path])


def make_server(service: SketchService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("SketchHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class ServiceClient:
    """HTTP client with the same ``ingest``/``estimate`` surface as :class:`SketchService`."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        import urllib.error
        import urllib.request

        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(self.base_url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read())
            except ValueError:
                payload = {"error": "", "message": str(exc)}
            cls = _ERRORS.get(payload.get("error"), SketchPrivError)
            raise cls(payload.get("message", "")) from None
        except (urllib.error.URLError, OSError) as exc:
            raise ServiceUnavailable(f"{self.base_url}: {exc}") from exc

    def ingest(self, dimension, period, elements, algo=None, param=None, overwrite=False) -> dict:
        elems = [e.decode("utf-8") if isinstance(e, bytes) else e for e in parse_elements(elements)]
        body = {"dimension": dimension, "period": period, "elements": elems,
                "overwrite": overwrite}
        if algo is not None:
            body["algo"] = sk.parse_algo(algo).name
        if param is not None:
            body["param"] = param
        return self._request("POST", "/ingest", body)

    def estimate(self, keys, rounding=None) -> dict:
        body = {"keys": [list(k) for k in keys]}
        if rounding is not None:
            body["rounding"] = rounding
        return self._request("POST", "/estimate", body)

    def put(self, dimension, period, sketch: Sketch, overwrite=False) -> dict:
        return self._request("PUT", "/sketch", {
            "dimension": dimension, "period": period, "overwrite": overwrite,
            "sketch": base64.b64encode(sk.serialize(sketch)).decode("ascii"),
        })

    def get_bytes(self, dimension, period) -> bytes:
        from urllib.parse import urlencode

        q = urlencode({"dimension": dimension, "period": period})
        return base64.b64decode(self._request("GET", f"/sketch?{q}")["sketch"])
