"""The black-box boundary between a deployed target and the adversary.

Endpoints expose exactly one capability, ``query``: raw flows in, raw
forecasts out. Normalisation stays on the target's side.

HTTP wire protocol::

    GET  /health   -> {"model_id": str, "sensors": N, "steps": 12}
    POST /predict  {"inputs": [B][12][N] numbers, "times": [B] ISO hours (optional)}
                   -> {"predictions": [B][12][N] numbers}

``times`` carries each window's first input hour; calendar-driven targets
(historical average) need it, others ignore it. At most 256 windows per
request. Floats are written with Python's shortest round-trip repr (up to 17
significant digits).

Oracle log files (``.npz``): ``inputs`` and ``predictions`` [S, 12, N]
float64, ``times`` [S] datetime64[h] (first input hour of each window), and
``meta``, a JSON string with ``format`` ("trafficattack-oracle-log"),
``version``, ``model_id``, ``count`` and ``extra`` (provenance such as the
producing stage's manifest hash).
"""

from __future__ import annotations

import json
import threading
import time
import zipfile
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import requests

from .dataset import STEPS
from .errors import (
    CollectionError,
    ContractError,
    FormatError,
    ProtocolError,
    QueryBudgetExceeded,
    TrafficAttackError,
    TransportError,
)

MAX_BATCH = 256
LOG_FORMAT = "trafficattack-oracle-log"


def _times_to_wire(sample_times) -> list[str] | None:
    if sample_times is None:
        return None
    return [str(t) for t in np.asarray(sample_times, dtype="datetime64[h]")]


def _times_from_wire(times, batch: int):
    if times is None:
        return None
    if not isinstance(times, list) or len(times) != batch:
        raise ProtocolError("'times' must be a list with one entry per window")
    try:
        return np.array([np.datetime64(str(t), "h") for t in times])
    except ValueError:
        raise ProtocolError("'times' entries must be ISO-8601 timestamps") from None


class OracleEndpoint:
    """Adversary-facing handle on a deployed model."""

    steps = STEPS

    def __init__(self, model_id: str, sensors: int, max_queries: int | None = None):
        self._model_id = model_id
        self._sensors = sensors
        self._max_queries = max_queries
        self._count = 0
        self._lock = threading.Lock()

    @property
    def model_id(self) -> str:
        return self._model_id

    @property
    def sensors(self) -> int:
        return self._sensors

    @property
    def query_count(self) -> int:
        return self._count

    def _check(self, batch) -> np.ndarray:
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (STEPS, self._sensors):
            raise ProtocolError(f"batch must be [B, {STEPS}, {self._sensors}], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ProtocolError("batch contains non-finite values")
        return arr

    def _charge(self) -> None:
        with self._lock:
            if self._max_queries is not None and self._count >= self._max_queries:
                raise QueryBudgetExceeded(f"query budget of {self._max_queries} batches used up")
            self._count += 1

    def query(self, batch, sample_times=None) -> np.ndarray:
        raise NotImplementedError


class LocalEndpoint(OracleEndpoint):
    """In-process transport around a loaded model bundle."""

    def __init__(self, bundle, max_queries: int | None = None):
        super().__init__(bundle.model_id, bundle.n_sensors, max_queries)
        self.__predict = bundle.predict_raw

    def query(self, batch, sample_times=None):
        arr = self._check(batch)
        self._charge()
        return self.__predict(arr, sample_times)


class HttpEndpoint(OracleEndpoint):
    """Client for a server started by :func:`serve`."""

    def __init__(self, base_url: str, timeout: float = 30.0, retries: int = 3,
                 max_queries: int | None = None):
        self._url = base_url.rstrip("/")
        self._timeout = timeout
        self._retries = retries
        self._session = requests.Session()
        info = self._request("GET", "/health")
        try:
            model_id, sensors = str(info["model_id"]), int(info["sensors"])
        except (KeyError, TypeError, ValueError):
            raise ProtocolError(f"malformed health response: {info!r}") from None
        super().__init__(model_id, sensors, max_queries)

    def _request(self, method: str, route: str, body: dict | None = None) -> dict:
        last = None
        for attempt in range(self._retries + 1):
            try:
                resp = self._session.request(method, self._url + route, json=body, timeout=self._timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
                time.sleep(min(0.05 * 2 ** attempt, 1.0))
                continue
            if 400 <= resp.status_code < 500:
                raise ProtocolError(f"{method} {route}: HTTP {resp.status_code}: {resp.text.strip()}")
            if resp.status_code >= 500:
                last = TransportError(f"{method} {route}: HTTP {resp.status_code}")
                time.sleep(min(0.05 * 2 ** attempt, 1.0))
                continue
            try:
                return resp.json()
            except ValueError:
                raise ProtocolError(f"{method} {route}: response is not JSON") from None
        raise TransportError(f"{method} {self._url}{route} failed after {self._retries + 1} attempts: {last}")

    def query(self, batch, sample_times=None):
        arr = self._check(batch)
        times = _times_to_wire(sample_times)
        out = []
        for start in range(0, max(len(arr), 1), MAX_BATCH):
            chunk = arr[start:start + MAX_BATCH]
            body = {"inputs": chunk.tolist()}
            if times is not None:
                body["times"] = times[start:start + MAX_BATCH]
            self._charge()
            reply = self._request("POST", "/predict", body)
            try:
                pred = np.asarray(reply["predictions"], dtype=np.float64)
            except (KeyError, TypeError, ValueError):
                raise ProtocolError("malformed predict response") from None
            if pred.shape != chunk.shape:
                raise ProtocolError(f"server returned shape {pred.shape} for a {chunk.shape} batch")
            out.append(pred)
        return np.concatenate(out, axis=0)

    def close(self) -> None:
        self._session.close()


# -- server ----------------------------------------------------------------------


class OracleServer:
    """A running HTTP oracle. Use as a context manager or call ``shutdown``."""

    def __init__(self, httpd: ThreadingHTTPServer, thread: threading.Thread | None):
        self._httpd = httpd
        self._thread = thread

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def _make_handler(bundle):
    predict = bundle.predict_raw
    health = json.dumps({"model_id": bundle.model_id, "sensors": bundle.n_sensors, "steps": STEPS}).encode()
    n_sensors = bundle.n_sensors

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _error(self, status: int, message: str) -> None:
            self._send(status, json.dumps({"error": message}).encode())

        def do_GET(self):
            if self.path.rstrip("/") == "/health":
                self._send(HTTPStatus.OK, health)
            else:
                self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")

        def do_POST(self):
            if self.path.rstrip("/") != "/predict":
                self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"null")
                if not isinstance(body, dict) or "inputs" not in body:
                    raise ProtocolError("body must be a JSON object with an 'inputs' field")
                try:
                    arr = np.asarray(body["inputs"], dtype=np.float64)
                except (TypeError, ValueError):
                    raise ProtocolError("'inputs' must be a rectangular numeric array") from None
                if arr.ndim != 3 or arr.shape[1:] != (STEPS, n_sensors):
                    raise ProtocolError(f"'inputs' must be [B, {STEPS}, {n_sensors}], got {arr.shape}")
                if len(arr) > MAX_BATCH:
                    self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, f"at most {MAX_BATCH} windows per request")
                    return
                if not np.isfinite(arr).all():
                    raise ProtocolError("'inputs' contains non-finite values")
                times = _times_from_wire(body.get("times"), len(arr))
                pred = predict(arr, times)
            except json.JSONDecodeError:
                self._error(HTTPStatus.BAD_REQUEST, "body is not valid JSON")
                return
            except (TrafficAttackError, ValueError) as exc:
                self._error(HTTPStatus.BAD_REQUEST, str(exc))
                return
            self._send(HTTPStatus.OK, json.dumps({"predictions": pred.tolist()}).encode())

    return Handler


def serve(bundle, host: str = "127.0.0.1", port: int = 0, background: bool = True) -> OracleServer:
    """Expose ``bundle`` over HTTP. ``port=0`` picks a free port."""
    try:
        httpd = ThreadingHTTPServer((host, port), _make_handler(bundle))
    except OSError as exc:
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
    httpd.daemon_threads = True
    thread = None
    if background:
        thread = threading.Thread(target=httpd.serve_forever, name="oracle-server", daemon=True)
        thread.start()
    return OracleServer(httpd, thread)


# -- logs ------------------------------------------------------------------------


@dataclass
class OracleLog:
    model_id: str
    inputs: np.ndarray  # [S, 12, N]
    predictions: np.ndarray  # [S, 12, N]
    times: np.ndarray  # [S] datetime64[h]
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format": LOG_FORMAT, "version": 1, "model_id": self.model_id, "count": len(self),
                "extra": self.extra}
        with path.open("wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), inputs=self.inputs,
                     predictions=self.predictions, times=self.times.astype("datetime64[h]"))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "OracleLog":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["meta"]))
                log = cls(meta["model_id"], z["inputs"], z["predictions"], z["times"], meta.get("extra", {}))
        except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError) as exc:
            raise FormatError(f"{path}: not a readable oracle log ({exc})") from exc
        if meta.get("format") != LOG_FORMAT or meta.get("count") != len(log):
            raise FormatError(f"{path}: bad oracle log header")
        return log


def collect(endpoint: OracleEndpoint, inputs: np.ndarray, sample_times=None, *,
            path: str | Path | None = None, batch_size: int = MAX_BATCH, extra: dict | None = None) -> OracleLog:
    """Query ``endpoint`` on every window and record the answers.

    With ``path``, the finished log is written there. If collection fails
    part way, the completed records go to ``<path>.partial`` and a
    :class:`CollectionError` reports how many; calling again with the same
    arguments resumes after them.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if sample_times is None:
        times = np.full(len(inputs), np.datetime64("NaT"), dtype="datetime64[h]")
    else:
        times = np.asarray(sample_times, dtype="datetime64[h]")
        if len(times) != len(inputs):
            raise ContractError("one sample time per window is required")
    path = Path(path) if path else None
    partial = path.with_name(path.name + ".partial") if path else None

    done_preds: list[np.ndarray] = []
    start = 0
    if partial is not None and partial.exists():
        prev = OracleLog.load(partial)
        k = len(prev)
        if (prev.model_id == endpoint.model_id and k <= len(inputs)
                and np.array_equal(prev.inputs, inputs[:k])):
            done_preds.append(prev.predictions)
            start = k

    try:
        for lo in range(start, len(inputs), batch_size):
            hi = min(lo + batch_size, len(inputs))
            t = None if sample_times is None else times[lo:hi]
            done_preds.append(endpoint.query(inputs[lo:hi], t))
    except (TransportError, QueryBudgetExceeded) as exc:
        completed = sum(len(p) for p in done_preds)
        if partial is not None and completed:
            OracleLog(endpoint.model_id, inputs[:completed],
                      np.concatenate(done_preds), times[:completed]).save(partial)
        raise CollectionError(f"collection stopped after {completed} records: {exc}",
                              completed, partial) from exc

    preds = np.concatenate(done_preds) if done_preds else np.empty_like(inputs)
    log = OracleLog(endpoint.model_id, inputs.copy(), preds, times, dict(extra or {}))
    if path is not None:
        log.save(path)
        if partial.exists():
            partial.unlink()
    return log


def replay_error(log: OracleLog, endpoint: OracleEndpoint) -> float:
    """Largest absolute difference between logged and freshly queried predictions."""
    times = None if np.isnat(log.times).all() else log.times
    fresh = collect(endpoint, log.inputs, times)
    return float(np.max(np.abs(fresh.predictions - log.predictions))) if len(log) else 0.0
