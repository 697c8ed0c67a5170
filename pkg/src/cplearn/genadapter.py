"""HTTP client for a remote step generator, plus a deterministic mock server.

Wire format: ``POST`` a JSON body ``{"state", "k", "temperature", "kind"}`` and
receive ``{"proposals": [...], "logprobs": [...]?}``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from ._validation import check_choice, check_non_negative, check_positive
from .env import ActionKind, BOXED_PATTERN
from .exceptions import ConfigurationError, ProtocolError, UnavailableError

log = logging.getLogger(__name__)

KINDS = ("plan", "solution")
ENV_ENDPOINT = "CPLEARN_GEN_ENDPOINT"
ENV_TOKEN = "CPLEARN_GEN_TOKEN"
ENV_MAX_IN_FLIGHT = "CPLEARN_GEN_MAX_IN_FLIGHT"
ENV_TIMEOUT = "CPLEARN_GEN_TIMEOUT"
_EXCERPT = 200


@dataclass(frozen=True)
class GenRequest:
    state: str
    k: int
    temperature: float = 0.7
    kind: str = "plan"

    def __post_init__(self):
        check_positive("k", self.k, integer=True)
        check_positive("temperature", self.temperature)
        check_choice("kind", self.kind, KINDS)

    def to_json(self):
        return {"state": self.state, "k": self.k, "temperature": self.temperature,
                "kind": self.kind}


@dataclass(frozen=True)
class GenResponse:
    proposals: tuple
    logprobs: tuple | None = None


def canonical(text):
    return " ".join(str(text).split())


def _excerpt(body):
    body = body if isinstance(body, str) else body.decode("utf-8", "replace")
    return body[:_EXCERPT] + ("..." if len(body) > _EXCERPT else "")


def parse_response(body, k):
    """Validate a response body and deduplicate proposals by canonical text."""
    try:
        doc = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response is not JSON ({exc}): {_excerpt(body)!r}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("proposals"), list):
        raise ProtocolError(f"response lacks a 'proposals' list: {_excerpt(body)!r}")
    props = doc["proposals"]
    if not all(isinstance(p, str) for p in props):
        raise ProtocolError(f"proposals must be strings: {_excerpt(body)!r}")
    lps = doc.get("logprobs")
    if lps is not None:
        if not isinstance(lps, list) or len(lps) != len(props) or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in lps):
            raise ProtocolError(f"logprobs must be numbers aligned with proposals: "
                                f"{_excerpt(body)!r}")
    seen, out, out_lp = set(), [], []
    for i, p in enumerate(props):
        c = canonical(p)
        if not c or c in seen:
            continue
        seen.add(c)
        out.append(c)
        if lps is not None:
            out_lp.append(float(lps[i]))
    if not out:
        raise ProtocolError(f"no usable proposals: {_excerpt(body)!r}")
    out, out_lp = out[:k], out_lp[:k]
    return GenResponse(tuple(out), tuple(out_lp) if lps is not None else None)


_TRANSIENT_STATUS = {429, 500, 502, 503, 504}


def _headers(token):
    h = {"Content-Type": "application/json"}
    if token:
        h["Authorization"] = f"Bearer {token}"
    return h


def propose_steps(endpoint, request, timeout=5.0, retries=2, *, backoff=0.05, token=None,
                  session=None, semaphore=None):
    """POST ``request`` and return the parsed :class:`GenResponse`.

    Connection failures, timeouts and 429/5xx answers are retried up to
    ``retries`` times with exponential backoff; other failures are not.
    """
    check_non_negative("retries", retries, integer=True)
    check_positive("timeout", timeout)
    http = session or requests
    payload = json.dumps(request.to_json())
    last = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            if semaphore is not None:
                with semaphore:
                    resp = http.post(endpoint, data=payload, headers=_headers(token),
                                     timeout=timeout)
            else:
                resp = http.post(endpoint, data=payload, headers=_headers(token),
                                 timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = f"{type(exc).__name__}: {exc}"
            log.debug("attempt %d to %s failed: %s", attempt + 1, endpoint, last)
            continue
        if resp.status_code in _TRANSIENT_STATUS:
            last = f"HTTP {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code}: {_excerpt(resp.content)!r}")
        return parse_response(resp.content, request.k)
    raise UnavailableError(f"{endpoint} unavailable after {retries + 1} attempts ({last})")


def health_check(endpoint, timeout=1.0, token=None):
    """True iff the endpoint answers a minimal request with HTTP 200 in time."""
    try:
        resp = requests.post(endpoint, data=json.dumps(GenRequest("", 1).to_json()),
                             headers=_headers(token), timeout=timeout)
    except (requests.RequestException, OSError):
        return False
    return resp.status_code == 200


@dataclass
class AdapterConfig:
    endpoint: str
    timeout: float = 5.0
    retries: int = 2
    backoff: float = 0.05
    max_in_flight: int = 4
    token: str | None = None
    answer_pattern: str = BOXED_PATTERN

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigurationError("generator endpoint is empty")
        check_positive("timeout", self.timeout)
        check_non_negative("retries", self.retries, integer=True)
        check_positive("max_in_flight", self.max_in_flight, integer=True)
        try:
            re.compile(self.answer_pattern)
        except re.error as exc:
            raise ConfigurationError(f"bad answer pattern: {exc}") from exc

    @classmethod
    def from_env(cls, endpoint=None, **overrides):
        """Fill unset fields from ``CPLEARN_GEN_*`` environment variables."""
        endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        kw = {}
        if ENV_TOKEN in os.environ:
            kw["token"] = os.environ[ENV_TOKEN]
        try:
            if ENV_MAX_IN_FLIGHT in os.environ:
                kw["max_in_flight"] = int(os.environ[ENV_MAX_IN_FLIGHT])
            if ENV_TIMEOUT in os.environ:
                kw["timeout"] = float(os.environ[ENV_TIMEOUT])
        except ValueError as exc:
            raise ConfigurationError(f"bad generator environment variable: {exc}") from exc
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(endpoint, **kw)


class RemoteProposer:
    """Expansion source that asks a remote generator for candidate steps.

    Priors are the softmax of server log-probabilities when present, uniform
    otherwise. Proposals that match an environment candidate reuse it.
    """

    def __init__(self, config):
        self.config = config
        self._sem = threading.BoundedSemaphore(config.max_in_flight)
        self._session = requests.Session()

    def propose(self, env, state, k, temperature, rng):
        cands = env.candidate_actions(state)
        kind = "solution" if any(a.kind == ActionKind.SOLUTION for a in cands) else "plan"
        resp = propose_steps(self.config.endpoint, GenRequest(env.render(state), k,
                                                              temperature, kind),
                             self.config.timeout, self.config.retries,
                             backoff=self.config.backoff, token=self.config.token,
                             session=self._session, semaphore=self._sem)
        actions, lps = [], []
        for i, text in enumerate(resp.proposals):
            a = env.parse_proposal(state, text, kind, self.config.answer_pattern)
            if a is None or any(b.display == a.display for b in actions):
                continue
            actions.append(a)
            lps.append(resp.logprobs[i] if resp.logprobs is not None else 0.0)
        if not actions:
            raise ProtocolError(f"no proposal parsed as a {kind} step: "
                                f"{_excerpt(json.dumps(resp.proposals))!r}")
        lp = np.asarray(lps, dtype=np.float64)
        priors = np.exp(lp - lp.max())
        return cands, actions, priors / priors.sum()


# -- mock server ----------------------------------------------------------------------

_QUANTITY = re.compile(r"^(q\d+) = (\S+) ([-+*]) (\S+)$")
_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}


def mock_proposals(state_text, k, kind):
    """Deterministic proposals for an ArithChain rendering.

    Plan proposals list uncomputed quantities in dependency order; solution
    proposals put the true answer first, boxed, then two near misses.
    """
    defs, target, done = {}, None, set()
    section = "defs"
    for line in state_text.splitlines():
        if line.startswith("target:"):
            target = line.split(":", 1)[1].strip()
        elif line == "steps:":
            section = "steps"
        elif section == "defs" and (m := _QUANTITY.match(line)):
            defs[m.group(1)] = (m.group(2), m.group(3), m.group(4))
        elif section == "steps" and line.startswith("compute "):
            done.add(line.split()[1])
    if target is None or target not in defs:
        return ["compute q1 next"][:k], [0.0][:k]

    def value(name):
        a, op, b = defs[name]
        va = value(a) if a in defs else int(a)
        vb = value(b) if b in defs else int(b)
        return _OPS[op](va, vb)

    if kind == "solution":
        v = value(target)
        props = [f"\\boxed{{{v}}}", f"answer {v + 1}", f"answer {v - 1}"]
    else:
        order = sorted(defs, key=lambda q: int(q[1:]))
        props = [f"compute {q} next" for q in order if q not in done] or [f"compute {target} next"]
    props = props[:k]
    return props, [-0.5 * i for i in range(len(props))]


class _Handler(BaseHTTPRequestHandler):
    server_version = "MockGen/1"

    def log_message(self, fmt, *args):
        log.debug("mock: " + fmt, *args)

    def _send(self, status, body):
        data = body.encode() if isinstance(body, str) else body
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        srv = self.server.mock
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        with srv.lock:
            srv.requests.append(raw)
            srv.headers.append(dict(self.headers))
            fail = srv.fail_remaining > 0
            if fail:
                srv.fail_remaining -= 1
        if srv.delay:
            time.sleep(srv.delay)
        if fail:
            return self._send(srv.fail_status, '{"error": "injected"}')
        if srv.raw_body is not None:
            return self._send(200, srv.raw_body)
        try:
            req = json.loads(raw)
            k, kind, state = int(req["k"]), req["kind"], req["state"]
        except (ValueError, KeyError, TypeError):
            return self._send(400, '{"error": "bad request"}')
        if srv.fixed is not None:
            props = list(srv.fixed)
            lps = [-0.5 * i for i in range(len(props))]
        else:
            props, lps = mock_proposals(state, k, kind)
        body = {"proposals": props}
        if srv.with_logprobs:
            body["logprobs"] = lps
        self._send(200, json.dumps(body))


class MockGenServer:
    """Threaded local generator for tests and demos.

    ``fixed`` returns the same proposals for every request; ``fail_first``
    answers the first N requests with ``fail_status``; ``raw_body`` sends a
    literal body; ``delay`` sleeps before answering.
    """

    def __init__(self, fixed=None, with_logprobs=True, fail_first=0, fail_status=500,
                 raw_body=None, delay=0.0, host="127.0.0.1", port=0):
        self.fixed = fixed
        self.with_logprobs = with_logprobs
        self.fail_remaining = fail_first
        self.fail_status = fail_status
        self.raw_body = raw_body
        self.delay = delay
        self.requests = []
        self.headers = []
        self.lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = True
        self._httpd.mock = self
        self._thread = None

    @property
    def url(self):
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/generate"

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
