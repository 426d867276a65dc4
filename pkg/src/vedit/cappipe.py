"""Open-world video -> edit triplet pipeline over pluggable services.

Every stage talks the same wire protocol: ``POST <base_url>`` with a JSON
body ``{"task": <name>, "inputs": {...}}`` answered by ``{"output": ...}``.
Frames travel as base64-encoded 8-bit PNGs.

============  ================  =============================================  ====================================
stage         task              inputs                                         output
============  ================  =============================================  ====================================
frame         caption_frame     ``{"frame": png}``                             caption text
video         caption_video     ``{"frames": [png, ...]}``                     caption text
summary       summarize         ``{"captions": [text x5]}``                    summary text
instruct      make_instruction  ``{"caption": text, "few_shot": [...]}``       ``{"instruction", "edited_caption"}``
editor        edit_video        ``{"frames": [...], "instruction", ...}``      ``{"frames": [png, ...]}``
============  ================  =============================================  ====================================

Transient failures (connection errors, timeouts, HTTP 5xx/429) are retried
with exponential backoff; anything unparsable is a malformed response and is
not retried.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from typing import Any, Callable, Protocol

import numpy as np
import requests
from PIL import Image

from .augment import EditTriplet

log = logging.getLogger(__name__)

STAGES = ("frame", "video", "summary", "instruct", "editor")
ENV_VARS = {
    "frame": "EVD_CAPTION_URL",
    "video": "EVD_VIDEO_CAPTION_URL",
    "summary": "EVD_SUMMARY_URL",
    "instruct": "EVD_INSTRUCT_URL",
    "editor": "EVD_EDITOR_URL",
}
STAGE_NAMES = {
    "frame": "frame_captioner",
    "video": "video_captioner",
    "summary": "summarizer",
    "instruct": "instruction_generator",
    "editor": "editor",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class BackendUnavailable(PipelineError):
    pass


class MalformedResponse(PipelineError):
    pass


class ConfigError(ValueError):
    pass


class TransientError(Exception):
    """Raised by transports for failures worth retrying."""


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str
    timeout_ms: int = 30000
    max_retries: int = 3
    backoff_ms: int = 500

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    def delay_s(self, retry: int) -> float:
        """Sleep before retry number ``retry`` (1-based): 0.5 s, 1 s, 2 s, ..."""
        return self.backoff_ms * (2 ** (retry - 1)) / 1000.0


@dataclass
class CaptionBundle:
    keyframe_captions: list[str]
    video_caption: str
    summary: str


@dataclass
class InstructionResult:
    instruction: str
    edited_caption: str


# ---------------------------------------------------------------------------
# frame encoding


def encode_png(frame: np.ndarray) -> str:
    u8 = np.round(np.clip(np.asarray(frame), 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(u8[0] if u8.shape[0] == 1 else np.ascontiguousarray(u8.transpose(1, 2, 0)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data, validate=True))) as im:
        arr = np.asarray(im.convert("L" if im.mode in ("L", "LA", "1") else "RGB"), dtype=np.uint8)
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# clients


class Service(Protocol):
    stage: str

    def call(self, task: str, inputs: dict) -> Any: ...


class RetryingClient:
    """Applies the endpoint's retry policy around a transport callable.

    ``transport(task, inputs)`` returns the decoded JSON response body or
    raises :class:`TransientError`.  ``attempts`` counts every try made.
    """

    def __init__(self, stage: str, transport: Callable[[str, dict], Any], endpoint: BackendEndpoint,
                 sleep: Callable[[float], None] = time.sleep):
        self.stage = stage
        self.transport = transport
        self.endpoint = endpoint
        self.sleep = sleep
        self.attempts = 0
        self._lock = threading.Lock()

    def call(self, task: str, inputs: dict) -> Any:
        last = None
        for attempt in range(1, self.endpoint.max_retries + 2):
            with self._lock:
                self.attempts += 1
            log.info("stage=%s task=%s attempt=%d", self.stage, task, attempt)
            try:
                body = self.transport(task, inputs)
            except TransientError as exc:
                last = exc
                log.warning("stage=%s attempt=%d failed: %s", self.stage, attempt, exc)
                if attempt <= self.endpoint.max_retries:
                    self.sleep(self.endpoint.delay_s(attempt))
                continue
            if not isinstance(body, dict) or "output" not in body:
                raise MalformedResponse(self.stage, f"response lacks an 'output' field: {str(body)[:200]}")
            return body["output"]
        raise BackendUnavailable(self.stage, f"gave up after {self.endpoint.max_retries + 1} attempts ({last})")


def http_transport(endpoint: BackendEndpoint, session: requests.Session | None = None
                   ) -> Callable[[str, dict], Any]:
    sess = session or requests.Session()

    def send(task: str, inputs: dict) -> Any:
        try:
            resp = sess.post(endpoint.base_url, json={"task": task, "inputs": inputs},
                             timeout=endpoint.timeout_ms / 1000.0)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            return {"error": f"HTTP {resp.status_code}"}
        try:
            return resp.json()
        except ValueError:
            return {"error": "response is not JSON"}

    return send


def http_client(stage: str, endpoint: BackendEndpoint, sleep: Callable[[float], None] = time.sleep) -> RetryingClient:
    return RetryingClient(stage, http_transport(endpoint), endpoint, sleep)


# ---------------------------------------------------------------------------
# deterministic mock behaviour

_TONES = ((0.2, "dark"), (0.4, "dim"), (0.6, "evenly lit"), (0.8, "bright"), (1.01, "very bright"))


def _tone(v: float) -> str:
    return next(name for bound, name in _TONES if v < bound)


def _texture(s: float) -> str:
    return "flat" if s < 0.05 else "soft" if s < 0.15 else "busy"


def mock_caption_frame(inputs: dict) -> str:
    f = decode_png(inputs["frame"])
    color = "grayscale" if f.shape[0] == 1 else ("reddish", "greenish", "bluish")[int(np.argmax(f.mean(axis=(1, 2))))]
    tone = _tone(float(f.mean()))
    article = "an" if tone[0] in "aeiou" else "a"
    return f"{article} {tone} {color} scene with {_texture(float(f.std()))} texture"


def mock_caption_video(inputs: dict) -> str:
    frames = [decode_png(x) for x in inputs["frames"]]
    means = [float(f.mean()) for f in frames]
    trend = "brightens" if means[-1] > means[0] + 0.02 else "darkens" if means[-1] < means[0] - 0.02 else "stays steady"
    return f"a {len(frames)}-keyframe clip that {trend} over time"


def mock_summarize(inputs: dict) -> str:
    caps = inputs["captions"]
    seen: list[str] = []
    for c in caps[:-1]:
        if c not in seen:
            seen.append(c)
    return f"{caps[-1]}, showing " + "; then ".join(seen)


def mock_make_instruction(inputs: dict) -> dict:
    shots = inputs["few_shot"]
    caption = inputs["caption"]
    from .diffusion import fnv1a64
    ex = shots[fnv1a64(caption.encode("utf-8")) % len(shots)]
    return {"instruction": ex["instruction"], "edited_caption": f"{caption} ({ex['edited_caption']})"}


STUB_EDITS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "invert": lambda v: 1.0 - v,
    "brighten": lambda v: np.clip(v + 0.3, 0.0, 1.0),
    "brighter": lambda v: np.clip(v + 0.3, 0.0, 1.0),
    "darken": lambda v: np.clip(v - 0.3, 0.0, 1.0),
    "darker": lambda v: np.clip(v - 0.3, 0.0, 1.0),
    "black": lambda v: np.repeat(v.mean(axis=1, keepdims=True), v.shape[1], axis=1),
    "grayscale": lambda v: np.repeat(v.mean(axis=1, keepdims=True), v.shape[1], axis=1),
    "contrast": lambda v: np.clip((v - 0.5) * 1.5 + 0.5, 0.0, 1.0),
}


def stub_edit(video: np.ndarray, instruction: str) -> np.ndarray:
    """Global colour transform chosen by the first known keyword; identity otherwise."""
    from .diffusion import tokenize
    for tok in tokenize(instruction):
        if tok in STUB_EDITS:
            return STUB_EDITS[tok](np.asarray(video, dtype=np.float32)).astype(np.float32)
    return np.array(video, dtype=np.float32)


def mock_edit_video(inputs: dict) -> dict:
    video = np.stack([decode_png(x) for x in inputs["frames"]])
    out = stub_edit(video, inputs["instruction"])
    return {"frames": [encode_png(f) for f in out]}


MOCK_HANDLERS: dict[str, Callable[[dict], Any]] = {
    "caption_frame": mock_caption_frame,
    "caption_video": mock_caption_video,
    "summarize": mock_summarize,
    "make_instruction": mock_make_instruction,
    "edit_video": mock_edit_video,
}


def handle_task(task: str, inputs: dict) -> dict:
    """Mock server logic: wrap a handler result in the response envelope."""
    if task not in MOCK_HANDLERS:
        return {"error": f"unknown task {task!r}"}
    return {"output": MOCK_HANDLERS[task](inputs)}


class FlakyTransport:
    """In-process transport that fails ``fail_first`` times before answering."""

    def __init__(self, fail_first: int = 0, handler: Callable[[str, dict], Any] = handle_task):
        self.fail_first = fail_first
        self.handler = handler
        self.calls = 0

    def __call__(self, task: str, inputs: dict) -> Any:
        self.calls += 1
        if self.calls <= self.fail_first:
            raise TransientError(f"simulated outage ({self.calls}/{self.fail_first})")
        return self.handler(task, inputs)


def mock_client(stage: str, fail_first: int = 0, endpoint: BackendEndpoint | None = None,
                sleep: Callable[[float], None] = lambda s: None) -> RetryingClient:
    return RetryingClient(stage, FlakyTransport(fail_first), endpoint or BackendEndpoint("mock://"), sleep)


# ---------------------------------------------------------------------------
# HTTP mock server


class MockServer:
    """Threaded localhost server answering every task with the mock handlers.

    ``fail_next[task] = n`` makes the next ``n`` requests for ``task`` return 503.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.fail_next: dict[str, int] = {}
        self.requests: list[str] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length))
                    task, inputs = body["task"], body["inputs"]
                except (ValueError, KeyError, TypeError):
                    self._send(400, {"error": "bad request"})
                    return
                outer.requests.append(task)
                if outer.fail_next.get(task, 0) > 0:
                    outer.fail_next[task] -= 1
                    self._send(503, {"error": "unavailable"})
                    return
                try:
                    self._send(200, handle_task(task, inputs))
                except Exception as exc:  # handler bug -> server error
                    self._send(500, {"error": str(exc)})

            def _send(self, code: int, payload: dict):
                data = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/"

    def __enter__(self) -> "MockServer":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


# ---------------------------------------------------------------------------
# pipeline


def load_few_shot() -> list[dict]:
    """Shipped example set (repo-authored, in the style of instruction-editing data)."""
    text = resources.files("vedit").joinpath("data/few_shot.json").read_text(encoding="utf-8")
    return json.loads(text)["examples"]


@dataclass
class PipelineClients:
    frame: Service
    video: Service
    summary: Service
    instruct: Service
    editor: Service
    few_shot: list[dict] = field(default_factory=load_few_shot)

    @classmethod
    def mock(cls, few_shot: list[dict] | None = None) -> "PipelineClients":
        clients = {s: mock_client(STAGE_NAMES[s]) for s in STAGES}
        return cls(**clients, few_shot=few_shot if few_shot is not None else load_few_shot())

    @classmethod
    def from_env(cls, env: dict | None = None, timeout_ms: int = 30000, max_retries: int = 3,
                 sleep: Callable[[float], None] = time.sleep) -> "PipelineClients":
        env = os.environ if env is None else env
        missing = [ENV_VARS[s] for s in STAGES if not env.get(ENV_VARS[s])]
        if missing:
            raise ConfigError("missing endpoint configuration: " + ", ".join(missing))
        clients = {s: http_client(STAGE_NAMES[s], BackendEndpoint(env[ENV_VARS[s]], timeout_ms, max_retries), sleep)
                   for s in STAGES}
        return cls(**clients)


def keyframe_indices(n_frames: int, k: int = 4) -> list[int]:
    """Endpoint-inclusive, evenly spaced frame indices."""
    if k < 1 or n_frames < k:
        raise ValueError(f"need n_frames >= k >= 1, got n_frames={n_frames}, k={k}")
    if k == 1:
        return [0]
    return [int(np.floor(i * (n_frames - 1) / (k - 1) + 0.5)) for i in range(k)]


def _text(stage: str, value: Any) -> str:
    if not isinstance(value, str) or not value.strip():
        raise MalformedResponse(stage, f"expected non-empty text, got {value!r:.80}")
    return value


def compose_caption(frame_captioner: Service, video_captioner: Service, summarizer: Service,
                    video: np.ndarray) -> CaptionBundle:
    keys = [encode_png(video[i]) for i in keyframe_indices(len(video), 4)]
    frame_caps = [_text(frame_captioner.stage, frame_captioner.call("caption_frame", {"frame": k})) for k in keys]
    video_cap = _text(video_captioner.stage, video_captioner.call("caption_video", {"frames": keys}))
    summary = _text(summarizer.stage, summarizer.call("summarize", {"captions": frame_caps + [video_cap]}))
    return CaptionBundle(frame_caps, video_cap, summary)


def gen_instruction(backend: Service, caption: str, few_shot: list[dict]) -> InstructionResult:
    if not few_shot:
        raise ValueError("few_shot must contain at least one example")
    out = backend.call("make_instruction", {"caption": caption, "few_shot": few_shot})
    if not isinstance(out, dict):
        raise MalformedResponse(backend.stage, f"expected an object, got {type(out).__name__}")
    for key in ("instruction", "edited_caption"):
        if key not in out:
            raise MalformedResponse(backend.stage, f"missing field {key!r}")
    return InstructionResult(_text(backend.stage, out["instruction"]), _text(backend.stage, out["edited_caption"]))


def run_editor(editor: Service, video: np.ndarray, instr: InstructionResult) -> np.ndarray:
    out = editor.call("edit_video", {"frames": [encode_png(f) for f in video],
                                     "instruction": instr.instruction, "edited_caption": instr.edited_caption})
    try:
        frames = np.stack([decode_png(x) for x in out["frames"]])
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise MalformedResponse(editor.stage, f"could not decode edited frames ({exc})") from exc
    if frames.shape != video.shape:
        raise MalformedResponse(editor.stage, f"edited video shape {frames.shape} != input {video.shape}")
    return frames


def build_openworld_triplet(clients: PipelineClients, video: np.ndarray, seed: int = 0,
                            editor: Service | None = None) -> tuple[EditTriplet, CaptionBundle, InstructionResult]:
    """Caption, write an instruction, run the editor; returns the triplet plus intermediates."""
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or len(video) < 4:
        raise ValueError(f"need a (T, C, H, W) video with T >= 4, got shape {video.shape}")
    # match what the services see: frames are exchanged as 8-bit PNGs
    video = np.round(np.clip(video, 0, 1) * 255.0).astype(np.float32) / np.float32(255.0)
    bundle = compose_caption(clients.frame, clients.video, clients.summary, video)
    instr = gen_instruction(clients.instruct, bundle.summary, clients.few_shot)
    edited = run_editor(editor or clients.editor, video, instr)
    return EditTriplet(video, instr.instruction, edited, "openworld", seed), bundle, instr
