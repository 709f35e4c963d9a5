"""Session wire protocol: newline-delimited JSON messages, schema v1.

Both the TCP byte-stream transport and the WebSocket bridge speak the same
messages; the operator console consumes them verbatim.  Every message
carries a `v` field so clients can refuse schemas they do not understand.
"""

from __future__ import annotations

import base64
import io
import json

import numpy as np

PROTOCOL_VERSION = 1

# message type -> required fields (beyond v/type)
SCHEMA = {
    # server -> client
    "frame_meta": {"index", "timestamp", "width", "height", "mean_intensity"},
    "pose_estimate": {"index", "pose"},
    "uncertainty_report": {"index", "mu", "sigma2", "gate"},
    "saliency_png": {"index", "png"},
    "prompt": {"index", "cause", "message"},
    "session_summary": {"frames", "accepted", "prompts", "mean_sigma2"},
    "error": {"message"},
    "started": {"session_id", "mode"},
    # client -> server
    "start": {"session_id"},
    "frame": {"index", "pixels"},
    "tick": set(),
    "operator_action": {"kind"},
    "end": set(),
}

ACTION_KINDS = ("slow-down", "press", "rescan", "reacquire")


class ProtocolError(ValueError):
    """Malformed or schema-incompatible wire message."""


def make_message(msg_type: str, **fields) -> dict:
    msg = {"v": PROTOCOL_VERSION, "type": msg_type, **fields}
    validate_message(msg)
    return msg


def validate_message(msg: dict) -> dict:
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {msg.get('v')!r}")
    msg_type = msg.get("type")
    if msg_type not in SCHEMA:
        raise ProtocolError(f"unknown message type {msg_type!r}")
    missing = SCHEMA[msg_type] - set(msg)
    if missing:
        raise ProtocolError(f"{msg_type} message missing fields {sorted(missing)}")
    if msg_type == "operator_action" and msg["kind"] not in ACTION_KINDS:
        raise ProtocolError(f"unknown operator action {msg['kind']!r}")
    return msg


def encode_message(msg: dict) -> str:
    """One JSON line, newline-terminated."""
    validate_message(msg)
    return json.dumps(msg, separators=(",", ":")) + "\n"


def decode_line(line: str | bytes) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"invalid JSON: {e}") from e
    return validate_message(msg)


# ---------------------------------------------------------------------
# payload helpers

def encode_pixels(frame: np.ndarray) -> str:
    """Raw little-endian float64 pixels, base64; shape travels in `frame` msgs."""
    return base64.b64encode(np.ascontiguousarray(frame, dtype="<f8").tobytes()).decode()


def decode_pixels(payload: str, height: int, width: int) -> np.ndarray:
    raw = base64.b64decode(payload)
    expect = 8 * height * width
    if len(raw) != expect:
        raise ProtocolError(f"pixel payload is {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f8").reshape(height, width).copy()


def encode_png(image: np.ndarray) -> str:
    """Grayscale [0, 1] array -> base64 PNG."""
    from PIL import Image
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def decode_png(payload: str) -> np.ndarray:
    from PIL import Image
    img = Image.open(io.BytesIO(base64.b64decode(payload)))
    return np.asarray(img, dtype=float) / 255.0
