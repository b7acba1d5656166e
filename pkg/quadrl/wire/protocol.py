"""
Binary frames and message schemas.

Frame:  u32 BE length (= 5 + |payload|) | u8 kind | u32 BE request_id | payload
Payload scalars are little-endian, floats 32-bit, strings/bytes u32-length-prefixed,
lists u32-count-prefixed, depth images 1024 float32 row-major.

Bodies are dicts keyed by the schema field names. Requests and responses of
the same kind have different schemas; ErrorResponse is the same both ways.
"""
from __future__ import annotations

import struct
from enum import IntEnum
from typing import Any, Dict, List, Tuple

import numpy as np

from quadrl.domain.errors import ErrorCode, ProtocolError
from quadrl.domain.models import IMAGE_SIZE, EpisodeRecord, Experience, Pose, StackedState, TerminalKind

HEADER = struct.Struct(">IBI")
HEADER_SIZE = HEADER.size  # 9
MAX_FRAME = 64 * 1024 * 1024
_IMAGE_FLOATS = IMAGE_SIZE * IMAGE_SIZE


class MessageKind(IntEnum):
    GET_BATCH_STATES = 1
    GET_STATES_NONBATCHED = 2
    APPLY_ACTIONS = 3
    STEP_PERIOD = 4
    RESET_VEHICLE = 5
    RESET_ALL = 6
    PUSH_EXPERIENCES = 7
    SAMPLE_BATCH = 8
    REPLAY_STATS = 9
    GET_PARAMS = 10
    REPORT_EPISODE = 11
    HEALTH = 12
    ERROR_RESPONSE = 255


K = MessageKind

_STATES_RESPONSE = [("tick", "u64"), ("barrier_waits", "u64"), ("states", ("list", "state"))]
_ERROR = [("code", "u8"), ("message", "str")]

REQUEST_SCHEMAS: Dict[MessageKind, list] = {
    K.GET_BATCH_STATES: [("agent_ids", ("list", "u32"))],
    K.GET_STATES_NONBATCHED: [("agent_ids", ("list", "u32"))],
    K.APPLY_ACTIONS: [("actions", ("list", ("struct", [("agent_id", "u32"), ("action", "u8")])))],
    K.STEP_PERIOD: [],
    K.RESET_VEHICLE: [("agent_id", "u32"), ("random_spawn", "u8"), ("pose", "pose")],
    K.RESET_ALL: [],
    K.PUSH_EXPERIENCES: [("items", ("list", "experience"))],
    K.SAMPLE_BATCH: [("n", "u32")],
    K.REPLAY_STATS: [],
    K.GET_PARAMS: [("have_version", "u64")],
    K.REPORT_EPISODE: [("record", "episode")],
    K.HEALTH: [],
    K.ERROR_RESPONSE: _ERROR,
}

RESPONSE_SCHEMAS: Dict[MessageKind, list] = {
    K.GET_BATCH_STATES: _STATES_RESPONSE,
    K.GET_STATES_NONBATCHED: _STATES_RESPONSE,
    K.APPLY_ACTIONS: [("desired_lateral", ("list", "f32"))],
    K.STEP_PERIOD: [("outcomes", ("list", ("struct", [("agent_id", "u32"), ("reward", "f32"), ("terminal", "u8")])))],
    K.RESET_VEHICLE: [("pose", "pose")],
    K.RESET_ALL: [],
    K.PUSH_EXPERIENCES: [
        ("accepted", "u32"),
        ("a_t", "u64"),
        ("rejected", ("list", ("struct", [("index", "u32"), ("reason", "str")]))),
    ],
    K.SAMPLE_BATCH: [("ready", "u8"), ("items", ("list", "experience"))],
    K.REPLAY_STATS: [("len", "u64"), ("capacity", "u64"), ("a_t", "u64"), ("insert_count", "u64")],
    K.GET_PARAMS: [("up_to_date", "u8"), ("version", "u64"), ("blob", "bytes")],
    K.REPORT_EPISODE: [("episodes", "u64")],
    K.HEALTH: [("role", "str"), ("version", "u64"), ("train_steps", "u64"), ("episodes", "u64"), ("moving_avg", "f32")],
    K.ERROR_RESPONSE: _ERROR,
}

_SCALARS = {"u8": struct.Struct("<B"), "u32": struct.Struct("<I"), "u64": struct.Struct("<Q"), "f32": struct.Struct("<f")}


def _mismatch(msg: str) -> ProtocolError:
    return ProtocolError(ErrorCode.SCHEMA_MISMATCH, msg)


# ──────────────────────────────────────────────────
# Writer
# ──────────────────────────────────────────────────

def _put_floats(out: List[bytes], arr: Any, count: int, what: str) -> None:
    a = np.asarray(arr, dtype="<f4").reshape(-1)
    if a.size != count:
        raise _mismatch(f"{what} needs {count} floats, got {a.size}")
    out.append(a.tobytes())


def _put(out: List[bytes], typ: Any, value: Any, where: str) -> None:
    try:
        if isinstance(typ, tuple):
            if typ[0] == "list":
                items = list(value)
                out.append(_SCALARS["u32"].pack(len(items)))
                for i, item in enumerate(items):
                    _put(out, typ[1], item, f"{where}[{i}]")
                return
            if typ[0] == "struct":
                _put_fields(out, typ[1], value, where)
                return
        if typ in _SCALARS:
            out.append(_SCALARS[typ].pack(value))
        elif typ == "str":
            raw = str(value).encode("utf-8")
            out.append(_SCALARS["u32"].pack(len(raw)) + raw)
        elif typ == "bytes":
            raw = bytes(value)
            out.append(_SCALARS["u32"].pack(len(raw)) + raw)
        elif typ == "image":
            _put_floats(out, value, _IMAGE_FLOATS, where)
        elif typ == "vec3":
            _put_floats(out, value, 3, where)
        elif typ == "pose":
            _put_floats(out, (*value.position, value.yaw), 4, where)
        elif typ == "state":
            _put(out, "image", value.image_now, where + ".image_now")
            _put(out, "image", value.image_prev, where + ".image_prev")
            _put(out, "vec3", value.velocity, where + ".velocity")
        elif typ == "experience":
            _put(out, "state", value.s, where + ".s")
            _put(out, "u8", int(value.a), where + ".a")
            _put(out, "state", value.s_next, where + ".s_next")
            _put(out, "f32", float(value.r), where + ".r")
            _put(out, "u8", int(bool(value.done)), where + ".done")
        elif typ == "episode":
            for name, t in _EPISODE_FIELDS:
                v = getattr(value, name)
                _put(out, t, int(v) if t in ("u8", "u32") else v, f"{where}.{name}")
        else:
            raise _mismatch(f"unknown schema type {typ!r}")
    except ProtocolError:
        raise
    except (struct.error, TypeError, ValueError, AttributeError) as e:
        raise _mismatch(f"{where}: {e}") from None


def _put_fields(out: List[bytes], fields: list, body: Any, where: str) -> None:
    if not isinstance(body, dict):
        raise _mismatch(f"{where}: body must be a dict, got {type(body).__name__}")
    missing = [n for n, _ in fields if n not in body]
    if missing:
        raise _mismatch(f"{where}: missing fields {missing}")
    for name, typ in fields:
        _put(out, typ, body[name], f"{where}.{name}")


_EPISODE_FIELDS = [
    ("agent_id", "u32"), ("episode", "u32"), ("reward", "f32"), ("steps", "u32"),
    ("epsilon", "f32"), ("t_start", "f32"), ("t_end", "f32"), ("terminal", "u8"), ("observations", "u32"),
]


# ──────────────────────────────────────────────────
# Reader
# ──────────────────────────────────────────────────

class _Reader:
    def __init__(self, data: memoryview):
        self.mv = data
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.mv):
            raise _mismatch(f"body truncated at byte {self.pos} (need {n} more)")
        out = self.mv[self.pos:self.pos + n]
        self.pos += n
        return out

    def scalar(self, typ: str):
        s = _SCALARS[typ]
        return s.unpack(self.take(s.size))[0]

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def read(self, typ: Any) -> Any:
        if isinstance(typ, tuple):
            if typ[0] == "list":
                count = self.scalar("u32")
                if count > len(self.mv):
                    raise _mismatch(f"list count {count} exceeds payload size")
                return [self.read(typ[1]) for _ in range(count)]
            if typ[0] == "struct":
                return self.fields(typ[1])
        if typ in _SCALARS:
            return self.scalar(typ)
        if typ in ("str", "bytes"):
            raw = bytes(self.take(self.scalar("u32")))
            if typ == "bytes":
                return raw
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError:
                raise _mismatch("string is not valid utf-8") from None
        if typ == "image":
            return self.floats(_IMAGE_FLOATS).reshape(IMAGE_SIZE, IMAGE_SIZE)
        if typ == "vec3":
            return self.floats(3)
        if typ == "pose":
            v = self.floats(4)
            if not np.all(np.isfinite(v)):
                raise _mismatch("pose must be finite")
            return Pose(position=(float(v[0]), float(v[1]), float(v[2])), yaw=float(v[3]))
        if typ == "state":
            now, prev, vel = self.read("image"), self.read("image"), self.read("vec3")
            try:
                return StackedState(now, prev, vel)
            except ValueError as e:
                raise _mismatch(str(e)) from None
        if typ == "experience":
            s = self.read("state")
            a = self.scalar("u8")
            s_next = self.read("state")
            r = self.scalar("f32")
            done = self.scalar("u8")
            return Experience(s=s, a=a, s_next=s_next, r=float(r), done=bool(done))
        if typ == "episode":
            vals = {name: self.read(t) for name, t in _EPISODE_FIELDS}
            try:
                vals["terminal"] = TerminalKind(vals["terminal"])
            except ValueError:
                raise _mismatch(f"unknown terminal kind {vals['terminal']}") from None
            return EpisodeRecord(**vals)
        raise _mismatch(f"unknown schema type {typ!r}")

    def fields(self, fields: list) -> Dict[str, Any]:
        return {name: self.read(typ) for name, typ in fields}


# ──────────────────────────────────────────────────
# Frames
# ──────────────────────────────────────────────────

def _schemas(response: bool) -> Dict[MessageKind, list]:
    return RESPONSE_SCHEMAS if response else REQUEST_SCHEMAS


def encode_body(kind: MessageKind, body: Dict[str, Any] | None, *, response: bool = False) -> bytes:
    out: List[bytes] = []
    _put_fields(out, _schemas(response)[MessageKind(kind)], body or {}, MessageKind(kind).name)
    return b"".join(out)


def decode_body(kind: MessageKind, payload: bytes | memoryview, *, response: bool = False) -> Dict[str, Any]:
    r = _Reader(memoryview(payload))
    body = r.fields(_schemas(response)[kind])
    if r.pos != len(r.mv):
        raise _mismatch(f"{kind.name}: {len(r.mv) - r.pos} trailing bytes in body")
    return body


def encode(kind: MessageKind, request_id: int, body: Dict[str, Any] | None = None, *, response: bool = False) -> bytes:
    payload = encode_body(kind, body, response=response)
    if HEADER_SIZE - 4 + len(payload) > MAX_FRAME:
        raise ProtocolError(ErrorCode.BAD_LENGTH, f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(5 + len(payload), int(kind), int(request_id)) + payload


def encode_error(request_id: int, code: ErrorCode, message: str) -> bytes:
    return encode(K.ERROR_RESPONSE, request_id, {"code": int(code), "message": message[:2000]}, response=True)


def parse_header(header: bytes) -> Tuple[int, int, int]:
    """(length, kind byte, request_id) without validating kind."""
    if len(header) < HEADER_SIZE:
        raise ProtocolError(ErrorCode.SHORT_FRAME, f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    length, kind, request_id = HEADER.unpack_from(header)
    if length < 5 or length > MAX_FRAME:
        raise ProtocolError(ErrorCode.BAD_LENGTH, f"length field {length} outside [5, {MAX_FRAME}]")
    return length, kind, request_id


def to_kind(raw: int) -> MessageKind:
    try:
        return MessageKind(raw)
    except ValueError:
        raise ProtocolError(ErrorCode.UNKNOWN_KIND, f"unknown message kind {raw}") from None


def decode(data: bytes, *, response: bool = False) -> Tuple[MessageKind, int, Dict[str, Any]]:
    if len(data) < 4:
        raise ProtocolError(ErrorCode.SHORT_FRAME, f"frame needs at least 4 bytes, got {len(data)}")
    (length,) = struct.unpack_from(">I", data)
    if length < 5 or length > MAX_FRAME:
        raise ProtocolError(ErrorCode.BAD_LENGTH, f"length field {length} outside [5, {MAX_FRAME}]")
    if len(data) < 4 + length:
        raise ProtocolError(ErrorCode.SHORT_FRAME, f"incomplete frame: length says {length}, have {len(data) - 4}")
    if len(data) > 4 + length:
        raise ProtocolError(ErrorCode.BAD_LENGTH, f"{len(data) - 4 - length} trailing bytes after frame")
    _, raw_kind, request_id = HEADER.unpack_from(data)
    kind = to_kind(raw_kind)
    resp = response or kind == K.ERROR_RESPONSE
    return kind, request_id, decode_body(kind, memoryview(data)[HEADER_SIZE:], response=resp)
