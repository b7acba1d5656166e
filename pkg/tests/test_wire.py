"""Frame codec, RPC server/client over loopback, typed role clients."""

import socket
import statistics
import struct
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_experience
from quadrl.app.engine import SimService, TrainerService
from quadrl.agent.dqn import Hyperparams
from quadrl.domain.errors import (
    ErrorCode,
    NotReady,
    ProtocolError,
    RemoteError,
    RpcConnectionError,
    RpcTimeout,
)
from quadrl.domain.models import EpisodeRecord, Experience, Pose, StackedState, TerminalKind
from quadrl.nn.params import NetParams
from quadrl.sim.simcore import SimConfig, create_world
from quadrl.wire.clients import SimClient, TrainerClient, get_params_client, is_not_ready
from quadrl.wire.protocol import (
    HEADER,
    MAX_FRAME,
    REQUEST_SCHEMAS,
    RESPONSE_SCHEMAS,
    MessageKind,
    decode,
    encode,
    encode_error,
    parse_header,
)
from quadrl.wire.rpc import RpcClient, RpcServer, call, parse_address

K = MessageKind


# =============================================================================
# Randomised bodies
# =============================================================================

def _f32(rng):
    return float(np.float32(rng.standard_normal() * 100))


def _state(rng):
    return StackedState(
        rng.random((32, 32)).astype(np.float32) * 20,
        rng.random((32, 32)).astype(np.float32) * 20,
        rng.standard_normal(3).astype(np.float32),
    )


def _random(typ, rng):
    if isinstance(typ, tuple):
        if typ[0] == "list":
            return [_random(typ[1], rng) for _ in range(int(rng.integers(0, 4)))]
        return {name: _random(t, rng) for name, t in typ[1]}
    if typ == "u8":
        return int(rng.integers(0, 256))
    if typ == "u32":
        return int(rng.integers(0, 2 ** 32))
    if typ == "u64":
        return int(rng.integers(0, 2 ** 63))
    if typ == "f32":
        return _f32(rng)
    if typ == "str":
        return "".join(rng.choice(list("abcXYZ _-é✓"), size=int(rng.integers(0, 12))))
    if typ == "bytes":
        return rng.bytes(int(rng.integers(0, 64)))
    if typ == "pose":
        return Pose((_f32(rng), _f32(rng), _f32(rng)), float(np.float32(rng.uniform(-3.0, 3.0))))
    if typ == "state":
        return _state(rng)
    if typ == "experience":
        return Experience(_state(rng), int(rng.integers(0, 2)), _state(rng), _f32(rng), bool(rng.integers(0, 2)))
    if typ == "episode":
        return EpisodeRecord(
            agent_id=int(rng.integers(0, 100)), episode=int(rng.integers(0, 10_000)), reward=_f32(rng),
            steps=int(rng.integers(0, 200)), epsilon=float(np.float32(rng.random())), t_start=_f32(rng),
            t_end=_f32(rng), terminal=TerminalKind(int(rng.integers(0, 3))), observations=int(rng.integers(0, 400)),
        )
    raise AssertionError(typ)


def _same(a, b):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, Pose):
        return np.allclose(a.position, b.position) and abs(a.yaw - b.yaw) < 1e-5
    if isinstance(a, (StackedState, Experience)):
        return a.same_as(b)
    return a == b


def _round_trip(kind, rng, response):
    schemas = RESPONSE_SCHEMAS if response else REQUEST_SCHEMAS
    body = {name: _random(t, rng) for name, t in schemas[kind]}
    rid = int(rng.integers(0, 2 ** 32))
    got_kind, got_rid, got = decode(encode(kind, rid, body, response=response), response=response)
    assert got_kind == kind and got_rid == rid
    assert _same(body, got), kind


# =============================================================================
# Frames
# =============================================================================

class TestFrames:

    def test_health_request_is_nine_bytes(self):
        frame = encode(K.HEALTH, 7)
        assert frame == struct.pack(">IBI", 5, 12, 7)
        assert decode(frame) == (K.HEALTH, 7, {})

    def test_thirteen_kinds(self):
        assert len(MessageKind) == 13
        assert set(REQUEST_SCHEMAS) == set(RESPONSE_SCHEMAS) == set(MessageKind)

    @pytest.mark.parametrize("kind", list(MessageKind))
    @pytest.mark.parametrize("response", [False, True])
    def test_round_trip(self, kind, response):
        rng = np.random.default_rng(int(kind) * 2 + response)
        for _ in range(20):
            _round_trip(kind, rng, response)

    @pytest.mark.slow
    def test_round_trip_many(self):
        rng = np.random.default_rng(99)
        kinds = list(MessageKind)
        for i in range(10_000):
            _round_trip(kinds[i % len(kinds)], rng, bool(i % 2))

    def test_error_response_decodes_either_way(self):
        frame = encode_error(3, ErrorCode.NOT_READY, "later")
        assert decode(frame) == (K.ERROR_RESPONSE, 3, {"code": 6, "message": "later"})

    @pytest.mark.parametrize("data, code", [
        (b"\x00\x00", ErrorCode.SHORT_FRAME),
        (struct.pack(">I", 3) + b"\x0c\x00\x00", ErrorCode.BAD_LENGTH),
        (struct.pack(">I", MAX_FRAME + 1), ErrorCode.BAD_LENGTH),
        (struct.pack(">IBI", 9, 12, 1), ErrorCode.SHORT_FRAME),
        (struct.pack(">IBI", 5, 12, 1) + b"\x00", ErrorCode.BAD_LENGTH),
        (struct.pack(">IBI", 5, 99, 1), ErrorCode.UNKNOWN_KIND),
        (struct.pack(">IBI", 7, 12, 1) + b"\x00\x00", ErrorCode.SCHEMA_MISMATCH),
        (struct.pack(">IBI", 7, 8, 1) + b"\x00\x00", ErrorCode.SCHEMA_MISMATCH),
        (struct.pack(">IBI", 9, 1, 1) + struct.pack("<I", 1000), ErrorCode.SCHEMA_MISMATCH),
    ])
    def test_malformed(self, data, code):
        with pytest.raises(ProtocolError) as e:
            decode(data)
        assert e.value.code == code

    def test_parse_header(self):
        assert parse_header(struct.pack(">IBI", 9, 8, 4)) == (9, 8, 4)
        with pytest.raises(ProtocolError):
            parse_header(b"\x00" * 4)

    @pytest.mark.parametrize("kind, body", [
        (K.SAMPLE_BATCH, {}),
        (K.SAMPLE_BATCH, {"n": -1}),
        (K.GET_BATCH_STATES, {"agent_ids": ["x"]}),
        (K.REPORT_EPISODE, {"record": "nope"}),
    ])
    def test_encode_rejects_bad_bodies(self, kind, body):
        with pytest.raises(ProtocolError) as e:
            encode(kind, 1, body)
        assert e.value.code == ErrorCode.SCHEMA_MISMATCH

    def test_image_must_be_32x32(self):
        small = SimpleNamespace(image_now=np.zeros((31, 31)), image_prev=np.zeros((32, 32)), velocity=np.zeros(3))
        body = {"tick": 0, "barrier_waits": 0, "states": [small]}
        with pytest.raises(ProtocolError) as e:
            encode(K.GET_BATCH_STATES, 1, body, response=True)
        assert e.value.code == ErrorCode.SCHEMA_MISMATCH

    def test_parse_address(self):
        assert parse_address("10.0.0.2:7101") == ("10.0.0.2", 7101)
        with pytest.raises(ValueError):
            parse_address("7101")


# =============================================================================
# Server and client
# =============================================================================

def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _raw_request(sock, frame):
    sock.sendall(frame)
    header = sock.recv(9, socket.MSG_WAITALL)
    length, kind, rid = HEADER.unpack(header)
    payload = sock.recv(length - 5, socket.MSG_WAITALL) if length > 5 else b""
    return decode(header + payload, response=True)


@pytest.fixture
def server():
    calls = {"report": 0, "health": 0}

    def report(body):
        calls["report"] += 1
        return {"episodes": body["record"].episode}

    def sample(body):
        n = body["n"]
        if n == 1:
            time.sleep(0.3)
        if n == 13:
            raise NotReady("empty")
        if n == 14:
            raise ValueError("bad n")
        if n == 15:
            raise RuntimeError("boom")
        if n == 16:
            time.sleep(1.0)
        return {"ready": 1, "items": []}

    def health(body):
        calls["health"] += 1
        if calls.get("slow_health"):
            time.sleep(1.0)
        return {"role": "test", "version": 1, "train_steps": 2, "episodes": 3, "moving_avg": 4.5}

    srv = RpcServer({K.REPORT_EPISODE: report, K.SAMPLE_BATCH: sample, K.HEALTH: health}, role="test").start()
    srv.calls = calls
    yield srv
    srv.stop()


def _record(i):
    return EpisodeRecord(agent_id=0, episode=i, reward=1.0, steps=1, epsilon=0.5, t_start=0.0, t_end=1.0)


class TestRpc:

    def test_health_latency(self, server):
        with RpcClient(server.address) as client:
            client.call(K.HEALTH)
            times = []
            for _ in range(20):
                t0 = time.perf_counter()
                out = client.call(K.HEALTH)
                times.append(time.perf_counter() - t0)
        assert out["role"] == "test" and out["moving_avg"] == 4.5
        assert statistics.median(times) < 0.05

    def test_default_health(self):
        with RpcServer({}, role="bare").start() as srv:
            assert call(srv.address, K.HEALTH)["role"] == "bare"

    def test_out_of_order_completion(self, server):
        with RpcClient(server.address) as client:
            slow = client.submit(K.SAMPLE_BATCH, {"n": 1})
            fast = client.submit(K.SAMPLE_BATCH, {"n": 2})
            assert fast.result(timeout=2.0)["ready"] == 1
            assert not slow.done()
            assert slow.result(timeout=2.0)["ready"] == 1

    def test_hundred_pipelined_requests(self, server):
        with RpcClient(server.address) as client:
            futures = [client.submit(K.REPORT_EPISODE, {"record": _record(i)}) for i in range(100)]
            got = [f.result(timeout=5.0)["episodes"] for f in futures]
        assert got == list(range(100))

    @pytest.mark.parametrize("n, code", [
        (13, ErrorCode.NOT_READY),
        (14, ErrorCode.INVALID_ARGUMENT),
        (15, ErrorCode.HANDLER_ERROR),
    ])
    def test_handler_errors_come_back_coded(self, server, n, code):
        with RpcClient(server.address) as client:
            with pytest.raises(RemoteError) as e:
                client.call(K.SAMPLE_BATCH, {"n": n})
            assert e.value.code == code
            # the connection survives
            assert client.call(K.HEALTH)["role"] == "test"

    def test_not_ready_helper(self, server):
        with RpcClient(server.address) as client:
            with pytest.raises(RemoteError) as e:
                client.call(K.SAMPLE_BATCH, {"n": 13})
        assert is_not_ready(e.value) and is_not_ready(NotReady("x"))

    def test_missing_endpoint(self, server):
        with RpcClient(server.address) as client:
            with pytest.raises(RemoteError) as e:
                client.call(K.STEP_PERIOD)
        assert e.value.code == ErrorCode.UNKNOWN_KIND

    def test_dead_port(self):
        client = RpcClient(("127.0.0.1", _free_port()), timeout=0.5, connect_retries=2)
        with pytest.raises(RpcConnectionError):
            client.connect()

    def test_timeout_not_retried_for_mutating_calls(self, server):
        with RpcClient(server.address, retries=2) as client:
            with pytest.raises(RpcTimeout):
                client.call(K.SAMPLE_BATCH, {"n": 16}, timeout=0.1)

    def test_idempotent_calls_are_retried(self, server):
        server.calls["slow_health"] = True
        with RpcClient(server.address, retries=2) as client:
            with pytest.raises(RpcTimeout):
                client.call(K.HEALTH, timeout=0.1)
        time.sleep(0.1)
        assert server.calls["health"] == 3

    def test_malformed_frames_keep_server_alive(self, server):
        with socket.create_connection(server.address, timeout=5.0) as sock:
            kind, rid, body = _raw_request(sock, struct.pack(">IBI", 5, 99, 41))
            assert kind == K.ERROR_RESPONSE and rid == 41 and body["code"] == ErrorCode.UNKNOWN_KIND
            kind, rid, body = _raw_request(sock, struct.pack(">IBI", 7, 8, 42) + b"\x01\x00")
            assert body["code"] == ErrorCode.SCHEMA_MISMATCH and rid == 42
            # same connection still serves
            kind, rid, body = _raw_request(sock, encode(K.HEALTH, 43))
            assert kind == K.HEALTH and rid == 43
            # a replayed request_id is refused
            kind, rid, body = _raw_request(sock, encode(K.HEALTH, 43))
            assert kind == K.ERROR_RESPONSE and body["code"] == ErrorCode.INVALID_ARGUMENT
            # a bad length ends the connection but not the server
            kind, rid, body = _raw_request(sock, struct.pack(">IBI", 2, 12, 44))
            assert body["code"] == ErrorCode.BAD_LENGTH
            assert sock.recv(1) == b""
        assert call(server.address, K.HEALTH)["episodes"] == 3

    def test_server_stop_fails_pending_calls(self):
        srv = RpcServer({K.SAMPLE_BATCH: lambda b: time.sleep(2.0) or {"ready": 1, "items": []}}).start()
        client = RpcClient(srv.address).connect()
        fut = client.submit(K.SAMPLE_BATCH, {"n": 1})
        time.sleep(0.1)
        srv.stop()
        with pytest.raises(RpcConnectionError):
            fut.result(timeout=5.0)
        client.close()


# =============================================================================
# Role clients
# =============================================================================

class TestRoleClients:

    def test_sim_client(self, corridor):
        world = create_world(corridor, 3, SimConfig(realtime=False), seed=0)
        with RpcServer(SimService(world).handlers(), role="sim").start() as srv, SimClient(srv.address) as sim:
            states, meta = sim.get_states([0, 1, 2], batched=True)
            assert len(states) == 3 and meta["barrier_waits"] == 1
            _, meta = sim.get_states([0, 1, 2], batched=False)
            assert meta["barrier_waits"] == 4
            assert sim.apply_actions([(0, 0), (2, 1)]) == [0.25, -0.25]
            outcomes = sim.step_period()
            assert [o.agent_id for o in outcomes] == [0, 1, 2]
            pose = sim.reset_vehicle(1)
            assert corridor.spawn.x0 <= pose.position[0] <= corridor.spawn.x1
            assert sim.reset_vehicle(1, Pose((3.0, 4.0, 2.0))).position == (3.0, 4.0, 2.0)
            with pytest.raises(RemoteError) as e:
                sim.reset_vehicle(1, Pose((19.0, 1.0, 2.0)))
            assert e.value.code == ErrorCode.INVALID_ARGUMENT
            with pytest.raises(RemoteError):
                sim.get_states([5])
            sim.reset_all()
            assert sim.health()["role"] == "sim"

    def test_apply_actions_is_all_or_nothing(self, corridor):
        world = create_world(corridor, 2, SimConfig(realtime=False), seed=0)
        world.reset_vehicle(1, Pose((17.0, 2.0, 2.0)))
        with RpcServer(SimService(world).handlers()).start() as srv, SimClient(srv.address) as sim:
            sim.step_period()
            with pytest.raises(RemoteError):
                sim.apply_actions([(0, 0), (1, 0)])
        assert world.agents[0].desired_lateral == 0.0

    def test_get_params_client(self):
        trainer = TrainerService(Hyperparams(), network_seed=0)
        with RpcServer(trainer.handlers(), role="trainer").start() as srv:
            assert get_params_client(srv.address, 0) is None
            trainer.step([make_experience(), make_experience(r=-100.0, done=True)])
            blob, version = get_params_client(srv.address, 0)
            assert version == 1 and NetParams.from_blob(blob).equal(trainer.snapshot())
            assert get_params_client(srv.address, 1) is None
            with TrainerClient(srv.address) as client:
                assert client.report_episode(_record(0)) == 1
                assert client.fetch_params(0).version == 1
