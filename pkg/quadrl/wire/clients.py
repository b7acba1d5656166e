from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from quadrl.domain.errors import ErrorCode, NotReady, RemoteError
from quadrl.domain.models import EpisodeRecord, Experience, Pose, StackedState, StepOutcome, TerminalKind
from quadrl.nn.params import NetParams
from quadrl.replay.buffer import ReplayStats
from quadrl.wire.protocol import MessageKind as K
from quadrl.wire.rpc import Address, RpcClient

_NO_POSE = Pose(position=(0.0, 0.0, 0.0), yaw=0.0)


class SimClient(RpcClient):
    def get_states(self, agent_ids: Sequence[int], batched: bool = True) -> Tuple[List[StackedState], Dict[str, int]]:
        kind = K.GET_BATCH_STATES if batched else K.GET_STATES_NONBATCHED
        out = self.call(kind, {"agent_ids": [int(i) for i in agent_ids]})
        return out["states"], {"tick": out["tick"], "barrier_waits": out["barrier_waits"]}

    def get_states_batched(self, agent_ids: Sequence[int]) -> List[StackedState]:
        return self.get_states(agent_ids, batched=True)[0]

    def get_states_nonbatched(self, agent_ids: Sequence[int]) -> List[StackedState]:
        return self.get_states(agent_ids, batched=False)[0]

    def apply_actions(self, actions: Iterable[Tuple[int, int]]) -> List[float]:
        body = {"actions": [{"agent_id": int(i), "action": int(a)} for i, a in actions]}
        return self.call(K.APPLY_ACTIONS, body)["desired_lateral"]

    def step_period(self) -> List[StepOutcome]:
        out = self.call(K.STEP_PERIOD)
        return [StepOutcome(o["agent_id"], float(o["reward"]), TerminalKind(o["terminal"])) for o in out["outcomes"]]

    def reset_vehicle(self, agent_id: int, pose: Optional[Pose] = None) -> Pose:
        """pose=None respawns at a random spawn sample drawn by the simulator."""
        body = {"agent_id": int(agent_id), "random_spawn": int(pose is None), "pose": pose or _NO_POSE}
        return self.call(K.RESET_VEHICLE, body)["pose"]

    def reset_all(self) -> None:
        self.call(K.RESET_ALL)

    def health(self) -> Dict[str, Any]:
        return self.call(K.HEALTH)


class ReplayClient(RpcClient):
    def push(self, items: Sequence[Experience]) -> Tuple[int, int, List[Tuple[int, str]]]:
        """Returns (accepted, a_T after the push, rejected [(index, reason)])."""
        out = self.call(K.PUSH_EXPERIENCES, {"items": list(items)})
        return out["accepted"], out["a_t"], [(r["index"], r["reason"]) for r in out["rejected"]]

    def sample(self, n: int) -> List[Experience]:
        out = self.call(K.SAMPLE_BATCH, {"n": int(n)})
        if not out["ready"]:
            raise NotReady(f"replay not ready for a batch of {n}")
        return out["items"]

    def stats(self) -> ReplayStats:
        out = self.call(K.REPLAY_STATS)
        return ReplayStats(len=out["len"], capacity=out["capacity"], a_t=out["a_t"], insert_count=out["insert_count"])

    def health(self) -> Dict[str, Any]:
        return self.call(K.HEALTH)


class TrainerClient(RpcClient):
    def get_params(self, have_version: int) -> Optional[Tuple[bytes, int]]:
        """(blob, version) when the trainer is ahead of have_version, else None."""
        out = self.call(K.GET_PARAMS, {"have_version": int(have_version)})
        if out["up_to_date"]:
            return None
        return out["blob"], out["version"]

    def fetch_params(self, have_version: int) -> Optional[NetParams]:
        got = self.get_params(have_version)
        return None if got is None else NetParams.from_blob(got[0])

    def report_episode(self, record: EpisodeRecord) -> int:
        return self.call(K.REPORT_EPISODE, {"record": record})["episodes"]

    def health(self) -> Dict[str, Any]:
        return self.call(K.HEALTH)


def get_params_client(address: Address, have_version: int, timeout: float = 5.0) -> Optional[Tuple[bytes, int]]:
    """One-off GetParams: (blob, version) if the trainer holds a newer version, None if up to date."""
    with TrainerClient(address, timeout=timeout) as client:
        return client.get_params(have_version)


def is_not_ready(err: Exception) -> bool:
    return isinstance(err, NotReady) or (isinstance(err, RemoteError) and err.code == ErrorCode.NOT_READY)
