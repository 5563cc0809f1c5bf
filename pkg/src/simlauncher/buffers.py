"""Replay and demonstration buffers, stratified batching, and the SLDM file format.

Transitions are stored as float32 arrays-of-fields in fixed-capacity FIFO
rings; training batches are assembled from up to three sources (replay,
sim demos, real demos) with exact per-source counts and upcast to float64
for the learners. Demo buffers round-trip bit-exactly through the binary
"SLDM" format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

Array = np.ndarray

REPLAY_CAPACITY = 200_000
DEMO_CAPACITY = 50_000

SLDM_MAGIC = b"SLDM"
SLDM_VERSION = 1


class SourceTag(IntEnum):
    REPLAY = 0
    SIM_DEMO = 1
    REAL_DEMO = 2


class FormatError(Exception):
    """Raised for malformed SLDM/SLCK files."""


@dataclass(frozen=True)
class Transition:
    """One environment interaction; reward is binary by contract."""

    obs: Array
    action: Array
    reward: int
    next_obs: Array
    terminated: bool
    truncated: bool
    source: SourceTag

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float32)
        nxt = np.asarray(self.next_obs, dtype=np.float32)
        act = np.asarray(self.action, dtype=np.float32)
        if obs.shape != nxt.shape:
            raise ValueError("obs and next_obs must have the same length")
        if self.reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "next_obs", nxt)
        object.__setattr__(self, "action", act)
        object.__setattr__(self, "source", SourceTag(self.source))


@dataclass(frozen=True)
class Trajectory:
    transitions: tuple[Transition, ...]
    success: bool
    episode_return: int

    @classmethod
    def from_transitions(cls, transitions) -> "Trajectory":
        ts = tuple(transitions)
        if not ts:
            raise ValueError("empty trajectory")
        success = bool(ts[-1].reward == 1 and ts[-1].terminated)
        return cls(ts, success, int(sum(t.reward for t in ts)))

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True)
class Batch:
    """Arrays-of-fields minibatch with per-source counts (replay, sim, real)."""

    obs: Array
    action: Array
    reward: Array
    next_obs: Array
    terminated: Array
    truncated: Array
    source: Array
    counts: tuple[int, int, int]

    def __len__(self) -> int:
        return self.obs.shape[0]


class BufferStore:
    """Fixed-capacity FIFO transition ring with array-of-fields storage."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.size = 0
        self.insert_count = 0
        self._obs = None
        self._action = None
        self._reward = None
        self._next_obs = None
        self._terminated = None
        self._truncated = None
        self._source = None

    @property
    def obs_dim(self) -> int | None:
        return None if self._obs is None else self._obs.shape[1]

    @property
    def act_dim(self) -> int | None:
        return None if self._action is None else self._action.shape[1]

    def _allocate(self, obs_dim: int, act_dim: int) -> None:
        c = self.capacity
        self._obs = np.zeros((c, obs_dim), dtype=np.float32)
        self._action = np.zeros((c, act_dim), dtype=np.float32)
        self._reward = np.zeros(c, dtype=np.uint8)
        self._next_obs = np.zeros((c, obs_dim), dtype=np.float32)
        self._terminated = np.zeros(c, dtype=np.uint8)
        self._truncated = np.zeros(c, dtype=np.uint8)
        self._source = np.zeros(c, dtype=np.uint8)

    def push(self, t: Transition) -> None:
        if self._obs is None:
            self._allocate(t.obs.size, t.action.size)
        if t.obs.size != self.obs_dim or t.action.size != self.act_dim:
            raise ValueError(
                f"transition dims ({t.obs.size}, {t.action.size}) != buffer dims "
                f"({self.obs_dim}, {self.act_dim})"
            )
        i = self.insert_count % self.capacity
        self._obs[i] = t.obs
        self._action[i] = t.action
        self._reward[i] = t.reward
        self._next_obs[i] = t.next_obs
        self._terminated[i] = t.terminated
        self._truncated[i] = t.truncated
        self._source[i] = int(t.source)
        self.insert_count += 1
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for t in transitions:
            self.push(t)

    def __len__(self) -> int:
        return self.size

    def _order(self) -> Array:
        # indices oldest-first
        if self.size < self.capacity:
            return np.arange(self.size)
        head = self.insert_count % self.capacity
        return np.concatenate([np.arange(head, self.capacity), np.arange(head)])

    def transitions(self) -> list[Transition]:
        out = []
        for i in self._order():
            out.append(
                Transition(
                    obs=self._obs[i].copy(),
                    action=self._action[i].copy(),
                    reward=int(self._reward[i]),
                    next_obs=self._next_obs[i].copy(),
                    terminated=bool(self._terminated[i]),
                    truncated=bool(self._truncated[i]),
                    source=SourceTag(int(self._source[i])),
                )
            )
        return out

    def copy(self) -> "BufferStore":
        dup = BufferStore(self.capacity)
        if self._obs is not None:
            dup._allocate(self.obs_dim, self.act_dim)
            for name in ("_obs", "_action", "_reward", "_next_obs", "_terminated", "_truncated", "_source"):
                getattr(dup, name)[:] = getattr(self, name)
        dup.size = self.size
        dup.insert_count = self.insert_count
        return dup

    def gather(self, idx: Array, counts: tuple[int, int, int]) -> Batch:
        """Assemble a float64 Batch from storage rows."""
        return Batch(
            obs=self._obs[idx].astype(np.float64),
            action=self._action[idx].astype(np.float64),
            reward=self._reward[idx].astype(np.float64),
            next_obs=self._next_obs[idx].astype(np.float64),
            terminated=self._terminated[idx].astype(bool),
            truncated=self._truncated[idx].astype(bool),
            source=self._source[idx].copy(),
            counts=counts,
        )

    def sample_uniform(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform with replacement; the whole batch counts as its own stratum."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        counts = [0, 0, 0]
        tag = int(self._source[idx[0]]) if n > 0 else 0
        counts[tag] = n
        return self.gather(idx, tuple(counts))


def append_success_trajectory(d_real: BufferStore, traj: Trajectory) -> bool:
    """Append all transitions iff the trajectory succeeded; retags as real demos."""
    if not traj.success:
        return False
    for t in traj.transitions:
        d_real.push(replace(t, source=SourceTag.REAL_DEMO))
    return True


def stratified_counts(
    sizes: tuple[int, int, int], n: int, fractions: tuple[float, float, float]
) -> tuple[int, int, int]:
    """Per-source counts: floor of n*f with empty-source mass renormalized.

    The rounding remainder goes to the replay stratum when it is active,
    otherwise to the first active stratum.
    """
    if n < 4:
        raise ValueError("batch size must be >= 4")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size != 3 or np.any(fr < 0.0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three nonnegative values summing to 1")
    active = [i for i in range(3) if sizes[i] > 0 and fr[i] > 0.0]
    if not active:
        raise ValueError("no nonempty source with positive fraction")
    norm = fr[active].sum()
    counts = [0, 0, 0]
    for i in active:
        counts[i] = int(n * fr[i] / norm)
    spill = 0 if 0 in active else active[0]
    counts[spill] += n - sum(counts)
    return tuple(counts)


def sample_stratified(
    replay: BufferStore,
    d_sim: BufferStore,
    d_real: BufferStore,
    n: int,
    fractions: tuple[float, float, float],
    rng: np.random.Generator,
) -> Batch:
    """Compose a batch of n transitions from the three sources.

    Sampling within each stratum is uniform with replacement; batches
    record their realized per-source counts.
    """
    sources = (replay, d_sim, d_real)
    counts = stratified_counts(tuple(len(s) for s in sources), n, fractions)
    fields = {"obs": [], "action": [], "reward": [], "next_obs": [],
              "terminated": [], "truncated": [], "source": []}
    for src, c in zip(sources, counts):
        if c == 0:
            continue
        idx = rng.integers(0, src.size, size=c)
        fields["obs"].append(src._obs[idx])
        fields["action"].append(src._action[idx])
        fields["reward"].append(src._reward[idx])
        fields["next_obs"].append(src._next_obs[idx])
        fields["terminated"].append(src._terminated[idx])
        fields["truncated"].append(src._truncated[idx])
        fields["source"].append(src._source[idx])
    return Batch(
        obs=np.concatenate(fields["obs"]).astype(np.float64),
        action=np.concatenate(fields["action"]).astype(np.float64),
        reward=np.concatenate(fields["reward"]).astype(np.float64),
        next_obs=np.concatenate(fields["next_obs"]).astype(np.float64),
        terminated=np.concatenate(fields["terminated"]).astype(bool),
        truncated=np.concatenate(fields["truncated"]).astype(bool),
        source=np.concatenate(fields["source"]),
        counts=counts,
    )


# one stored transition: f32 obs, f32 action, u8 reward, f32 next_obs,
# u8 terminated, u8 truncated, u8 source — all little-endian, packed
def _record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("obs", "<f4", (obs_dim,)),
            ("action", "<f4", (act_dim,)),
            ("reward", "u1"),
            ("next_obs", "<f4", (obs_dim,)),
            ("terminated", "u1"),
            ("truncated", "u1"),
            ("source", "u1"),
        ]
    )


def save_demos(buffer: BufferStore, path) -> None:
    """Write the buffer (oldest first) in SLDM v1 format."""
    count = len(buffer)
    obs_dim = buffer.obs_dim or 0
    act_dim = buffer.act_dim or 0
    header = SLDM_MAGIC + struct.pack("<IIII", SLDM_VERSION, count, obs_dim, act_dim)
    with open(path, "wb") as fh:
        fh.write(header)
        if count:
            rec = np.zeros(count, dtype=_record_dtype(obs_dim, act_dim))
            order = buffer._order()
            rec["obs"] = buffer._obs[order]
            rec["action"] = buffer._action[order]
            rec["reward"] = buffer._reward[order]
            rec["next_obs"] = buffer._next_obs[order]
            rec["terminated"] = buffer._terminated[order]
            rec["truncated"] = buffer._truncated[order]
            rec["source"] = buffer._source[order]
            fh.write(rec.tobytes())


def load_demos(path, capacity: int | None = None) -> BufferStore:
    """Read an SLDM file; validates magic, version, and exact length."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError("truncated SLDM header")
    if raw[:4] != SLDM_MAGIC:
        raise FormatError("bad magic bytes")
    version, count, obs_dim, act_dim = struct.unpack("<IIII", raw[4:20])
    if version != SLDM_VERSION:
        raise FormatError(f"unsupported SLDM version {version}")
    buf = BufferStore(capacity or max(DEMO_CAPACITY, count))
    if count == 0:
        if len(raw) != 20:
            raise FormatError("trailing bytes after empty demo file")
        return buf
    dtype = _record_dtype(obs_dim, act_dim)
    if len(raw) != 20 + count * dtype.itemsize:
        raise FormatError("file length does not match record count")
    rec = np.frombuffer(raw[20:], dtype=dtype)
    if np.any(rec["reward"] > 1) or np.any(rec["source"] > 2):
        raise FormatError("field values out of range")
    buf._allocate(obs_dim, act_dim)
    m = min(count, buf.capacity)
    sl = slice(count - m, count)  # keep the newest if capacity is exceeded
    buf._obs[:m] = rec["obs"][sl]
    buf._action[:m] = rec["action"][sl]
    buf._reward[:m] = rec["reward"][sl]
    buf._next_obs[:m] = rec["next_obs"][sl]
    buf._terminated[:m] = rec["terminated"][sl]
    buf._truncated[:m] = rec["truncated"][sl]
    buf._source[:m] = rec["source"][sl]
    buf.size = m
    buf.insert_count = m
    return buf


def split_trajectories(buffer: BufferStore) -> list[list[Transition]]:
    """Split the stored stream into episodes at terminal/truncation flags."""
    out, cur = [], []
    for t in buffer.transitions():
        cur.append(t)
        if t.terminated or t.truncated:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def first_trajectories(buffer: BufferStore, n: int, capacity: int | None = None) -> BufferStore:
    """New buffer holding the first n stored episodes."""
    trajs = split_trajectories(buffer)
    if len(trajs) < n:
        raise ValueError(f"buffer holds {len(trajs)} trajectories, need {n}")
    out = BufferStore(capacity or buffer.capacity)
    for traj in trajs[:n]:
        out.extend(traj)
    return out
