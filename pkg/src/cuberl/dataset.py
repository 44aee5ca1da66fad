"""Static offline dataset: in-memory layout, ORLD file format, statistics.

The on-disk ORLD format is bit-exact and little-endian:

    magic "ORLD" | u32 version=1 | u32 state_dim | u32 action_dim
    | u64 n_transitions | records...

Each record is state_dim f32, action_dim f32, f32 reward, state_dim f32
next_state, u8 done. No padding, no footer. Bounds and normalization
statistics are always recomputed on load, never trusted from disk.
"""

from dataclasses import dataclass, field
import struct

import numpy as np

ORLD_MAGIC = b"ORLD"
ORLD_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")

ACTION_SLACK = 1e-6


class OrldError(Exception):
    """Base for dataset file/content violations."""


class BadMagicError(OrldError):
    pass


class UnsupportedVersionError(OrldError):
    pass


class TruncatedPayloadError(OrldError):
    pass


class NonFiniteValueError(OrldError):
    pass


class ActionBoundsError(OrldError):
    pass


@dataclass
class Transition:
    """One (s, a, r, s', done) row, actions componentwise in [-1, 1]."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class StaticDataset:
    """Immutable transition table with recomputed bounds and statistics.

    Payload arrays are float32 (the on-disk precision); statistics are
    float64. Bounds cover both state and next_state columns so that any
    vector the agent can be binned from lies inside [state_min, state_max].
    """

    states: np.ndarray        # (n, state_dim) f32
    actions: np.ndarray       # (n, action_dim) f32
    rewards: np.ndarray       # (n,) f32
    next_states: np.ndarray   # (n, state_dim) f32
    dones: np.ndarray         # (n,) bool
    state_min: np.ndarray = field(init=False)
    state_max: np.ndarray = field(init=False)
    state_mean: np.ndarray = field(init=False)
    state_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
        self.next_states = np.ascontiguousarray(self.next_states, dtype=np.float32)
        self.dones = np.ascontiguousarray(self.dones, dtype=bool)
        _validate_payload(self.states, self.actions, self.rewards, self.next_states)
        self.state_min, self.state_max = _bounds(self.states, self.next_states)
        self.state_mean = self.states.astype(np.float64).mean(axis=0)
        self.state_std = self.states.astype(np.float64).std(axis=0)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            state=self.states[i].copy(),
            action=self.actions[i].copy(),
            reward=float(self.rewards[i]),
            next_state=self.next_states[i].copy(),
            done=bool(self.dones[i]),
        )

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    # float64 views for numerics, cached once (the dataset is immutable).
    @property
    def states64(self) -> np.ndarray:
        if not hasattr(self, "_states64"):
            self._states64 = self.states.astype(np.float64)
        return self._states64

    @property
    def actions64(self) -> np.ndarray:
        if not hasattr(self, "_actions64"):
            self._actions64 = self.actions.astype(np.float64)
        return self._actions64

    def __eq__(self, other) -> bool:
        if not isinstance(other, StaticDataset):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
            and np.array_equal(self.dones, other.dones)
        )

    @classmethod
    def from_transitions(cls, transitions) -> "StaticDataset":
        if not transitions:
            raise ValueError("dataset must contain at least one transition")
        return cls(
            states=np.stack([t.state for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            next_states=np.stack([t.next_state for t in transitions]),
            dones=np.array([t.done for t in transitions]),
        )


def _validate_payload(states, actions, rewards, next_states):
    if states.shape[0] == 0:
        raise ValueError("dataset must contain at least one transition")
    for name, arr in (("states", states), ("actions", actions),
                      ("rewards", rewards), ("next_states", next_states)):
        if not np.isfinite(arr).all():
            raise NonFiniteValueError(f"non-finite values in {name}")
    worst = float(np.abs(actions.astype(np.float64)).max())
    if worst > 1.0 + ACTION_SLACK:
        raise ActionBoundsError(f"action magnitude {worst} exceeds 1 beyond {ACTION_SLACK} slack")


def _bounds(states, next_states):
    both = np.concatenate([states, next_states], axis=0).astype(np.float64)
    return both.min(axis=0), both.max(axis=0)


def compute_state_bounds(dataset: StaticDataset):
    """Exact componentwise extrema over all state and next_state vectors."""
    return _bounds(dataset.states, dataset.next_states)


def save_dataset(dataset: StaticDataset, path) -> None:
    """Write the bit-exact ORLD file; load_dataset inverts it."""
    n = len(dataset)
    sd, ad = dataset.state_dim, dataset.action_dim
    header = _HEADER.pack(ORLD_MAGIC, ORLD_VERSION, sd, ad, n)
    body = np.empty((n, 2 * sd + ad + 1), dtype="<f4")
    body[:, :sd] = dataset.states
    body[:, sd:sd + ad] = dataset.actions
    body[:, sd + ad] = dataset.rewards
    body[:, sd + ad + 1:] = dataset.next_states
    # Packed record: f32 body then one done byte, no padding.
    record = np.dtype([("body", "<f4", (body.shape[1],)), ("done", "u1")])
    assert record.itemsize == 4 * body.shape[1] + 1
    rows = np.empty(n, dtype=record)
    rows["body"] = body
    rows["done"] = dataset.dones.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rows.tobytes())


def load_dataset(path) -> StaticDataset:
    """Read an ORLD file, recomputing bounds and statistics from content."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"file shorter than {_HEADER.size}-byte header")
    magic, version, state_dim, action_dim, n = _HEADER.unpack_from(raw, 0)
    if magic != ORLD_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != ORLD_VERSION:
        raise UnsupportedVersionError(f"version {version} unsupported (expected {ORLD_VERSION})")
    if n == 0:
        raise TruncatedPayloadError("file declares zero transitions")
    floats_per_record = 2 * state_dim + action_dim + 1
    record_bytes = 4 * floats_per_record + 1
    expected = _HEADER.size + n * record_bytes
    if len(raw) != expected:
        raise TruncatedPayloadError(f"expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, record_bytes)
    body = records[:, :-1].copy().view("<f4").reshape(n, floats_per_record)
    dones = records[:, -1]
    if not np.isin(dones, (0, 1)).all():
        raise TruncatedPayloadError("done flags must be 0 or 1")
    sd, ad = state_dim, action_dim
    try:
        return StaticDataset(
            states=body[:, :sd],
            actions=body[:, sd:sd + ad],
            rewards=body[:, sd + ad],
            next_states=body[:, sd + ad + 1:],
            dones=dones.astype(bool),
        )
    except ValueError as exc:
        raise TruncatedPayloadError(str(exc)) from exc


def orld_file_size(state_dim: int, action_dim: int, n: int) -> int:
    """Exact byte size of an ORLD file with the given shape."""
    return _HEADER.size + n * (4 * (2 * state_dim + action_dim + 1) + 1)


@dataclass
class NormalizedStates:
    """Normalized view of a dataset's state columns for network input.

    Binning always uses raw states; this transform only conditions the
    networks. Affine and invertible given (mean, std, eps).
    """

    states: np.ndarray       # (n, state_dim) f64
    next_states: np.ndarray  # (n, state_dim) f64
    mean: np.ndarray
    std: np.ndarray
    eps: float

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Normalize raw state vectors (used on fresh env observations)."""
        return (np.asarray(raw, dtype=np.float64) - self.mean) / (self.std + self.eps)

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=np.float64) * (self.std + self.eps) + self.mean

    @classmethod
    def from_stats(cls, mean, std, eps) -> "NormalizedStates":
        """Transform-only view (no dataset columns), e.g. from a checkpoint."""
        return cls(states=np.empty((0, len(mean))), next_states=np.empty((0, len(mean))),
                   mean=np.asarray(mean, dtype=np.float64),
                   std=np.asarray(std, dtype=np.float64), eps=float(eps))


def normalize_states(dataset: StaticDataset, eps: float = 1e-3) -> NormalizedStates:
    """Map state columns to (x - mean) / (std + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean, std = dataset.state_mean, dataset.state_std
    view = NormalizedStates(
        states=(dataset.states.astype(np.float64) - mean) / (std + eps),
        next_states=(dataset.next_states.astype(np.float64) - mean) / (std + eps),
        mean=mean.copy(),
        std=std.copy(),
        eps=float(eps),
    )
    return view
