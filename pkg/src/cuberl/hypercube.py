"""Uniform hypercube partition of state space and per-cell champion actions.

States are binned on RAW coordinates into a (delta+1)^d grid derived from
dataset bounds; coordinate delta is the upper boundary bin. Each occupied
cell caches a champion: the member row whose (state, action) scores highest
under the pessimistic twin-critic minimum. The regularization target for a
row is the champion's action when it beats the row's own action at the
row's state, otherwise the row's own action (conservative ties).

Cells are keyed by the integer coordinate vector; internally rows map to
dense cell ids so the per-step refresh is pure array work.
"""

from dataclasses import dataclass, field

import numpy as np

from .dataset import StaticDataset


class CellCodeOverflowError(Exception):
    """Scalar cell code would not fit in 128 bits; key by the vector instead."""


@dataclass(frozen=True)
class GridSpec:
    """Partition parameters: per-dimension bounds and integer precision."""

    delta: int
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=np.float64))
        object.__setattr__(self, "maxs", np.asarray(self.maxs, dtype=np.float64))
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ValueError("mins/maxs must be equal-length vectors")
        if not np.all(self.mins <= self.maxs):
            raise ValueError("mins must not exceed maxs")

    @property
    def state_dim(self) -> int:
        return self.mins.shape[0]

    @classmethod
    def from_dataset(cls, dataset: StaticDataset, delta: int) -> "GridSpec":
        return cls(delta=delta, mins=dataset.state_min, maxs=dataset.state_max)


def bin_states(spec: GridSpec, states: np.ndarray) -> np.ndarray:
    """Vectorized bin_state: (n, d) states -> (n, d) integer coordinates."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    span = spec.maxs - spec.mins
    degenerate = span <= 0.0
    safe_span = np.where(degenerate, 1.0, span)
    coords = np.floor(spec.delta * (states - spec.mins) / safe_span)
    coords = np.clip(coords, 0, spec.delta).astype(np.int64)
    coords[:, degenerate] = 0
    return coords


def bin_state(spec: GridSpec, state) -> tuple:
    """Cell key of one state: floor(delta*(s-min)/(max-min)) clamped to [0, delta]."""
    return tuple(bin_states(spec, np.asarray(state, dtype=np.float64).reshape(1, -1))[0])


def encode_cell(spec: GridSpec, key) -> int:
    """Mixed-radix scalar code sum_i coords[i] * (delta+1)^i; injective."""
    radix = spec.delta + 1
    if radix ** spec.state_dim > 1 << 127:
        raise CellCodeOverflowError(
            f"(delta+1)^state_dim = {radix}^{spec.state_dim} exceeds 128 bits; "
            "use the coordinate vector as the key")
    code = 0
    for i, c in enumerate(key):
        c = int(c)
        if not 0 <= c <= spec.delta:
            raise ValueError(f"coordinate {c} outside [0, {spec.delta}]")
        code += c * radix ** i
    return code


@dataclass
class CellTable:
    """Partition of dataset rows: coordinate-tuple keys over dense cell ids."""

    spec: GridSpec
    cells: dict         # key tuple -> ascending row indices (np.int64)
    cell_ids: np.ndarray   # row -> dense cell id
    keys_by_id: list       # cell id -> key tuple
    id_of: dict            # key tuple -> cell id

    @property
    def n_rows(self) -> int:
        return self.cell_ids.shape[0]

    @property
    def n_cells(self) -> int:
        return len(self.keys_by_id)

    def key_of(self, row: int) -> tuple:
        return self.keys_by_id[self.cell_ids[row]]

    def members(self, key: tuple) -> np.ndarray:
        return self.cells[key]

    def occupied(self):
        return self.cells.keys()


def build_cell_table(spec: GridSpec, dataset: StaticDataset) -> CellTable:
    """Place every dataset row in the cell of its (raw) state."""
    coords = bin_states(spec, dataset.states64)
    unique, cell_ids = np.unique(coords, axis=0, return_inverse=True)
    cell_ids = cell_ids.astype(np.int64).ravel()
    keys_by_id = [tuple(c) for c in unique]
    order = np.argsort(cell_ids, kind="stable")
    starts = np.searchsorted(cell_ids[order], np.arange(len(keys_by_id)))
    bounds = np.append(starts, cell_ids.shape[0])
    cells = {keys_by_id[i]: np.sort(order[bounds[i]:bounds[i + 1]])
             for i in range(len(keys_by_id))}
    return CellTable(spec=spec, cells=cells, cell_ids=cell_ids,
                     keys_by_id=keys_by_id, id_of={k: i for i, k in enumerate(keys_by_id)})


@dataclass
class ChampionEntry:
    row: int
    q: float
    age: int  # refresh rounds since this cell was last touched


@dataclass
class ChampionCache:
    """Per-cell best-known row under the pessimistic critic minimum.

    Single-writer: only the training loop mutates it. Exactly the occupied
    cells have entries; access them mapping-style via cache[key]. The
    round counter advances once per training step (tick) and feeds ages.
    """

    champ_rows: np.ndarray   # (n_cells,) int64
    champ_qs: np.ndarray     # (n_cells,) f64
    stamps: np.ndarray       # (n_cells,) int64 round at last refresh
    id_of: dict              # key tuple -> cell id (shared with the table)
    keys_by_id: list
    round_counter: int = 0

    def tick(self) -> None:
        self.round_counter += 1

    def __getitem__(self, key: tuple) -> ChampionEntry:
        i = self.id_of[key]
        return ChampionEntry(row=int(self.champ_rows[i]), q=float(self.champ_qs[i]),
                             age=int(self.round_counter - self.stamps[i]))

    def __contains__(self, key: tuple) -> bool:
        return key in self.id_of

    def __len__(self) -> int:
        return self.champ_rows.shape[0]

    def keys(self):
        return self.id_of.keys()

    def as_dict(self) -> dict:
        return {key: self[key] for key in self.keys()}


def init_champion_cache(table: CellTable, dataset: StaticDataset, q_min) -> ChampionCache:
    """Champion per occupied cell: argmax of q_min over members, lowest row on ties.

    q_min maps ((n, state_dim), (n, action_dim)) -> (n,) and must be the
    twin-critic minimum.
    """
    q_all = np.asarray(q_min(dataset.states64, dataset.actions64), dtype=np.float64)
    n_cells = table.n_cells
    champ_rows = np.empty(n_cells, dtype=np.int64)
    champ_qs = np.empty(n_cells, dtype=np.float64)
    for i, key in enumerate(table.keys_by_id):
        members = table.cells[key]
        best = members[int(np.argmax(q_all[members]))]  # first max: lowest row
        champ_rows[i] = best
        champ_qs[i] = q_all[best]
    return ChampionCache(champ_rows=champ_rows, champ_qs=champ_qs,
                         stamps=np.zeros(n_cells, dtype=np.int64),
                         id_of=table.id_of, keys_by_id=table.keys_by_id)


def refresh_champions(cache: ChampionCache, table: CellTable, dataset: StaticDataset,
                      q_min, rows, q_rows: np.ndarray | None = None) -> int:
    """Re-score incumbents of touched cells, then swap in strictly better rows.

    rows come from the current minibatch; duplicates collapse and rows are
    considered in ascending order, so equal scores keep the lowest row.
    q_rows may carry precomputed q_min values for the deduplicated rows
    (same order as np.unique(rows)). Returns the number of champion swaps.
    """
    rows = np.unique(np.asarray(rows, dtype=np.int64))
    if rows.size == 0:
        return 0
    if q_rows is None:
        q_rows = np.asarray(q_min(dataset.states64[rows], dataset.actions64[rows]),
                            dtype=np.float64)
    cell_ids = table.cell_ids[rows]
    touched, inverse = np.unique(cell_ids, return_inverse=True)
    inverse = inverse.ravel()

    incumbents = cache.champ_rows[touched]
    q_inc = np.asarray(q_min(dataset.states64[incumbents], dataset.actions64[incumbents]),
                       dtype=np.float64)

    # Per touched cell: best sampled row (ties -> lowest row, rows ascending).
    order = np.argsort(inverse, kind="stable")
    grouped_q = q_rows[order]
    grouped_rows = rows[order]
    starts = np.searchsorted(inverse[order], np.arange(touched.shape[0]))
    best_q = np.maximum.reduceat(grouped_q, starts)
    is_best = grouped_q == best_q[inverse[order]]
    positions = np.where(is_best, np.arange(grouped_q.shape[0]), grouped_q.shape[0])
    best_pos = np.minimum.reduceat(positions, starts)
    best_rows = grouped_rows[best_pos]

    swap = best_q > q_inc
    new_rows = np.where(swap, best_rows, incumbents)
    swaps = int(np.count_nonzero(new_rows != incumbents))
    cache.champ_rows[touched] = new_rows
    cache.champ_qs[touched] = np.where(swap, best_q, q_inc)
    cache.stamps[touched] = cache.round_counter
    return swaps


def regularization_targets(cache: ChampionCache, table: CellTable, dataset: StaticDataset,
                           q_min, rows, q_own: np.ndarray | None = None) -> np.ndarray:
    """Batch cloning targets: champion action where strictly better at the
    row's state, else the row's own action.

    q_own may carry precomputed q_min(state_row, own_action) values.
    """
    rows = np.asarray(rows, dtype=np.int64)
    states = dataset.states64[rows]
    own_actions = dataset.actions64[rows]
    champ_rows = cache.champ_rows[table.cell_ids[rows]]
    same = champ_rows == rows
    if same.all():
        return own_actions
    champ_actions = dataset.actions64[champ_rows]
    if q_own is None:
        q_own = np.asarray(q_min(states, own_actions), dtype=np.float64)
    q_champ = np.asarray(q_min(states, champ_actions), dtype=np.float64)
    better = (q_champ > q_own) & ~same
    return np.where(better[:, None], champ_actions, own_actions)


def regularization_target(cache: ChampionCache, table: CellTable, dataset: StaticDataset,
                          q_min, row: int) -> np.ndarray:
    """Cloning target for one row (conservative ties keep the own action)."""
    return regularization_targets(cache, table, dataset, q_min, [row])[0]


def dump_cells_csv(table: CellTable, cache: ChampionCache, path) -> None:
    """Diagnostic dump: cell_code, occupancy, champion_row, champion_q."""
    lines = ["cell_code,occupancy,champion_row,champion_q"]
    for key in sorted(table.cells):
        code = encode_cell(table.spec, key)
        entry = cache[key]
        lines.append(f"{code},{len(table.cells[key])},{entry.row},{entry.q!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
