"""Exactly-solvable verification of the non-degradation guarantee.

Small tabular MDPs embedded in Euclidean space supply ground-truth
Q-functions via value iteration. The in-cell best-action selection is then
checked directly: under an exact Q it can never lower Q(s, .), and under a
perturbed Q there is a finite grid precision beyond which no dataset row
degrades. Cell diameters and empirical Lipschitz constants quantify the
trade-off driving that threshold.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .dataset import StaticDataset
from .hypercube import GridSpec, CellTable, build_cell_table


class ValueIterationError(Exception):
    pass


class StateNotOnGridError(Exception):
    pass


@dataclass
class TabularMdp:
    """Finite MDP whose states/actions carry coordinates in R^d / [-1,1]^m."""

    state_coords: np.ndarray    # (S, d)
    action_vectors: np.ndarray  # (A, m), componentwise in [-1, 1]
    transitions: np.ndarray     # (S, A, S), rows sum to 1
    rewards: np.ndarray         # (S, A)
    gamma: float

    def __post_init__(self):
        self.state_coords = np.asarray(self.state_coords, dtype=np.float64)
        self.action_vectors = np.asarray(self.action_vectors, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if not np.isfinite(self.rewards).all():
            raise ValueError("rewards must be finite")
        if np.abs(self.action_vectors).max() > 1.0:
            raise ValueError("action vectors must lie in [-1, 1]")

    @property
    def n_states(self) -> int:
        return self.state_coords.shape[0]

    @property
    def n_actions(self) -> int:
        return self.action_vectors.shape[0]

    def state_index(self, coords: np.ndarray) -> int:
        key = np.asarray(coords, dtype=np.float64).tobytes()
        idx = self._state_lookup().get(key)
        if idx is None:
            raise StateNotOnGridError(f"state {coords} is not an MDP grid point")
        return idx

    def action_index(self, vector: np.ndarray) -> int:
        key = np.asarray(vector, dtype=np.float64).tobytes()
        idx = self._action_lookup().get(key)
        if idx is None:
            raise StateNotOnGridError(f"action {vector} is not an MDP action")
        return idx

    def _state_lookup(self):
        if not hasattr(self, "_state_map"):
            self._state_map = {self.state_coords[i].tobytes(): i for i in range(self.n_states)}
        return self._state_map

    def _action_lookup(self):
        if not hasattr(self, "_action_map"):
            self._action_map = {self.action_vectors[i].tobytes(): i
                                for i in range(self.n_actions)}
        return self._action_map


def random_mdp(n_states: int, n_actions: int, state_dim: int, gamma: float,
               seed: int) -> TabularMdp:
    """Random dense MDP with states at lattice cell centers in [0, 1]^d."""
    rng = rng_mod.stream(seed, rng_mod.MDP_BUILD)
    side = int(np.ceil(n_states ** (1.0 / state_dim)))
    lattice = np.stack(np.meshgrid(*[np.arange(side)] * state_dim, indexing="ij"),
                       axis=-1).reshape(-1, state_dim)
    picks = rng.choice(lattice.shape[0], size=n_states, replace=False)
    coords = (lattice[np.sort(picks)] + 0.5) / side
    actions = rng.uniform(-1.0, 1.0, size=(n_actions, state_dim))
    raw = rng.exponential(1.0, size=(n_states, n_actions, n_states))
    transitions = raw / raw.sum(axis=2, keepdims=True)
    rewards = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(state_coords=coords, action_vectors=actions,
                      transitions=transitions, rewards=rewards, gamma=gamma)


def solve_exact_q(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 1_000_000) -> np.ndarray:
    """Q-value iteration to sup-norm residual < tol; returns the (S, A) table."""
    if not mdp.gamma < 1.0:
        raise ValueError("value iteration requires gamma < 1")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        v = q.max(axis=1)
        q_next = mdp.rewards + mdp.gamma * mdp.transitions @ v
        residual = np.abs(q_next - q).max()
        q = q_next
        if residual < tol:
            return q
    raise ValueIterationError(
        f"no convergence within {max_iters} iterations (residual {residual})")


def bellman_residual(mdp: TabularMdp, q: np.ndarray) -> float:
    v = q.max(axis=1)
    return float(np.abs(mdp.rewards + mdp.gamma * mdp.transitions @ v - q).max())


def dataset_from_mdp(mdp: TabularMdp, seed: int, n_rows: int | None = None) -> StaticDataset:
    """One transition per distinct MDP state, behavior action uniform.

    Distinct states matter: with duplicate states per cell, selection among
    same-state actions is noise-limited at every precision and the
    approximate-Q threshold cannot exist.
    """
    rng = rng_mod.stream(seed, rng_mod.MDP_BUILD)
    states = np.arange(mdp.n_states)
    if n_rows is not None and n_rows < mdp.n_states:
        states = np.sort(rng.choice(mdp.n_states, size=n_rows, replace=False))
    action_idx = rng.integers(0, mdp.n_actions, size=states.shape[0])
    next_idx = np.array([
        rng.choice(mdp.n_states, p=mdp.transitions[s, a])
        for s, a in zip(states, action_idx)
    ])
    return StaticDataset(
        states=mdp.state_coords[states],
        actions=mdp.action_vectors[action_idx],
        rewards=mdp.rewards[states, action_idx],
        next_states=mdp.state_coords[next_idx],
        dones=np.zeros(states.shape[0], dtype=bool),
    )


def perturb_q(q: np.ndarray, magnitude: float, seed: int) -> np.ndarray:
    """Additive i.i.d. uniform noise in [-magnitude, magnitude]."""
    rng = rng_mod.stream(seed, rng_mod.Q_NOISE)
    return q + rng.uniform(-magnitude, magnitude, size=q.shape)


@dataclass
class LipschitzEstimate:
    """Empirical lower bound on the Q Lipschitz constant over (s + a) space."""

    k_hat: float
    n_pairs: int
    n_skipped: int = 0


def estimate_lipschitz(q_fn, point_pairs: np.ndarray) -> LipschitzEstimate:
    """Max |Q(p1) - Q(p2)| / ||p1 - p2|| over pairs of concatenated points.

    q_fn maps (n, d_total) -> (n,). Zero-distance pairs are skipped and
    counted.
    """
    pairs = np.asarray(point_pairs, dtype=np.float64)
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError("point_pairs must have shape (n_pairs, 2, d)")
    a, b = pairs[:, 0, :], pairs[:, 1, :]
    dist = np.linalg.norm(a - b, axis=1)
    keep = dist > 0.0
    qa = np.asarray(q_fn(a[keep]), dtype=np.float64)
    qb = np.asarray(q_fn(b[keep]), dtype=np.float64)
    ratios = np.abs(qa - qb) / dist[keep]
    k_hat = float(ratios.max()) if ratios.size else 0.0
    return LipschitzEstimate(k_hat=k_hat, n_pairs=int(keep.sum()),
                             n_skipped=int((~keep).sum()))


def cell_diameter(spec: GridSpec, table: CellTable, dataset: StaticDataset):
    """Max pairwise member-state distance per cell, and the global max."""
    states = dataset.states.astype(np.float64)
    per_cell = {}
    global_max = 0.0
    for key, members in table.cells.items():
        if members.shape[0] < 2:
            per_cell[key] = 0.0
            continue
        pts = states[members]
        diffs = pts[:, None, :] - pts[None, :, :]
        d = float(np.sqrt((diffs ** 2).sum(axis=2)).max())
        per_cell[key] = d
        global_max = max(global_max, d)
    return per_cell, global_max


@dataclass
class ImprovementReport:
    delta: int
    fraction_non_degraded: float
    worst_violation: float  # most negative Q(s, a_new) - Q(s, a_old); 0 if none
    s_max: float            # global max in-cell state diameter


def verify_improvement(mdp: TabularMdp, exact_q: np.ndarray, spec: GridSpec,
                       dataset: StaticDataset, selection_q: np.ndarray | None = None,
                       tol: float = 1e-9) -> ImprovementReport:
    """Check every dataset row for Q(s, a_new) >= Q(s, a_old) - tol.

    a_new is the in-cell best action chosen by selection_q (default: the
    exact table) evaluated at the row's state, own action kept on ties;
    degradation is always measured with the exact table.
    """
    sel = exact_q if selection_q is None else selection_q
    table = build_cell_table(spec, dataset)
    _, s_max = cell_diameter(spec, table, dataset)

    row_state = np.array([mdp.state_index(s) for s in dataset.states.astype(np.float64)])
    row_action = np.array([mdp.action_index(a) for a in dataset.actions.astype(np.float64)])

    gaps = np.zeros(len(dataset))
    for key, members in table.cells.items():
        member_actions = row_action[members]
        for row in members:
            s_idx = row_state[row]
            own_a = row_action[row]
            candidates = sel[s_idx, member_actions]
            own_value = sel[s_idx, own_a]
            best = int(np.argmax(candidates))
            if candidates[best] > own_value:
                new_a = member_actions[best]
            else:
                new_a = own_a  # conservative: ties keep the original policy
            gaps[row] = exact_q[s_idx, new_a] - exact_q[s_idx, own_a]

    non_degraded = gaps >= -tol
    worst = float(min(gaps.min(), 0.0))
    return ImprovementReport(
        delta=spec.delta,
        fraction_non_degraded=float(np.mean(non_degraded)),
        worst_violation=worst,
        s_max=s_max,
    )


def sweep_delta(mdp: TabularMdp, exact_q: np.ndarray, dataset: StaticDataset,
                deltas, selection_q: np.ndarray | None = None, tol: float = 1e-9):
    """ImprovementReport per grid precision (oracle mode)."""
    deltas = list(deltas)
    if not deltas:
        raise ValueError("delta list must be non-empty")
    if any(d < 1 for d in deltas):
        raise ValueError("delta values must be >= 1")
    reports = []
    for delta in deltas:
        spec = GridSpec(delta=delta, mins=dataset.state_min, maxs=dataset.state_max)
        reports.append(verify_improvement(mdp, exact_q, spec, dataset,
                                          selection_q=selection_q, tol=tol))
    return reports


def threshold_delta(reports) -> int | None:
    """Smallest tested precision from which every report has fraction 1.0."""
    star = None
    for rep in sorted(reports, key=lambda r: r.delta):
        if rep.fraction_non_degraded >= 1.0:
            if star is None:
                star = rep.delta
        else:
            star = None
    return star


def sweep_csv(reports) -> str:
    lines = ["delta,fraction_non_degraded,worst_violation,s_max_global"]
    for r in sorted(reports, key=lambda x: x.delta):
        lines.append(f"{r.delta},{r.fraction_non_degraded!r},{r.worst_violation!r},{r.s_max!r}")
    return "\n".join(lines) + "\n"


def empirical_sweep_csv(rows) -> str:
    """rows: iterable of (delta, eval_return_mean, eval_return_std)."""
    lines = ["delta,eval_return_mean,eval_return_std"]
    for delta, mean, std in rows:
        lines.append(f"{delta},{mean!r},{std!r}")
    return "\n".join(lines) + "\n"
