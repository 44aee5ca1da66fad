"""TD3-BC training loop with optional hypercube-regularized cloning targets.

Twin critics regress to the pessimistic TD target; the actor minimizes

    mean((a_h - pi(s))^2) - lambda * mean(Q1(s, pi(s))),
    lambda = phi / mean(|Q1(s, pi(s))|)   (denominator held constant)

where a_h is the row's own action for plain TD3-BC (use_hypercube=false)
and the in-cell champion target otherwise. Networks consume normalized
states; hypercube binning always sees raw states.
"""

from dataclasses import dataclass, field
import time

import numpy as np

from . import rng as rng_mod
from .dataset import StaticDataset, normalize_states
from .envs import PointMassEnv, ReferenceReturns, normalized_score, rollout_episode
from .hypercube import (GridSpec, build_cell_table, init_champion_cache,
                        refresh_champions, regularization_targets)
from .nets import Mlp, adam_step, backward, forward, init_adam, init_mlp, polyak_update


class NumericAbortError(Exception):
    """Training produced a non-finite quantity; message names it."""


@dataclass
class Td3BcConfig:
    gamma: float = 0.99
    policy_lr: float = 3e-4
    qf_lr: float = 3e-4
    tau: float = 5e-3           # polyak rho = 1 - tau
    batch_size: int = 256
    max_epochs: int = 50
    steps_per_epoch: int = 1000
    phi: float = 2.5            # BC/Q trade-off; 40.0 for the conservative setting
    delta: int = 5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    eval_episodes: int = 10
    seed: int = 0
    use_hypercube: bool = True
    norm_eps: float = 1e-3
    hidden: tuple = (64, 64)    # paper-scale runs use (256, 256, 256)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    @property
    def rho(self) -> float:
        return 1.0 - self.tau


@dataclass
class EpochRecord:
    epoch: int
    step: int
    critic_loss: float
    actor_q_term: float
    bc_loss: float
    mean_abs_q: float
    champion_swaps: int
    eval_return_mean: float
    eval_return_std: float
    normalized_score: float
    wall_time: float  # seconds since training start, strictly increasing


METRIC_COLUMNS = ("epoch", "step", "critic_loss", "actor_q_term", "bc_loss",
                  "mean_abs_q", "champion_swaps", "eval_return_mean",
                  "eval_return_std", "normalized_score")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        """Deterministic per-epoch metrics (timing lives in timing_csv)."""
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.records:
            lines.append(",".join([
                str(r.epoch), str(r.step), repr(r.critic_loss), repr(r.actor_q_term),
                repr(r.bc_loss), repr(r.mean_abs_q), str(r.champion_swaps),
                repr(r.eval_return_mean), repr(r.eval_return_std),
                repr(r.normalized_score),
            ]))
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = ["epoch,wall_time_s"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.wall_time:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainerNets:
    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    target_actor: Mlp
    target_critic1: Mlp
    target_critic2: Mlp
    adam_actor: object
    adam_critic1: object
    adam_critic2: object


def init_nets(config: Td3BcConfig, state_dim: int, action_dim: int) -> TrainerNets:
    rng = rng_mod.stream(config.seed, rng_mod.NET_INIT)
    actor_sizes = [state_dim, *config.hidden, action_dim]
    critic_sizes = [state_dim + action_dim, *config.hidden, 1]
    actor = init_mlp(actor_sizes, "tanh", rng, final_scale=0.1)
    critic1 = init_mlp(critic_sizes, "linear", rng)
    critic2 = init_mlp(critic_sizes, "linear", rng)
    return TrainerNets(
        actor=actor, critic1=critic1, critic2=critic2,
        target_actor=actor.copy(), target_critic1=critic1.copy(),
        target_critic2=critic2.copy(),
        adam_actor=init_adam(actor, config.policy_lr),
        adam_critic1=init_adam(critic1, config.qf_lr),
        adam_critic2=init_adam(critic2, config.qf_lr),
    )


def q_scale(phi: float, mean_abs_q: float) -> float:
    """Trade-off weight lambda = phi / mean |Q|, denominator constant."""
    return phi / max(mean_abs_q, 1e-12)


def _critic_value(critic: Mlp, states_n: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward(critic, np.concatenate([states_n, actions], axis=1))[:, 0]


def make_q_min(nets: TrainerNets, norm) -> "callable":
    """Pessimistic twin-critic minimum over RAW states (normalizes inside)."""
    def q_min(states_raw, actions):
        s = norm.apply(states_raw)
        a = np.asarray(actions, dtype=np.float64)
        x = np.concatenate([s, a], axis=1)
        return np.minimum(forward(nets.critic1, x)[:, 0], forward(nets.critic2, x)[:, 0])
    return q_min


def critic_update(idx, nets: TrainerNets, config: Td3BcConfig, norm,
                  actions64, rewards64, dones64, noise_rng):
    """TD step for both critics; returns (mean critic loss, mean |Q1| on batch)."""
    k = idx.shape[0]
    s = norm.states[idx]
    a = actions64[idx]
    r = rewards64[idx]
    done = dones64[idx]
    s2 = norm.next_states[idx]

    a2 = forward(nets.target_actor, s2)
    noise = np.clip(noise_rng.normal(0.0, config.policy_noise, size=a2.shape),
                    -config.noise_clip, config.noise_clip)
    a2 = np.clip(a2 + noise, -1.0, 1.0)
    x2 = np.concatenate([s2, a2], axis=1)
    q_next = np.minimum(forward(nets.target_critic1, x2)[:, 0],
                        forward(nets.target_critic2, x2)[:, 0])
    y = r + (1.0 - done) * config.gamma * q_next
    if not np.isfinite(y).all():
        raise NumericAbortError("non-finite TD target")
    # No bootstrap through terminals: (1 - done) zeroes the tail exactly.
    assert np.array_equal(y[done == 1.0], r[done == 1.0])

    x = np.concatenate([s, a], axis=1)
    losses = []
    mean_abs_q = 0.0
    for i, (critic, opt) in enumerate(((nets.critic1, nets.adam_critic1),
                                       (nets.critic2, nets.adam_critic2))):
        q = forward(critic, x)[:, 0]
        diff = q - y
        losses.append(float(np.mean(diff ** 2)))
        if i == 0:
            mean_abs_q = float(np.mean(np.abs(q)))
        grads, _ = backward(critic, x, (2.0 / k) * diff[:, None])
        adam_step(critic, grads, opt)
    return 0.5 * (losses[0] + losses[1]), mean_abs_q


def policy_update(idx, nets: TrainerNets, config: Td3BcConfig, norm,
                  actions64, bc_targets):
    """Delayed actor step; returns (q term of the loss, bc loss)."""
    k = idx.shape[0]
    s = norm.states[idx]
    pi = forward(nets.actor, s)
    x = np.concatenate([s, pi], axis=1)
    q1 = forward(nets.critic1, x)[:, 0]
    lam = q_scale(config.phi, float(np.mean(np.abs(q1))))

    bc_diff = pi - bc_targets
    action_dim = pi.shape[1]
    bc_loss = float(np.mean(bc_diff ** 2))
    q_term = -lam * float(np.mean(q1))
    if not (np.isfinite(bc_loss) and np.isfinite(q_term)):
        raise NumericAbortError("non-finite actor loss")

    # d(loss)/d(pi): BC term directly, Q term through critic1's action input.
    _, input_grad = backward(nets.critic1, x, np.full((k, 1), -lam / k))
    upstream = (2.0 / (k * action_dim)) * bc_diff + input_grad[:, s.shape[1]:]
    grads, _ = backward(nets.actor, s, upstream)
    adam_step(nets.actor, grads, nets.adam_actor)
    return q_term, bc_loss


def actor_policy(actor: Mlp, norm):
    """Deterministic rollout policy: normalize the observation, run the actor."""
    def policy(state):
        return forward(actor, norm.apply(np.asarray(state, dtype=np.float64)))
    return policy


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    score: float  # nan when no reference returns were supplied


def evaluate(policy, env: PointMassEnv, n_episodes: int, seed: int,
             refs: ReferenceReturns | None = None) -> EvalResult:
    """Deterministic rollouts (no exploration noise), D4RL-style score."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = rng_mod.stream(seed, rng_mod.EVALUATION)
    returns = []
    for _ in range(n_episodes):
        _, total = rollout_episode(env, policy, rng)
        returns.append(total)
    mean = float(np.mean(returns))
    std = float(np.std(returns))
    score = normalized_score(mean, refs) if refs is not None else float("nan")
    return EvalResult(mean_return=mean, std_return=std, score=score)


def train(config: Td3BcConfig, dataset: StaticDataset, env: PointMassEnv,
          refs: ReferenceReturns | None = None, progress=None):
    """Full training loop; returns (TrainerNets, NormalizedStates, TrainReport).

    Deterministic given (config, dataset, env, refs): all randomness comes
    from fixed streams of config.seed.
    """
    norm = normalize_states(dataset, config.norm_eps)
    nets = init_nets(config, dataset.state_dim, dataset.action_dim)
    actions64 = dataset.actions64
    rewards64 = dataset.rewards.astype(np.float64)
    dones64 = dataset.dones.astype(np.float64)
    n = len(dataset)

    table = cache = None
    q_min = make_q_min(nets, norm)
    if config.use_hypercube:
        spec = GridSpec.from_dataset(dataset, config.delta)
        table = build_cell_table(spec, dataset)
        cache = init_champion_cache(table, dataset, q_min)

    batch_rng = rng_mod.stream(config.seed, rng_mod.BATCH_SAMPLING)
    noise_rng = rng_mod.stream(config.seed, rng_mod.TARGET_NOISE)

    report = TrainReport()
    start = time.perf_counter()
    global_step = 0
    prev_wall = 0.0
    for epoch in range(config.max_epochs):
        sums = {"critic_loss": 0.0, "actor_q_term": 0.0, "bc_loss": 0.0, "mean_abs_q": 0.0}
        policy_steps = 0
        swaps = 0
        for _ in range(config.steps_per_epoch):
            idx = batch_rng.integers(0, n, size=config.batch_size)
            closs, mabs = critic_update(idx, nets, config, norm,
                                        actions64, rewards64, dones64, noise_rng)
            sums["critic_loss"] += closs
            sums["mean_abs_q"] += mabs
            unique_idx = inverse = q_unique = None
            if config.use_hypercube:
                cache.tick()
                # One pessimistic evaluation of the batch rows serves both the
                # champion refresh and the cloning-target comparison below
                # (the critics do not change in between).
                unique_idx, inverse = np.unique(idx, return_inverse=True)
                q_unique = q_min(dataset.states64[unique_idx], actions64[unique_idx])
                swaps += refresh_champions(cache, table, dataset, q_min, unique_idx,
                                           q_rows=q_unique)
            global_step += 1
            if global_step % config.policy_delay == 0:
                if config.use_hypercube:
                    targets = regularization_targets(cache, table, dataset, q_min, idx,
                                                     q_own=q_unique[inverse])
                else:
                    targets = actions64[idx]
                q_term, bc = policy_update(idx, nets, config, norm, actions64, targets)
                sums["actor_q_term"] += q_term
                sums["bc_loss"] += bc
                policy_steps += 1
            polyak_update(nets.target_actor, nets.actor, config.rho)
            polyak_update(nets.target_critic1, nets.critic1, config.rho)
            polyak_update(nets.target_critic2, nets.critic2, config.rho)

        result = evaluate(actor_policy(nets.actor, norm), env,
                          config.eval_episodes, config.seed, refs)
        steps = config.steps_per_epoch
        wall = time.perf_counter() - start
        if wall <= prev_wall:  # clock resolution guard: keep it strictly increasing
            wall = np.nextafter(prev_wall, np.inf)
        prev_wall = wall
        record = EpochRecord(
            epoch=epoch + 1,
            step=global_step,
            critic_loss=sums["critic_loss"] / steps,
            actor_q_term=sums["actor_q_term"] / max(policy_steps, 1),
            bc_loss=sums["bc_loss"] / max(policy_steps, 1),
            mean_abs_q=sums["mean_abs_q"] / steps,
            champion_swaps=swaps,
            eval_return_mean=result.mean_return,
            eval_return_std=result.std_return,
            normalized_score=result.score,
            wall_time=wall,
        )
        report.records.append(record)
        if progress is not None:
            progress(record)
    return nets, norm, report
