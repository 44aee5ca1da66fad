"""cuberl: offline RL with hypercube policy regularization.

The toolkit partitions a static dataset's state space into uniform
hypercube cells, caches each cell's best-scoring dataset action under the
pessimistic twin-critic minimum, and lets the TD3-BC actor clone that
in-cell champion instead of the row's own action. Small tabular MDPs with
exact Q-functions verify that the substitution never degrades the policy.
"""

from .dataset import (StaticDataset, Transition, compute_state_bounds,
                      load_dataset, normalize_states, save_dataset)
from .envs import (PointMassEnv, TierSpec, behavior_action, default_env,
                   env_reset, env_step, generate_dataset, normalized_score,
                   reference_returns)
from .hypercube import (CellTable, ChampionCache, GridSpec, bin_state,
                        build_cell_table, encode_cell, init_champion_cache,
                        refresh_champions, regularization_target,
                        regularization_targets)
from .nets import (AdamState, Mlp, adam_step, backward, forward, init_adam,
                   init_mlp, load_checkpoint, polyak_update, save_checkpoint)
from .oracle import (ImprovementReport, LipschitzEstimate, TabularMdp,
                     cell_diameter, dataset_from_mdp, estimate_lipschitz,
                     random_mdp, solve_exact_q, sweep_delta, verify_improvement)
from .trainer import Td3BcConfig, TrainReport, evaluate, train

__version__ = "0.1.0"
