"""Entropy-guided tree search (EPTree) and tree-based RL on a tabular policy."""

from .credit import (GLOBAL_ONLY_REWEIGHTED, PLAIN_SUM, REWEIGHTED_SUM, RewardScheme, StepReward,
                     TrainingExample, all_step_rewards, step_reward, training_batch)
from .gentree import VIRTUAL_ROOT, ForkPoint, GenForest, SegmentNode, TokenRecord, expected_leaf_count
from .policy import ChainSumTask, GenParams, SynthBackend, SynthPolicy
from .search import (BudgetReport, ForkStrategy, MctsConfig, SearchConfig, eptree_search, mcts_search,
                     multichain_sample, select_fork_points)

__version__ = "0.1.0"
