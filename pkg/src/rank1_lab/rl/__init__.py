"""Policy-gradient engine: rollouts, group advantages, clipped objectives, substitution."""
from .config import AlgoConfig
from .losses import (
    GroupStats, dapo_loss, dapo_objective, group_advantages, grpo_loss, grpo_objective,
    gspo_loss, gspo_objective, kl_penalty, policy_loss,
)
from .optim import AdamState, optimizer_step
from .rollout import Policy, RolloutGroup, dynamic_sampling_filter, rollout
from .substitution import periodic_rank1_substitute

__all__ = [
    "AlgoConfig", "GroupStats", "dapo_loss", "dapo_objective", "group_advantages",
    "grpo_loss", "grpo_objective", "gspo_loss", "gspo_objective", "kl_penalty", "policy_loss",
    "AdamState", "optimizer_step", "Policy", "RolloutGroup", "dynamic_sampling_filter",
    "rollout", "periodic_rank1_substitute",
]
