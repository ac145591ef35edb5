"""Rollout groups: G sampled responses per prompt with rewards and old log-probs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import model as M
from .. import tasks
from ..errors import ConfigError
from .config import AlgoConfig


@dataclass
class Policy:
    cfg: M.ModelConfig
    params: dict
    adapters: dict | None = None


@dataclass
class RolloutGroup:
    prompt: list[int]
    responses: list[list[int]]
    old_logprobs: list[np.ndarray]
    rewards: np.ndarray
    correct: np.ndarray
    instance_id: int = -1
    entropies: list | None = None  # per-token policy entropy at sampling time

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        self.old_logprobs = [np.asarray(x, dtype=np.float64) for x in self.old_logprobs]
        if self.G < 2:
            raise ConfigError("a rollout group needs at least two responses")
        if not (len(self.old_logprobs) == len(self.rewards) == len(self.correct) == self.G):
            raise ConfigError("group fields disagree on G")
        for resp, lp in zip(self.responses, self.old_logprobs):
            if lp.shape != (len(resp),):
                raise ConfigError("old log-prob vector length must equal response length")
            if not np.all(np.isfinite(lp)):
                raise ConfigError("old log-probs must be finite")

    @property
    def G(self) -> int:
        return len(self.responses)

    @property
    def lengths(self) -> list[int]:
        return [len(r) for r in self.responses]


@dataclass
class Packed:
    tokens: np.ndarray  # (N, T) prompt + response, right padded
    targets: np.ndarray  # (N, T) next-token ids (PAD where unused)
    rows: list  # per group, per response: (row, first position, length)
    extra: dict = field(default_factory=dict)

    def gather(self, grid) -> list[list[np.ndarray]]:
        return [[grid[r, s:s + n] for (r, s, n) in g] for g in self.rows]

    def scatter(self, values) -> np.ndarray:
        grid = np.zeros(self.tokens.shape)
        for g, vals in zip(self.rows, values):
            for (r, s, n), v in zip(g, vals):
                grid[r, s:s + n] = v
        return grid


def pack(prompts_and_responses) -> Packed:
    """``[(prompt, [response, ...]), ...]`` -> padded token/target grids."""
    seqs, rows = [], []
    for prompt, responses in prompts_and_responses:
        g = []
        for resp in responses:
            g.append((len(seqs), len(prompt) - 1, len(resp)))
            seqs.append(list(prompt) + list(resp))
        rows.append(g)
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), tasks.PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
    targets = np.full_like(tokens, tasks.PAD)
    targets[:, :-1] = tokens[:, 1:]
    return Packed(tokens=tokens, targets=targets, rows=rows)


def pack_groups(groups) -> Packed:
    return pack([(g.prompt, g.responses) for g in groups])


def response_logprobs(policy: Policy, packed: Packed):
    logits, tape = M.forward(policy.cfg, policy.params, packed.tokens, policy.adapters)
    lp = M.logprob_per_token(logits, packed.targets)
    return packed.gather(lp), logits, tape


def response_streams(seed: int, step: int, prompt_index: int, G: int):
    """Independent RNG stream per response, keyed by (seed, step, prompt, i)."""
    return [np.random.default_rng([seed, step, prompt_index, i]) for i in range(G)]


def rollout(policy: Policy, instances, cfg: AlgoConfig, reward_cfg: tasks.RewardConfig,
            seed: int = 0, step: int = 0, index_offset: int = 0) -> list[RolloutGroup]:
    """Sample G responses per instance and score them.

    Old log-probs come from a forward pass with the sampling-time parameters
    (untempered policy distribution).
    """
    if not instances:
        raise ConfigError("rollout needs at least one instance")
    prompts, rngs = [], []
    for j, inst in enumerate(instances):
        p = tasks.encode_prompt(inst)
        prompts += [p] * cfg.G
        rngs += response_streams(seed, step, index_offset + j, cfg.G)
    responses = M.generate(
        policy.cfg, policy.params, prompts, cfg.max_new_tokens,
        rngs=None if cfg.greedy else rngs, temperature=cfg.temperature, top_p=cfg.top_p,
        greedy=cfg.greedy, eos_id=tasks.EOS, pad_id=tasks.PAD, adapters=policy.adapters)
    pairs = []
    for j in range(len(instances)):
        pairs.append((prompts[j * cfg.G], responses[j * cfg.G:(j + 1) * cfg.G]))
    packed = pack(pairs)
    old, logits, _ = response_logprobs(policy, packed)
    ent = packed.gather(M.entropy_per_token(logits))
    groups = []
    for j, inst in enumerate(instances):
        resp = pairs[j][1]
        groups.append(RolloutGroup(
            prompt=pairs[j][0],
            responses=resp,
            old_logprobs=old[j],
            rewards=[tasks.reward(inst, r, reward_cfg) for r in resp],
            correct=[tasks.verify(inst, r, reward_cfg.grammar) for r in resp],
            instance_id=inst.id,
            entropies=ent[j],
        ))
    return groups


def dynamic_sampling_filter(group: RolloutGroup) -> bool:
    """Keep a group only when it is neither all-correct nor all-wrong."""
    n = int(np.count_nonzero(group.correct))
    return 0 < n < group.G
