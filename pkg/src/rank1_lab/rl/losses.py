"""Group-relative advantages and the GRPO / DAPO / GSPO surrogate objectives.

Objectives are maximised. Each objective function works on plain per-response
log-prob arrays and returns the objective value together with per-token
weights ``w`` such that ``dJ/dtheta = sum_t w_t * dlog pi(y_t)/dtheta``; the
trainer feeds those weights to :func:`rank1_lab.model.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import model as M
from ..errors import ConfigError, MissingReference
from .config import AlgoConfig
from .rollout import Policy, RolloutGroup, pack_groups, response_logprobs

SIGMA_FLOOR = 1e-8


@dataclass
class GroupStats:
    mean: float
    std: float
    advantages: np.ndarray


def group_advantages(rewards) -> GroupStats:
    """(r - mean) / std with the population std; all zeros for a flat group."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise ConfigError("advantages need a group of at least two rewards")
    mu = float(r.mean())
    sd = float(r.std())
    if sd < SIGMA_FLOOR:
        return GroupStats(mu, sd, np.zeros_like(r))
    return GroupStats(mu, sd, (r - mu) / sd)


def kl_penalty(logp, ref_logp):
    """Per-token k3 estimator exp(d) - d - 1 with d = log pi_ref - log pi."""
    d = np.asarray(ref_logp, dtype=np.float64) - np.asarray(logp, dtype=np.float64)
    return np.expm1(d) - d


@dataclass
class ObjectiveResult:
    objective: float
    weights: list  # per group, per response: token weight arrays
    clip_fraction: float = 0.0
    mean_ratio: float = 1.0
    kl: float = 0.0
    extra: dict = field(default_factory=dict)


def _norms(lengths, aggregation):
    """Per-response normalisers for each group."""
    n_groups = len(lengths)
    if aggregation == "token-mean":
        total = sum(sum(g) for g in lengths)
        if total == 0:
            raise ConfigError("token-mean aggregation over an empty batch")
        return [[1.0 / total] * len(g) for g in lengths]
    if aggregation == "sample-mean":
        out = []
        for g in lengths:
            out.append([1.0 / (n_groups * len(g) * n) if n else 0.0 for n in g])
        return out
    raise ConfigError(f"unknown aggregation {aggregation!r}")


def token_clip_objective(new_logp, old_logp, advantages, eps_low: float, eps_high: float,
                         aggregation: str, beta: float = 0.0, ref_logp=None) -> ObjectiveResult:
    """Token-level clipped surrogate shared by GRPO and DAPO.

    All arguments are nested ``[group][response]`` sequences; ``advantages``
    holds one scalar per response.
    """
    if beta > 0 and ref_logp is None:
        raise MissingReference("beta > 0 requires reference log-probs")
    lengths = [[len(x) for x in g] for g in new_logp]
    coef = _norms(lengths, aggregation)
    J, kl_sum, n_tok, n_clip, ratio_sum = 0.0, 0.0, 0, 0, 0.0
    weights = []
    for gi, g in enumerate(new_logp):
        wg = []
        for i, lp in enumerate(g):
            lp = np.asarray(lp, dtype=np.float64)
            a = float(advantages[gi][i])
            c = coef[gi][i]
            ratio = np.exp(lp - np.asarray(old_logp[gi][i], dtype=np.float64))
            plain = ratio * a
            clipped = np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * a
            binding = clipped < plain
            J += c * float(np.sum(np.minimum(plain, clipped)))
            w = c * np.where(binding, 0.0, plain)
            if beta > 0:
                ref = np.asarray(ref_logp[gi][i], dtype=np.float64)
                k = kl_penalty(lp, ref)
                J -= beta * c * float(np.sum(k))
                w = w + beta * c * np.expm1(ref - lp)
                kl_sum += float(np.sum(k))
            wg.append(w)
            n_tok += lp.size
            n_clip += int(np.count_nonzero(binding))
            ratio_sum += float(np.sum(ratio))
        weights.append(wg)
    return ObjectiveResult(
        objective=J, weights=weights,
        clip_fraction=n_clip / n_tok if n_tok else 0.0,
        mean_ratio=ratio_sum / n_tok if n_tok else 1.0,
        kl=kl_sum / n_tok if n_tok else 0.0,
    )


def grpo_objective(new_logp, old_logp, advantages, eps: float = 0.2, beta: float = 0.0,
                   ref_logp=None, aggregation: str = "sample-mean") -> ObjectiveResult:
    return token_clip_objective(new_logp, old_logp, advantages, eps, eps, aggregation,
                                beta, ref_logp)


def dapo_objective(new_logp, old_logp, advantages, eps_low: float = 0.2,
                   eps_high: float = 0.28, aggregation: str = "token-mean") -> ObjectiveResult:
    return token_clip_objective(new_logp, old_logp, advantages, eps_low, eps_high, aggregation)


def gspo_objective(new_logp, old_logp, advantages, eps: float = 0.2) -> ObjectiveResult:
    """Sequence-level clipping on the length-normalised importance ratio."""
    n_groups = len(new_logp)
    J, n_clip, n_resp, ratio_sum = 0.0, 0, 0, 0.0
    weights = []
    for gi, g in enumerate(new_logp):
        wg = []
        for i, lp in enumerate(g):
            lp = np.asarray(lp, dtype=np.float64)
            a = float(advantages[gi][i])
            c = 1.0 / (n_groups * len(g))
            if lp.size == 0:
                wg.append(lp.copy())
                continue
            s = float(np.exp(np.mean(lp - np.asarray(old_logp[gi][i], dtype=np.float64))))
            plain = s * a
            clipped = min(max(s, 1.0 - eps), 1.0 + eps) * a
            binding = clipped < plain
            J += c * min(plain, clipped)
            # ds/dlogpi_t = s / |y|
            w = 0.0 if binding else c * a * s / lp.size
            wg.append(np.full(lp.size, w))
            n_resp += 1
            n_clip += int(binding)
            ratio_sum += s
        weights.append(wg)
    return ObjectiveResult(
        objective=J, weights=weights,
        clip_fraction=n_clip / n_resp if n_resp else 0.0,
        mean_ratio=ratio_sum / n_resp if n_resp else 1.0,
    )


@dataclass
class LossResult:
    objective: float
    loss: float
    weights: np.ndarray  # token-grid weights for model.backward
    packed: object
    tape: object
    stats: dict


def policy_loss(groups: list[RolloutGroup], policy: Policy, cfg: AlgoConfig,
                ref: Policy | None = None) -> LossResult:
    """Forward the current policy over the groups and evaluate the configured objective."""
    if not groups:
        raise ConfigError("policy_loss needs at least one group")
    packed = pack_groups(groups)
    new_lp, logits, tape = response_logprobs(policy, packed)
    old_lp = [g.old_logprobs for g in groups]
    adv = [group_advantages(g.rewards).advantages for g in groups]
    if cfg.algo == "GRPO":
        ref_lp = None
        if cfg.beta > 0:
            if ref is None:
                raise MissingReference("GRPO with beta > 0 needs a reference policy")
            ref_lp, _, _ = response_logprobs(ref, packed)
        res = grpo_objective(new_lp, old_lp, adv, cfg.eps, cfg.beta, ref_lp,
                             cfg.resolved_aggregation)
    elif cfg.algo == "DAPO":
        res = dapo_objective(new_lp, old_lp, adv, cfg.eps_low, cfg.eps_high,
                             cfg.resolved_aggregation)
    else:
        res = gspo_objective(new_lp, old_lp, adv, cfg.eps)
    ent = packed.gather(M.entropy_per_token(logits))
    n_tok = sum(len(x) for g in ent for x in g)
    stats = {
        "clip_fraction": res.clip_fraction,
        "mean_ratio": res.mean_ratio,
        "kl": res.kl,
        "entropy": sum(float(np.sum(x)) for g in ent for x in g) / max(n_tok, 1),
        "n_tokens": n_tok,
    }
    return LossResult(res.objective + 0.0, 0.0 - res.objective, packed.scatter(res.weights), packed,
                      tape, stats)


def grpo_loss(groups, policy, cfg: AlgoConfig, ref=None) -> LossResult:
    return policy_loss(groups, policy, _with_algo(cfg, "GRPO"), ref)


def dapo_loss(groups, policy, cfg: AlgoConfig, ref=None) -> LossResult:
    return policy_loss(groups, policy, _with_algo(cfg, "DAPO"), ref)


def gspo_loss(groups, policy, cfg: AlgoConfig, ref=None) -> LossResult:
    return policy_loss(groups, policy, _with_algo(cfg, "GSPO"), ref)


def _with_algo(cfg: AlgoConfig, algo: str) -> AlgoConfig:
    if cfg.algo == algo:
        return cfg
    from dataclasses import replace
    return replace(cfg, algo=algo)


def policy_gradients(result: LossResult, policy: Policy) -> dict:
    """Gradient of the objective (ascent direction) for every trainable tensor."""
    return M.backward(result.tape, policy.cfg, policy.params, result.packed.targets,
                      result.weights, policy.adapters)
