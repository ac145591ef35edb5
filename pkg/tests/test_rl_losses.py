from __future__ import annotations

import math

import numpy as np
import pytest

from rank1_lab import model as M
from rank1_lab.errors import ConfigError, MissingReference
from rank1_lab.rl import losses as L
from rank1_lab.rl.config import AlgoConfig
from rank1_lab.rl.optim import AdamState, clip_by_global_norm, optimizer_step
from rank1_lab.rl.rollout import Policy, RolloutGroup, dynamic_sampling_filter, pack_groups, \
    response_logprobs
from oracles import (advantages_ref, central_fd, gspo_objective_ref, gspo_ratio_ref, rel_err,
                     token_objective_ref)


# -- advantages / KL ------------------------------------------------------

def test_advantage_examples():
    st = L.group_advantages([1, 0, 0, 0])
    assert st.mean == 0.25 and st.std == pytest.approx(math.sqrt(3) / 4)
    np.testing.assert_allclose(st.advantages, [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)
    np.testing.assert_array_equal(L.group_advantages([1, 1, 1, 1]).advantages, 0.0)
    np.testing.assert_allclose(L.group_advantages([1, 1, 0, 0]).advantages, [1, 1, -1, -1])
    with pytest.raises(ConfigError):
        L.group_advantages([1.0])


def test_advantage_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.normal(size=8)
        a = L.group_advantages(r).advantages
        assert abs(a.sum()) <= 1e-9 and abs(a.std() - 1) <= 1e-9
        np.testing.assert_allclose(L.group_advantages(r + 3.7).advantages, a, atol=1e-9)
        np.testing.assert_allclose(L.group_advantages(-r).advantages, -a, atol=1e-12)
        np.testing.assert_allclose(a, advantages_ref(list(r)), atol=1e-12)


def test_kl_penalty():
    assert L.kl_penalty(0.3, 0.3) == 0.0
    assert float(L.kl_penalty(0.0, math.log(2))) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    d = np.random.default_rng(1).normal(size=10_000) * 3
    assert np.all(L.kl_penalty(np.zeros_like(d), d) >= 0)


# -- objectives -----------------------------------------------------------

def _batch(rng, n_groups=2, G=4, max_len=6, spread=0.3):
    new, old, adv = [], [], []
    for _ in range(n_groups):
        ng, og = [], []
        for _ in range(G):
            n = int(rng.integers(1, max_len + 1))
            lp = -np.abs(rng.normal(size=n)) - 0.1
            ng.append(lp)
            og.append(lp + spread * rng.normal(size=n))
        new.append(ng)
        old.append(og)
        adv.append(L.group_advantages(rng.random(G)).advantages)
    return new, old, adv


def test_ratio_one_identity():
    rng = np.random.default_rng(2)
    new, _, adv = _batch(rng)
    res = L.grpo_objective(new, new, adv)
    assert res.objective == pytest.approx(0.0, abs=1e-14)
    assert res.clip_fraction == 0.0 and res.mean_ratio == 1.0
    for gi, g in enumerate(new):
        for i, lp in enumerate(g):
            np.testing.assert_allclose(res.weights[gi][i], adv[gi][i] / (len(g) * 2 * len(lp)))
    gs = L.gspo_objective(new, new, adv)
    assert gs.mean_ratio == 1.0 and gs.clip_fraction == 0.0


def test_grpo_clip_example():
    res = L.grpo_objective([[np.array([math.log(1.5)])]], [[np.array([0.0])]], [[1.0]])
    assert res.objective == pytest.approx(1.2)
    assert res.weights[0][0][0] == 0.0


def test_dapo_examples():
    hi = L.dapo_objective([[np.array([math.log(1.30)])]], [[np.array([0.0])]], [[1.0]])
    assert hi.objective == pytest.approx(1.28) and hi.weights[0][0][0] == 0.0
    lo = L.dapo_objective([[np.array([math.log(0.75)])]], [[np.array([0.0])]], [[-1.0]])
    # min(0.75 * -1, 0.8 * -1) is the clipped -0.8; that branch is constant in theta
    assert lo.objective == pytest.approx(-0.8) and lo.weights[0][0][0] == 0.0
    inside = L.dapo_objective([[np.array([math.log(1.25)])]], [[np.array([0.0])]], [[1.0]])
    assert inside.objective == pytest.approx(1.25) and inside.weights[0][0][0] == pytest.approx(1.25)


def test_mixed_length_normalisation():
    new = [[np.zeros(3), np.zeros(7)]]
    adv = [[1.0, -1.0]]
    d = L.dapo_objective(new, new, adv)
    np.testing.assert_allclose(d.weights[0][0], 0.1)
    np.testing.assert_allclose(d.weights[0][1], -0.1)
    assert d.objective == pytest.approx((3 - 7) / 10)
    g = L.grpo_objective(new, new, adv)
    np.testing.assert_allclose(g.weights[0][0], 1 / (2 * 3))
    np.testing.assert_allclose(g.weights[0][1], -1 / (2 * 7))
    assert g.objective == pytest.approx(0.0, abs=1e-15)


def test_objectives_match_reference_on_50_batches():
    rng = np.random.default_rng(3)
    for _ in range(50):
        new, old, adv = _batch(rng, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        ref = [[lp + 0.2 * rng.normal(size=lp.size) for lp in g] for g in new]
        o = L.grpo_objective(new, old, adv, 0.2, 0.05, ref).objective
        assert abs(o - token_objective_ref(new, old, adv, .2, .2, "sample-mean", .05, ref)) <= 1e-10
        o = L.dapo_objective(new, old, adv).objective
        assert abs(o - token_objective_ref(new, old, adv, .2, .28, "token-mean")) <= 1e-10
        o = L.gspo_objective(new, old, adv, 0.2).objective
        assert abs(o - gspo_objective_ref(new, old, adv, 0.2)) <= 1e-10


def test_gspo_ratio():
    res = L.gspo_objective([[np.log([2.0, 0.5]), np.zeros(2)]], [[np.zeros(2), np.zeros(2)]],
                           [[1.0, -1.0]])
    assert res.extra == {} and res.mean_ratio == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        a, b = -np.abs(rng.normal(size=n)), -np.abs(rng.normal(size=n))
        s = L.gspo_objective([[a, a]], [[b, b]], [[1.0, -1.0]]).mean_ratio
        assert abs(s - gspo_ratio_ref(a, b)) <= 1e-12


def test_grpo_gspo_agree_on_equal_lengths():
    rng = np.random.default_rng(5)
    for _ in range(20):
        new, old, adv = [], [], []
        for _ in range(2):
            old_g = [np.full(5, -1.0) for _ in range(4)]
            new_g = [o + rng.normal() * 0.3 for o in old_g]
            new.append(new_g)
            old.append(old_g)
            adv.append(L.group_advantages(rng.random(4)).advantages)
        a = L.grpo_objective(new, old, adv).objective
        b = L.gspo_objective(new, old, adv).objective
        assert abs(a - b) <= 1e-10


def test_clip_weight_zero_exactly_when_binding():
    rng = np.random.default_rng(6)
    new, old, adv = _batch(rng, 3, 6, spread=0.5)
    res = L.dapo_objective(new, old, adv)
    for gi, g in enumerate(new):
        for i, lp in enumerate(g):
            r = np.exp(lp - old[gi][i])
            a = adv[gi][i]
            binding = np.clip(r, 0.8, 1.28) * a < r * a
            assert np.all((res.weights[gi][i] == 0) == (binding | (a == 0)))


def test_missing_reference():
    with pytest.raises(MissingReference):
        L.grpo_objective([[np.zeros(1)]], [[np.zeros(1)]], [[1.0]], beta=0.1)


# -- full-model gradients --------------------------------------------------

SMALL = M.ModelConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=2, d_ff=12, max_seq_len=12)


def _groups(policy, rng, shift, n_groups=2, G=3):
    groups = []
    for _ in range(n_groups):
        prompt = [int(x) for x in rng.integers(1, 9, size=3)]
        resp = [[int(x) for x in rng.integers(1, 9, size=int(rng.integers(2, 6)))] for _ in range(G)]
        g = RolloutGroup(prompt, resp, [np.zeros(len(r)) for r in resp], rng.random(G),
                         np.zeros(G, bool))
        groups.append(g)
    lp, _, _ = response_logprobs(policy, pack_groups(groups))
    for g, glp in zip(groups, lp):
        g.old_logprobs = [x + shift * rng.choice([-1.0, 1.0], size=x.size) for x in glp]
    return groups


@pytest.mark.parametrize("algo", ["GRPO", "DAPO", "GSPO"])
@pytest.mark.parametrize("shift", [0.02, 0.6])
def test_policy_gradient_matches_fd(algo, shift):
    rng = np.random.default_rng(7)
    params = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in M.init(SMALL).items()}
    pol = Policy(SMALL, params)
    cfg = AlgoConfig(algo=algo, beta=0.05 if algo == "GRPO" else 0.0, G=3)
    groups = _groups(pol, rng, shift)
    ref = Policy(SMALL, {k: v + 0.05 for k, v in params.items()})
    res = L.policy_loss(groups, pol, cfg, ref)
    if shift > 0.5:
        assert res.stats["clip_fraction"] > 0
    else:
        assert res.stats["clip_fraction"] == 0
    grads = L.policy_gradients(res, pol)
    f = lambda: L.policy_loss(groups, pol, cfg, ref).objective
    for name in ("layers.0.self_attn.v_proj", "layers.0.mlp.down_proj", "embed_tokens",
                 "lm_head", "norm"):
        arr = params[name]
        idx = [tuple(rng.integers(s) for s in arr.shape) for _ in range(4)]
        fd = central_fd(f, arr, idx)
        an = np.array([grads[name][i] for i in idx])
        assert rel_err(an, fd) <= 1e-4, name


def test_loss_is_negated_objective():
    rng = np.random.default_rng(8)
    pol = Policy(SMALL, M.init(SMALL))
    res = L.grpo_loss(_groups(pol, rng, 0.0), pol, AlgoConfig(G=3))
    assert res.loss == -res.objective


# -- optimizer ------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    optimizer_step(p, {"w": np.array([0.5, 0.5])}, st, lr=0.1, grad_clip=None)
    before = p["w"].copy()
    m0 = st.m["w"].copy()
    optimizer_step(p, {"w": np.zeros(2)}, st, lr=0.1, grad_clip=None)
    np.testing.assert_allclose(st.m["w"], 0.9 * m0)
    st2 = AdamState()
    q = {"w": before.copy()}
    optimizer_step(q, {"w": np.zeros(2)}, st2, lr=0.1)
    np.testing.assert_array_equal(q["w"], before)


def test_adam_scalar_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = {"x": np.array(0.5)}
    st = AdamState()
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -0.1, 0.7], start=1):
        optimizer_step(p, {"x": np.array(g)}, st, lr, (b1, b2), eps, grad_clip=None)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(float(p["x"]) - x) <= 1e-12


def test_weight_decay_is_decoupled():
    p = {"x": np.array([2.0])}
    optimizer_step(p, {"x": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.5)
    assert float(p["x"][0]) == pytest.approx(2.0 * (1 - 0.05))


def test_global_norm_clip():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
    out, norm = clip_by_global_norm(g, 1.0)
    assert norm == 10.0
    np.testing.assert_allclose(out["a"], [0.6, 0.0])
    np.testing.assert_allclose(out["b"], [[0.8]])
    same, _ = clip_by_global_norm(g, 20.0)
    assert same is g


# -- dynamic sampling -----------------------------------------------------

def _group(correct):
    G = len(correct)
    return RolloutGroup([1], [[5]] * G, [np.zeros(1)] * G, np.array(correct, float), correct)


def test_dynamic_sampling_filter():
    assert not dynamic_sampling_filter(_group([True] * 8))
    assert not dynamic_sampling_filter(_group([False] * 8))
    assert dynamic_sampling_filter(_group([True] * 3 + [False] * 5))
    for c in range(9):
        assert dynamic_sampling_filter(_group([True] * c + [False] * (8 - c))) == (0 < c < 8)


def test_rollout_group_validation():
    with pytest.raises(ConfigError):
        RolloutGroup([1], [[2]], [np.zeros(1)], [1.0], [True])
    with pytest.raises(ConfigError):
        RolloutGroup([1], [[2], [3]], [np.zeros(2), np.zeros(1)], [1.0, 0.0], [True, False])
