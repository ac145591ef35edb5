from __future__ import annotations

import json
import math

import numpy as np
import pytest

from rank1_lab import checkpoint as C
from rank1_lab import linalg, model as M, tasks
from rank1_lab.config import RunConfig, load_config
from rank1_lab.errors import ConfigError, NaNLoss
from rank1_lab.rl.rollout import Policy, rollout
from rank1_lab.rl.config import AlgoConfig
from rank1_lab.rl.substitution import is_substitution_step, periodic_rank1_substitute
from rank1_lab.rl.trainer import TELEMETRY_COLUMNS, train

TINY = {
    # format bonus plus a short warm-start so rewards vary and updates are nonzero
    "task": {"size": 80, "test_size": 10, "k_range": [2, 2], "num_range": [1, 9],
             "reward": {"format_bonus": 0.5}},
    "model": {"vocab_size": 24, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 24,
              "max_seq_len": 24},
    "algo": {"G": 4, "lr": 1e-3, "max_new_tokens": 6, "substitution_period": 3},
    "schedule": {"steps": 7, "batch_prompts": 6, "eval_interval": 3, "snapshot_interval": 1},
    "warmstart": {"steps": 80, "batch": 16, "lr": 1e-2},
}


def _cfg(**over):
    return RunConfig.from_dict(TINY).override(**over)


# -- rollouts -------------------------------------------------------------

def _policy():
    cfg = M.ModelConfig(vocab_size=24, d_model=16, n_layers=1, n_heads=2, d_ff=24, max_seq_len=32)
    return Policy(cfg, M.init(cfg))


def test_rollout_shape_and_determinism():
    pol = _policy()
    inst = tasks.generate_dataset(0, 32, (2, 2))
    cfg = AlgoConfig(G=8, max_new_tokens=4)
    a = rollout(pol, inst, cfg, tasks.RewardConfig(), seed=3, step=1)
    assert sum(g.G for g in a) == 256 and len(a) == 32
    b = rollout(pol, inst, cfg, tasks.RewardConfig(), seed=3, step=1)
    assert [g.responses for g in a] == [g.responses for g in b]
    assert all(np.array_equal(x, y) for ga, gb in zip(a, b)
               for x, y in zip(ga.old_logprobs, gb.old_logprobs))
    c = rollout(pol, inst[:2], cfg, tasks.RewardConfig(), seed=4, step=1)
    assert [g.responses for g in c] != [g.responses for g in a[:2]]


def test_rollout_streams_independent_of_batching():
    pol = _policy()
    inst = tasks.generate_dataset(0, 4, (2, 2))
    cfg = AlgoConfig(G=4, max_new_tokens=5)
    full = rollout(pol, inst, cfg, tasks.RewardConfig(), seed=1, step=2)
    tail = rollout(pol, inst[2:], cfg, tasks.RewardConfig(), seed=1, step=2, index_offset=2)
    assert [g.responses for g in full[2:]] == [g.responses for g in tail]


def test_greedy_rollout_identical_responses():
    pol = _policy()
    inst = tasks.generate_dataset(0, 3, (2, 2))
    gs = rollout(pol, inst, AlgoConfig(G=4, greedy=True, max_new_tokens=5), tasks.RewardConfig())
    for g in gs:
        assert all(r == g.responses[0] for r in g.responses)


def test_old_logprobs_match_fresh_forward():
    pol = _policy()
    inst = tasks.generate_dataset(0, 2, (2, 2))
    gs = rollout(pol, inst, AlgoConfig(G=3, max_new_tokens=5), tasks.RewardConfig())
    for g in gs:
        for resp, lp in zip(g.responses, g.old_logprobs):
            seq = g.prompt + resp
            logits, _ = M.forward(pol.cfg, pol.params, [seq])
            ref = M.logprob_per_token(logits[:, :-1], np.array([seq[1:]]))[0, len(g.prompt) - 1:]
            np.testing.assert_allclose(lp, ref, atol=1e-12)


# -- substitution ---------------------------------------------------------

def test_substitution_examples():
    base = {"w": np.zeros((2, 2)), "v": np.ones((3, 2))}
    cur = {k: v.copy() for k, v in base.items()}
    recs = periodic_rank1_substitute(base, cur, ["w", "v"])
    assert all(r.degenerate for r in recs)
    assert all(np.array_equal(cur[k], base[k]) for k in base)
    cur["w"] = np.diag([3.0, 1.0])
    periodic_rank1_substitute(base, cur, ["w"])
    np.testing.assert_allclose(cur["w"], np.diag([math.sqrt(10), 0.0]), atol=1e-14)


def test_substitution_leaves_rank1_delta():
    rng = np.random.default_rng(0)
    base = {f"l{i}": rng.normal(size=(6, 5)) for i in range(4)}
    cur = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in base.items()}
    norms = {k: linalg.frobenius_norm(cur[k] - base[k]) for k in base}
    periodic_rank1_substitute(base, cur, list(base))
    for k in base:
        d = cur[k] - base[k]
        assert linalg.sigma_ratio(d) <= 1e-10
        assert linalg.frobenius_norm(d) == pytest.approx(norms[k], rel=1e-12)


def test_is_substitution_step():
    assert [s for s in range(35) if is_substitution_step(s, 10)] == [10, 20, 30]
    assert not any(is_substitution_step(s, 0) for s in range(20))


# -- training loop --------------------------------------------------------

def test_zero_steps_single_row(tmp_path):
    res = train(_cfg(schedule={"steps": 0}), tmp_path / "r")
    assert len(res.rows) == 1 and res.rows[0]["test_accuracy"] is not None
    lines = (tmp_path / "r" / "telemetry.csv").read_text().splitlines()
    assert lines[0].split(",")[:len(TELEMETRY_COLUMNS)] == list(TELEMETRY_COLUMNS)
    assert len(lines) == 2


def test_periodic_run_events_and_snapshots(tmp_path):
    out = tmp_path / "p"
    res = train(_cfg(mode="periodic-rank1"), out)
    subs = [e["step"] for e in res.events if e["event"] == "substitution"]
    assert subs == [3, 6]
    assert [r["step"] for r in res.rows if r["substituted"]] == [3, 6]
    base = C.load(out / "snapshots" / "step0.ckpt")
    names = [n for n in M.linear_names(res.policy.cfg)]
    for step in subs:
        snap = C.load(out / "snapshots" / f"step{step}.ckpt")
        assert snap.metadata["substituted"] == "true" and snap.metadata["mode"] == "periodic-rank1"
        for n in names:
            assert linalg.sigma_ratio(snap.tensors[n] - base.tensors[n]) <= 1e-10
    mid = C.load(out / "snapshots" / "step4.ckpt")
    d = mid.tensors[names[0]] - base.tensors[names[0]]
    assert linalg.sigma_ratio(d) > 1e-6  # between events the update is free again
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["mode"] == "periodic-rank1"


def test_full_mode_has_no_substitution():
    res = train(_cfg(schedule={"steps": 4, "snapshot_interval": 0}))
    assert not any(e["event"] == "substitution" for e in res.events)
    assert not any(r["substituted"] for r in res.rows)


def test_determinism(tmp_path):
    a = train(_cfg(mode="periodic-rank1"), tmp_path / "a")
    b = train(_cfg(mode="periodic-rank1"), tmp_path / "b")
    assert (tmp_path / "a" / "telemetry.csv").read_bytes() == \
        (tmp_path / "b" / "telemetry.csv").read_bytes()
    assert a.rows == b.rows


def test_lora_mode_only_moves_adapters():
    res = train(_cfg(mode="lora", lora={"r": 1, "lr": 1e-2}, schedule={"steps": 3}))
    assert res.policy.adapters
    for k, v in res.base_params.items():
        np.testing.assert_array_equal(res.policy.params[k], v)
    assert any(np.any(ad.B) for ad in res.policy.adapters.values())


def test_dynamic_sampling_and_kl_run():
    res = train(_cfg(algo={"algo": "DAPO", "dynamic_sampling": True, "resample_cap": 1},
                     schedule={"steps": 2}))
    assert len(res.rows) == 3
    res = train(_cfg(algo={"beta": 0.01, "ref": "post-substitution"}, mode="periodic-rank1",
                     schedule={"steps": 3}))
    assert res.rows[1]["kl"] is not None


def test_gspo_run():
    res = train(_cfg(algo={"algo": "GSPO"}, schedule={"steps": 2}))
    assert all(math.isfinite(r["mean_reward"]) for r in res.rows)


def test_nan_abort(tmp_path, monkeypatch):
    from rank1_lab.rl import trainer as TR

    def bad(result, policy):
        return {k: np.full_like(v, np.nan) for k, v in policy.params.items()}

    monkeypatch.setattr(TR, "policy_gradients", bad)
    with pytest.raises(NaNLoss):
        train(_cfg(schedule={"steps": 2}), tmp_path / "n")
    dump = json.loads((tmp_path / "n" / "nan_dump.json").read_text())
    assert dump["step"] == 1 and dump["nonfinite_grads"]


def test_config_strict(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"algo": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mode": "half"})
    with pytest.raises(ConfigError):
        AlgoConfig(algo="PPO")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    assert load_config(p) == RunConfig.from_dict(TINY)
    assert AlgoConfig(algo="DAPO").resolved_aggregation == "token-mean"
    assert AlgoConfig().resolved_aggregation == "sample-mean"
    assert AlgoConfig.from_dict(AlgoConfig(eps=0.1).to_dict()) == AlgoConfig(eps=0.1)
