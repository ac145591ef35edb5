"""Training loop: warm-start, rollouts, policy updates, substitution, telemetry."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt_io
from .. import model as M
from .. import tasks
from ..checkpoint import default_patterns, select_names
from ..errors import ConfigError, NaNLoss, ResampleCapExceeded
from .losses import policy_gradients, policy_loss
from .optim import AdamState, global_norm, optimizer_step
from .rollout import Policy, dynamic_sampling_filter, pack, response_logprobs, rollout
from .substitution import is_substitution_step, periodic_rank1_substitute

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = (
    "step", "mean_reward", "train_accuracy", "n_groups", "n_responses", "mean_length",
    "entropy", "objective", "loss", "clip_fraction", "mean_ratio", "kl", "grad_norm",
    "substituted", "test_accuracy", "test_n", "test_c",
)

# stream tags mixed into every seed so no two consumers share random numbers
_PROMPTS, _WARM, _EVAL = 101, 103, 107


@dataclass
class TrainResult:
    rows: list[dict]
    events: list[dict]
    policy: Policy
    base_params: dict
    train: list
    test: list
    out_dir: Path | None = None
    extra: dict = field(default_factory=dict)


class Recorder:
    """Append-ordered telemetry CSV and JSON-lines event log (in memory when out is None)."""

    def __init__(self, out: Path | None, pass_ks=(), meta=None):
        self.out = out
        self.meta = dict(meta or {})
        self.columns = list(TELEMETRY_COLUMNS) + [f"pass@{k}" for k in pass_ks]
        self.rows: list[dict] = []
        self.events: list[dict] = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "snapshots").mkdir(exist_ok=True)
            with open(out / "telemetry.csv", "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)
            (out / "events.jsonl").write_text("")

    def row(self, row: dict) -> None:
        self.rows.append(row)
        if self.out is not None:
            with open(self.out / "telemetry.csv", "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [_cell(row.get(c)) for c in self.columns])

    def event(self, kind: str, step: int, **payload) -> None:
        ev = {"event": kind, "step": step, **payload}
        self.events.append(ev)
        if self.out is not None:
            with open(self.out / "events.jsonl", "a") as fh:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")

    def snapshot(self, policy: Policy, step: int, name: str | None = None, **meta) -> None:
        if self.out is None:
            return
        ck = M.snapshot(policy.cfg, policy.params, policy.adapters,
                        {**self.meta, "step": step, **meta})
        ckpt_io.save(ck, self.out / "snapshots" / (name or f"step{step}.ckpt"))


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -- data -------------------------------------------------------------------

def load_data(task) -> tuple[list, list, str]:
    if task.dataset:
        data = tasks.read_jsonl(task.dataset)
        if len(data) <= task.test_size:
            raise ConfigError("dataset is not larger than test_size")
    else:
        data = tasks.generate_dataset(task.data_seed, task.size, task.k_range,
                                      task.num_range, task.target_range)
    blob = "\n".join(json.dumps(d.to_json(), sort_keys=True) for d in data)
    digest = hashlib.sha256(blob.encode()).hexdigest()
    train, test = tasks.split(data, task.test_size)
    return train, test, digest


def resolve_selection(params, patterns=None) -> list[str]:
    return select_names(params, default_patterns() if patterns is None else patterns)


# -- warm start -------------------------------------------------------------

def warmstart(policy: Policy, train, steps: int, lr: float, batch: int, seed: int) -> list[float]:
    """Supervised steps on random well-formed expressions over each prompt's numbers.

    This only teaches the answer format; demonstrations are mostly wrong, so
    the resulting policy starts RL with a low but nonzero success rate.
    """
    state = AdamState()
    losses = []
    for step in range(steps):
        rng = np.random.default_rng([seed, _WARM, step])
        idx = rng.integers(len(train), size=min(batch, len(train)))
        pairs = []
        for i in idx:
            inst = train[int(i)]
            demo = tasks.encode(tasks.random_expression(inst.numbers, rng)) + [tasks.EOS]
            pairs.append((tasks.encode_prompt(inst), [demo]))
        packed = pack(pairs)
        lp, _, tape = response_logprobs(policy, packed)
        n_tok = sum(len(x) for g in lp for x in g)
        losses.append(-sum(float(np.sum(x)) for g in lp for x in g) / n_tok)
        w = packed.scatter([[np.full(len(x), 1.0 / n_tok) for x in g] for g in lp])
        grads = M.backward(tape, policy.cfg, policy.params, packed.targets, w)
        optimizer_step(policy.params, {k: -g for k, g in grads.items()}, state, lr,
                       grad_clip=1.0)
    return losses


# -- evaluation -------------------------------------------------------------

def evaluate_policy(policy: Policy, instances, max_new_tokens: int, grammar: str = "infix",
                    pass_ks=(), samples: int = 8, seed: int = 0, step: int = 0,
                    temperature: float = 1.0, top_p: float = 1.0) -> dict:
    """Greedy accuracy over ``instances`` plus unbiased pass@k from ``samples`` draws each."""
    prompts = [tasks.encode_prompt(x) for x in instances]
    outs = M.generate(policy.cfg, policy.params, prompts, max_new_tokens, greedy=True,
                      eos_id=tasks.EOS, pad_id=tasks.PAD, adapters=policy.adapters)
    c = sum(tasks.verify(x, o, grammar) for x, o in zip(instances, outs))
    res = {"n": len(instances), "c": int(c), "accuracy": c / len(instances) if instances else 0.0}
    if pass_ks:
        rep = [p for p in prompts for _ in range(samples)]
        rngs = [np.random.default_rng([seed, _EVAL, step, j, i])
                for j in range(len(prompts)) for i in range(samples)]
        outs = M.generate(policy.cfg, policy.params, rep, max_new_tokens, rngs=rngs,
                          temperature=temperature, top_p=top_p, eos_id=tasks.EOS,
                          pad_id=tasks.PAD, adapters=policy.adapters)
        counts = []
        for j, x in enumerate(instances):
            block = outs[j * samples:(j + 1) * samples]
            counts.append(sum(tasks.verify(x, o, grammar) for o in block))
        res["pass_samples"] = samples
        res["pass_counts"] = [int(k) for k in counts]
        res["pass_at_k"] = {
            str(k): float(np.mean([tasks.pass_at_k(samples, ci, k) for ci in counts]))
            for k in pass_ks
        }
    return res


# -- main loop --------------------------------------------------------------

def _collect(policy, train, cfg, reward_cfg, seed, step, recorder):
    algo, sched = cfg.algo, cfg.schedule
    rng = np.random.default_rng([seed, _PROMPTS, step])
    want = sched.batch_prompts
    if not algo.dynamic_sampling:
        inst = [train[int(i)] for i in rng.integers(len(train), size=want)]
        groups = rollout(policy, inst, algo, reward_cfg, seed, step)
        return groups, groups
    cap = algo.resample_cap * want
    kept, drawn_groups, drawn = [], [], 0
    while len(kept) < want:
        if drawn >= cap:
            msg = str(ResampleCapExceeded(
                f"step {step}: {len(kept)}/{want} informative groups after {drawn} prompts"))
            log.warning(msg)
            recorder.event("resample_cap_exceeded", step, kept=len(kept), drawn=drawn)
            break
        n = min(want - len(kept), cap - drawn)
        inst = [train[int(i)] for i in rng.integers(len(train), size=n)]
        gs = rollout(policy, inst, algo, reward_cfg, seed, step, index_offset=drawn)
        drawn += n
        drawn_groups += gs
        kept += [g for g in gs if dynamic_sampling_filter(g)]
    return kept, drawn_groups


def _batch_stats(groups) -> dict:
    rewards = np.concatenate([g.rewards for g in groups])
    correct = np.concatenate([g.correct for g in groups])
    lengths = [n for g in groups for n in g.lengths]
    ent = [e for g in groups for x in (g.entropies or []) for e in x]
    return {
        "mean_reward": float(rewards.mean()),
        "train_accuracy": float(correct.mean()),
        "n_responses": int(rewards.size),
        "mean_length": float(np.mean(lengths)),
        "entropy": float(np.mean(ent)) if ent else None,
    }


def _trainables(policy: Policy, lora: bool) -> dict:
    if lora:
        out = {}
        for name, ad in policy.adapters.items():
            out[f"{name}.lora_A"] = ad.A
            out[f"{name}.lora_B"] = ad.B
        return out
    return policy.params


def _nan_abort(recorder, step, objective, grads, policy):
    bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    info = {"objective": objective if np.isfinite(objective) else str(objective),
            "nonfinite_grads": bad}
    recorder.event("nan_abort", step, **info)
    if recorder.out is not None:
        (recorder.out / "nan_dump.json").write_text(
            json.dumps({"step": step, **info}, indent=1, sort_keys=True))
        try:
            recorder.snapshot(policy, step, name=f"nan_step{step}.ckpt")
        except Exception as exc:  # params themselves may be non-finite
            log.error("could not snapshot at NaN abort: %s", exc)
    raise NaNLoss(f"non-finite objective or gradient at step {step}: {bad or objective}")


def train(cfg, out_dir=None) -> TrainResult:
    """Run the configured protocol; returns telemetry rows, events and the final policy.

    Row ``s`` describes the policy after ``s`` updates: the loss statistics of
    update ``s``, whether a substitution followed it, and the reward of a fresh
    rollout batch (which then drives update ``s + 1``). Substitution runs right
    after updates that are a multiple of K, and ``step{N}.ckpt`` holds the
    parameters after N updates (post-substitution).
    """
    out = Path(out_dir) if out_dir is not None else None
    algo, sched = cfg.algo, cfg.schedule
    reward_cfg = cfg.task.reward_config()
    seed = cfg.seed
    run_id = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    recorder = Recorder(out, sched.pass_at_k, {"seed": seed, "run_id": run_id, "mode": cfg.mode})
    if out is not None:
        (out / "resolved_config.json").write_text(
            json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    train_set, test_set, digest = load_data(cfg.task)
    test_eval = test_set[:sched.eval_size] if sched.eval_size else test_set
    mcfg = replace(cfg.model, seed=seed)
    if mcfg.vocab_size < tasks.VOCAB_SIZE:
        raise ConfigError(f"model vocab_size must be >= {tasks.VOCAB_SIZE}")
    policy = Policy(mcfg, M.init(mcfg))
    recorder.event("start", 0, mode=cfg.mode, algo=algo.algo, dataset_sha256=digest,
                   n_train=len(train_set), n_test=len(test_set))

    if cfg.warmstart.steps:
        losses = warmstart(policy, train_set, cfg.warmstart.steps, cfg.warmstart.lr,
                           cfg.warmstart.batch, seed)
        recorder.event("warmstart", 0, steps=cfg.warmstart.steps,
                       first_loss=losses[0], last_loss=losses[-1])
    base = {k: v.copy() for k, v in policy.params.items()}
    selection = resolve_selection(policy.params, cfg.selection)

    lora = cfg.mode == "lora"
    lr = algo.lr
    if lora:
        policy.adapters = M.attach_lora(policy.params, selection, cfg.lora.r, cfg.lora.alpha,
                                        seed=seed, std=cfg.lora.std)
        lr = cfg.lora.lr if cfg.lora.lr is not None else algo.lr
    period = algo.substitution_period if cfg.mode == "periodic-rank1" else 0
    ref = Policy(mcfg, {k: v.copy() for k, v in base.items()}) if algo.beta > 0 else None
    state = AdamState()
    recorder.snapshot(policy, 0)

    pending = {"substituted": False}
    for step in range(sched.steps + 1):
        groups, drawn = _collect(policy, train_set, cfg, reward_cfg, seed, step, recorder)
        row = {"step": step, "n_groups": len(groups), **_batch_stats(drawn), **pending}
        if step == 0 or (sched.eval_interval and step % sched.eval_interval == 0) \
                or step == sched.steps:
            ev = evaluate_policy(policy, test_eval, algo.max_new_tokens, reward_cfg.grammar,
                                 sched.pass_at_k, sched.pass_samples, seed, step,
                                 algo.temperature, algo.top_p)
            row.update(test_accuracy=ev["accuracy"], test_n=ev["n"], test_c=ev["c"])
            for k, v in ev.get("pass_at_k", {}).items():
                row[f"pass@{k}"] = v
            recorder.event("eval", step, **{k: v for k, v in ev.items() if k != "pass_counts"})
        recorder.row(row)
        if step == sched.steps:
            break

        done = step + 1
        pending = {"substituted": False}
        if groups:
            for epoch in range(algo.inner_epochs):
                res = policy_loss(groups, policy, algo, ref)
                grads = policy_gradients(res, policy)
                params_t = _trainables(policy, lora)
                grads = {k: grads[k] for k in params_t}
                gnorm = global_norm(grads)
                if not np.isfinite(res.objective) or not np.isfinite(gnorm):
                    _nan_abort(recorder, done, res.objective, grads, policy)
                optimizer_step(params_t, {k: -g for k, g in grads.items()}, state, lr,
                               algo.adam_betas, algo.adam_eps, algo.weight_decay,
                               algo.grad_clip)
                if epoch == 0:
                    pending.update(objective=res.objective, loss=res.loss, grad_norm=gnorm,
                                   **{k: res.stats[k] for k in ("clip_fraction", "mean_ratio",
                                                                "kl")})
        else:
            recorder.event("skipped_update", done, reason="no informative groups")

        if is_substitution_step(done, period):
            records = periodic_rank1_substitute(base, policy.params, selection, algo.rescale)
            if algo.reset_optimizer:
                state.reset()
            if ref is not None and algo.ref == "post-substitution":
                ref = Policy(mcfg, {k: v.copy() for k, v in policy.params.items()})
            recorder.event("substitution", done, layers=[r.to_json() for r in records])
            pending["substituted"] = True
        if sched.snapshot_interval and done % sched.snapshot_interval == 0:
            recorder.snapshot(policy, done, substituted=str(pending["substituted"]).lower())

    recorder.event("end", sched.steps)
    return TrainResult(rows=recorder.rows, events=recorder.events, policy=policy,
                       base_params=base, train=train_set, test=test_set, out_dir=out)
