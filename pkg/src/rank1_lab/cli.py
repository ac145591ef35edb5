"""rank1-lab command line: data, training, spectra, rank-1 extraction, alignment, eval."""
from __future__ import annotations

import argparse
import contextlib
import glob
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import alignment as AL
from . import checkpoint as C
from . import model as M
from . import plotting, spectral, tasks
from .config import MODES, RunConfig, load_config
from .errors import ConfigError, Rank1LabError

log = logging.getLogger("rank1_lab")


class UsageError(Exception):
    """Bad flags or missing inputs; exit code 2."""


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text: str) -> tuple[int, int]:
    vals = _csv_ints(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return vals


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _reports(out: Path) -> Path:
    d = out / "reports"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@contextlib.contextmanager
def _thread_cap(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    if not 0 <= args.test_size < args.size:
        raise UsageError("--test-size must be in [0, size)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = tasks.generate_dataset(args.seed, args.size, args.k_range, args.num_range,
                                  args.target_range)
    digest = tasks.write_jsonl(data, out / "dataset.jsonl")
    manifest = {
        "file": "dataset.jsonl", "sha256": digest, "size": len(data), "seed": args.seed,
        "k_range": list(args.k_range), "num_range": list(args.num_range),
        "target_range": list(args.target_range), "vocab": list(tasks.VOCAB),
        "split": {"train_ids": [0, args.size - args.test_size - 1],
                  "test_ids": [args.size - args.test_size, args.size - 1]
                  if args.test_size else None},
    }
    _dump(manifest, out / "manifest.json")
    print(f"wrote {len(data)} instances to {out / 'dataset.jsonl'} (sha256 {digest[:16]})")
    return 0


# -- train --------------------------------------------------------------------

def _parse_set(items) -> dict:
    blocks: dict = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects BLOCK.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        parts = key.split(".")
        if len(parts) == 1:
            blocks[parts[0]] = val
        elif len(parts) == 2:
            blocks.setdefault(parts[0], {})[parts[1]] = val
        else:
            raise UsageError(f"--set key too deep: {key!r}")
    return blocks


def resolve_train_config(args) -> RunConfig:
    cfg = load_config(_need_file(args.config, "config")) if args.config else RunConfig()
    over = _parse_set(args.set)
    top = {k: over.pop(k) for k in list(over) if not isinstance(over[k], dict)}
    algo = dict(over.pop("algo", {}))
    sched = dict(over.pop("schedule", {}))
    if args.mode:
        top["mode"] = args.mode
    if args.k is not None:
        algo["substitution_period"] = args.k
    if args.algo:
        algo["algo"] = args.algo
    if args.lr is not None:
        algo["lr"] = args.lr
    if args.steps is not None:
        sched["steps"] = args.steps
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out:
        top["out"] = args.out
    return cfg.override(algo=algo, schedule=sched, **over, **top)


def cmd_train(args) -> int:
    from .rl.trainer import train
    cfg = resolve_train_config(args)
    out = Path(cfg.out)
    res = train(cfg, out)
    subs = [e["step"] for e in res.events if e["event"] == "substitution"]
    last = res.rows[-1]
    if args.svg:
        rows = res.rows
        plotting.write_svg(_reports(out) / "reward.svg", {
            "train reward": ([r["step"] for r in rows], [r["mean_reward"] for r in rows]),
            "test accuracy": ([r["step"] for r in rows if r.get("test_accuracy") is not None],
                              [r["test_accuracy"] for r in rows
                               if r.get("test_accuracy") is not None]),
        }, title=f"{cfg.algo.algo} / {cfg.mode}", xlabel="step", ylabel="value")
    digest = hashlib.sha256((out / "telemetry.csv").read_bytes()).hexdigest()
    print(f"steps={cfg.schedule.steps} final_reward={last['mean_reward']:.4f} "
          f"test_accuracy={last.get('test_accuracy')} substitutions={subs} "
          f"telemetry_sha256={digest[:16]}")
    return 0


# -- spectrum -----------------------------------------------------------------

_STEP = re.compile(r"step(\d+)\.ckpt$")


def _spectrum_one(base, tuned, args, dest: Path, label: str) -> spectral.SpectrumReport:
    ds = C.delta(base, tuned)
    if not args.all_2d:
        ds = C.select_linear(ds, C.default_patterns(args.include_embeddings))
    if not ds.entries:
        raise UsageError("no 2-D layers selected")
    report = spectral.spectrum(ds, tail_skip=args.tail_skip, tau=args.tau)
    report.metadata.update(label=label, skipped=ds.skipped_names)
    dest.mkdir(parents=True, exist_ok=True)
    spectral.write_spectrum_json(report, dest / "spectrum.json")
    spectral.write_spectrum_csv(report, dest / "spectrum.csv")
    degenerate = [r.name for r in report.rows if r.degenerate]
    if degenerate:
        log.warning("%s: %d degenerate layer(s)", label, len(degenerate))
    if args.table:
        table = spectral.sigma_ratio_table(report, args.max_ratio, args.top_k)
        spectral.write_ratio_table_csv(table, dest / "sigma_table.csv")
    if args.svg:
        series = {r.name.replace("layers.", "L"): (np.arange(1, r.singular_values.size + 1),
                                                   r.singular_values)
                  for r in report.rows if not r.degenerate}
        plotting.write_svg(dest / "spectrum.svg", series, title=f"singular values ({label})",
                           xlabel="index", ylabel="sigma", logy=True)
    return report


def cmd_spectrum(args) -> int:
    out = Path(args.out)
    rep = _reports(out)
    if args.series:
        sdir = Path(args.series)
        if not sdir.is_dir():
            raise UsageError(f"snapshot directory not found: {sdir}")
        base_path = _need_file(args.base or sdir / "step0.ckpt", "base checkpoint")
        base = C.load(base_path)
        snaps = sorted(((int(_STEP.search(p).group(1)), p) for p in glob.glob(str(sdir / "step*.ckpt"))
                        if _STEP.search(p)), key=lambda t: t[0])
        snaps = [(n, p) for n, p in snaps if n > 0 and Path(p).resolve() != base_path.resolve()]
        if not snaps:
            raise UsageError(f"no step*.ckpt snapshots in {sdir}")
        index = []
        for n, p in snaps:
            r = _spectrum_one(base, C.load(p), args, rep / f"step{n}", f"step{n}")
            index.append({"step": n, "layers": len(r.rows),
                          "degenerate": sum(x.degenerate for x in r.rows)})
        _dump({"series": index}, rep / "series.json")
        print(f"wrote {len(index)} spectrum reports under {rep}")
        return 0
    if not args.base or not args.tuned:
        raise UsageError("spectrum needs --base and --tuned (or --series DIR)")
    base = C.load(_need_file(args.base, "base checkpoint"))
    tuned = C.load(_need_file(args.tuned, "tuned checkpoint"))
    r = _spectrum_one(base, tuned, args, rep, "tuned")
    n_deg = sum(x.degenerate for x in r.rows)
    print(f"{len(r.rows)} layers, {n_deg} degenerate; reports in {rep}")
    return 0


# -- extract-rank1 ------------------------------------------------------------

def cmd_extract_rank1(args) -> int:
    base = C.load(_need_file(args.base, "base checkpoint"))
    tuned = C.load(_need_file(args.tuned, "tuned checkpoint"))
    patterns = C.default_patterns(args.include_embeddings)
    r1 = spectral.build_rank1_model(base, tuned, patterns, others=args.others,
                                    rescale=not args.no_rescale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save(r1, out / "rank1.ckpt")
    replaced = json.loads(r1.metadata["rank1_layers"])
    degenerate = json.loads(r1.metadata["rank1_degenerate"])
    inv = spectral.rank1_invariants(base, r1, tuned, replaced)
    _dump({"layers": inv, "degenerate": degenerate, "others": args.others,
           "rescale": not args.no_rescale}, _reports(out) / "rank1_invariants.json")
    if degenerate:
        print(f"warning: {len(degenerate)} degenerate layer(s) copied from base", file=sys.stderr)
    print(f"wrote {out / 'rank1.ckpt'}: {len(replaced)} rank-1 layers, "
          f"{len(degenerate)} degenerate")
    return 0


# -- align --------------------------------------------------------------------

def cmd_align(args) -> int:
    lora_ck = C.load(_need_file(args.lora, "LoRA checkpoint"))
    base = C.load(_need_file(args.base, "base checkpoint"))
    tuned = C.load(_need_file(args.tuned, "tuned checkpoint"))
    _, _, adapters = M.restore(lora_ck)
    if not adapters:
        raise UsageError(f"{args.lora} carries no LoRA adapters")
    ds = C.delta(base, tuned)
    rows = AL.align_report(adapters, ds)
    dest = _reports(Path(args.out))
    AL.write_alignment_csv(rows, dest / "alignment.csv")
    AL.write_alignment_json(rows, dest / "alignment.json")
    tl = np.mean([r.theta_left for r in rows])
    tr = np.mean([r.theta_right for r in rows])
    print(f"{len(rows)} layers; mean theta_left={tl:.4f} rad, mean theta_right={tr:.4f} rad")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .rl.rollout import Policy
    from .rl.trainer import evaluate_policy
    ck = C.load(_need_file(args.ckpt, "model checkpoint"))
    cfg, params, adapters = M.restore(ck)
    if args.data:
        data = tasks.read_jsonl(_need_file(args.data, "dataset"))
    else:
        data = tasks.generate_dataset(0, 2000, (2, 3))
    if args.split == "all":
        split = data
    else:
        if not 0 < args.test_size < len(data):
            raise UsageError("--test-size must be in (0, dataset size)")
        train_set, test_set = tasks.split(data, args.test_size)
        split = test_set if args.split == "test" else train_set
    ks = args.pass_at_k or ()
    if any(k > args.samples for k in ks):
        raise UsageError("every --pass-at-k value must be <= --samples")
    res = evaluate_policy(Policy(cfg, params, adapters or None), split, args.max_new_tokens,
                          args.grammar, ks, args.samples, args.seed, 0, args.temperature,
                          args.top_p)
    res.update(checkpoint=str(args.ckpt), split=args.split)
    res.pop("pass_counts", None)
    _dump(res, _reports(Path(args.out)) / "eval.json")
    print(json.dumps({k: res[k] for k in ("n", "c", "accuracy")} |
                     ({"pass_at_k": res["pass_at_k"]} if ks else {}), sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rank1-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (env RANK1_LAB_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a countdown dataset")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k-range", type=_pair, default=(3, 4), help="numbers per instance LO,HI")
    g.add_argument("--num-range", type=_pair, default=(1, 20))
    g.add_argument("--target-range", type=_pair, default=(1, 100))
    g.add_argument("--test-size", type=int, default=0,
                   help="record a held-out split of the last N instances in the manifest")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="RL training run")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--k", type=int, help="substitution period for periodic-rank1")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--algo", choices=("GRPO", "DAPO", "GSPO"))
    t.add_argument("--lr", type=float)
    t.add_argument("--set", action="append", metavar="BLOCK.KEY=VALUE",
                   help="override any config field, value parsed as JSON when possible")
    t.add_argument("--svg", action="store_true", help="also write reports/reward.svg")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("spectrum", help="singular spectra of checkpoint deltas")
    s.add_argument("--base")
    s.add_argument("--tuned")
    s.add_argument("--series", help="directory of step{N}.ckpt snapshots")
    s.add_argument("--table", action="store_true", help="write the sigma ratio table")
    s.add_argument("--max-ratio", type=float, default=0.70)
    s.add_argument("--top-k", type=int, default=7)
    s.add_argument("--tail-skip", type=int, default=1)
    s.add_argument("--tau", type=float, default=0.01)
    s.add_argument("--include-embeddings", action="store_true")
    s.add_argument("--all-2d", action="store_true", help="analyze every 2-D tensor")
    s.add_argument("--svg", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)

    e = sub.add_parser("extract-rank1", help="build base + rescaled rank-1 delta model")
    e.add_argument("--base", required=True)
    e.add_argument("--tuned", required=True)
    e.add_argument("--others", choices=("tuned", "base"), default="tuned")
    e.add_argument("--no-rescale", action="store_true")
    e.add_argument("--include-embeddings", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract_rank1)

    a = sub.add_parser("align", help="LoRA vs full fine-tune alignment report")
    a.add_argument("--lora", required=True, help="checkpoint carrying rank-1 adapters")
    a.add_argument("--base", required=True, help="full fine-tune base checkpoint")
    a.add_argument("--tuned", required=True, help="full fine-tune tuned checkpoint")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_align)

    v = sub.add_parser("eval", help="greedy accuracy and pass@k of a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", help="JSON-lines dataset (default: generated toy set)")
    v.add_argument("--split", choices=("test", "train", "all"), default="test")
    v.add_argument("--test-size", type=int, default=200)
    v.add_argument("--pass-at-k", type=_csv_ints, default=())
    v.add_argument("--samples", type=int, default=8)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-new-tokens", type=int, default=12)
    v.add_argument("--temperature", type=float, default=1.0)
    v.add_argument("--top-p", type=float, default=1.0)
    v.add_argument("--grammar", choices=("infix", "postfix"), default="infix")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get("RANK1_LAB_THREADS"):
        try:
            threads = int(os.environ["RANK1_LAB_THREADS"])
        except ValueError:
            print("error: RANK1_LAB_THREADS must be an integer", file=sys.stderr)
            return 2
    try:
        with _thread_cap(threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (Rank1LabError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
