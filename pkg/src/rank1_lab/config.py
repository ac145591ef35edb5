"""Run configuration: JSON blocks validated on load, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .rl.config import AlgoConfig
from .tasks import RewardConfig

MODES = ("full", "periodic-rank1", "lora")


def _strict(cls, d, block):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{block} block must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {block} block: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{block} block: {exc}") from exc


@dataclass(frozen=True)
class TaskConfig:
    dataset: str | None = None  # JSON-lines file; generated from the fields below when unset
    size: int = 2000
    data_seed: int = 0
    k_range: tuple[int, int] = (2, 3)
    num_range: tuple[int, int] = (1, 20)
    target_range: tuple[int, int] = (1, 100)
    test_size: int = 200
    reward: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "k_range", tuple(self.k_range))
        object.__setattr__(self, "num_range", tuple(self.num_range))
        object.__setattr__(self, "target_range", tuple(self.target_range))
        if self.size < 1 or not 0 < self.test_size < self.size:
            raise ConfigError("need size >= 1 and 0 < test_size < size")
        self.reward_config()

    def reward_config(self) -> RewardConfig:
        return _strict(RewardConfig, self.reward, "task.reward")


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 300
    batch_prompts: int = 32
    eval_interval: int = 50
    eval_size: int | None = None  # None: whole held-out split
    snapshot_interval: int = 10
    pass_at_k: tuple[int, ...] = ()
    pass_samples: int = 8

    def __post_init__(self):
        object.__setattr__(self, "pass_at_k", tuple(int(k) for k in self.pass_at_k))
        if self.steps < 0 or self.batch_prompts < 1:
            raise ConfigError("steps must be >= 0 and batch_prompts >= 1")
        if self.eval_interval < 0 or self.snapshot_interval < 0:
            raise ConfigError("intervals must be >= 0")
        if any(k < 1 or k > self.pass_samples for k in self.pass_at_k):
            raise ConfigError("pass@k needs 1 <= k <= pass_samples")


@dataclass(frozen=True)
class WarmstartConfig:
    """Supervised format warm-start run before RL (0 steps disables it)."""
    steps: int = 150
    lr: float = 3e-3
    batch: int = 32


@dataclass(frozen=True)
class LoraConfig:
    r: int = 1
    alpha: float = 1.0
    std: float = 0.02
    lr: float | None = None  # None: algo.lr


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    warmstart: WarmstartConfig = field(default_factory=WarmstartConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    mode: str = "full"
    selection: tuple[str, ...] | None = None  # glob patterns; None: all linear projections
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.selection is not None:
            object.__setattr__(self, "selection", tuple(self.selection))

    def to_dict(self) -> dict:
        d = {
            "task": _plain(asdict(self.task)),
            "model": self.model.to_dict(),
            "algo": self.algo.to_dict(),
            "schedule": _plain(asdict(self.schedule)),
            "warmstart": asdict(self.warmstart),
            "lora": asdict(self.lora),
            "mode": self.mode,
            "selection": list(self.selection) if self.selection is not None else None,
            "out": self.out,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        model = d.get("model") or {}
        if not isinstance(model, dict):
            raise ConfigError("model block must be an object")
        try:
            mcfg = ModelConfig.from_dict(model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model block: {exc}") from exc
        kw = {k: d[k] for k in ("mode", "selection", "out", "seed") if k in d}
        return cls(
            task=_strict(TaskConfig, d.get("task"), "task"),
            model=mcfg,
            algo=_strict(AlgoConfig, d.get("algo"), "algo"),
            schedule=_strict(ScheduleConfig, d.get("schedule"), "schedule"),
            warmstart=_strict(WarmstartConfig, d.get("warmstart"), "warmstart"),
            lora=_strict(LoraConfig, d.get("lora"), "lora"),
            **kw,
        )

    def override(self, **blocks) -> "RunConfig":
        """Return a copy with block fields replaced, e.g. ``override(algo={"G": 4})``."""
        d = self.to_dict()
        for key, val in blocks.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **val}
            else:
                d[key] = val
        return RunConfig.from_dict(d)


def _plain(d):
    return json.loads(json.dumps(d))


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def write_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


__all__ = ["RunConfig", "TaskConfig", "ScheduleConfig", "WarmstartConfig", "LoraConfig",
           "load_config", "write_resolved", "MODES"]
