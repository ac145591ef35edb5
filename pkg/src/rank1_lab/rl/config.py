from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError

ALGOS = ("GRPO", "DAPO", "GSPO")
AGGREGATIONS = ("sample-mean", "token-mean")


@dataclass(frozen=True)
class AlgoConfig:
    algo: str = "GRPO"
    eps: float = 0.2
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.0
    G: int = 8
    dynamic_sampling: bool = False
    resample_cap: int = 10  # prompts drawn per batch slot before giving up
    aggregation: str | None = None  # None: sample-mean for GRPO/GSPO, token-mean for DAPO
    lr: float = 5e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    substitution_period: int = 10
    rescale: bool = True
    reset_optimizer: bool = True
    ref: str = "base"  # or "post-substitution"
    inner_epochs: int = 1
    temperature: float = 1.0
    top_p: float = 0.95
    max_new_tokens: int = 12
    greedy: bool = False

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}")
        if self.eps <= 0 or self.eps_low <= 0 or self.eps_high <= 0:
            raise ConfigError("clip ranges must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.G < 2:
            raise ConfigError("G must be >= 2")
        if self.substitution_period < 0:
            raise ConfigError("substitution_period must be >= 0")
        if self.aggregation is not None and self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.ref not in ("base", "post-substitution"):
            raise ConfigError("ref must be 'base' or 'post-substitution'")
        if self.inner_epochs < 1:
            raise ConfigError("inner_epochs must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    @property
    def resolved_aggregation(self) -> str:
        if self.aggregation:
            return self.aggregation
        return "token-mean" if self.algo == "DAPO" else "sample-mean"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown algo config keys: {sorted(unknown)}")
        return cls(**d)
