"""Periodic replacement of each selected layer's update by its rescaled rank-1 part."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateDelta
from ..spectral import extract_rank1

log = logging.getLogger(__name__)


@dataclass
class SubstitutionRecord:
    name: str
    sigma1: float
    delta_norm: float
    scale: float
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"name": self.name, "sigma1": self.sigma1, "delta_norm": self.delta_norm,
                "scale": self.scale, "degenerate": self.degenerate}


def is_substitution_step(step: int, period: int) -> bool:
    return period > 0 and step > 0 and step % period == 0


def periodic_rank1_substitute(base: dict, params: dict, names, rescale: bool = True):
    """Set ``params[n] = base[n] + rank1(params[n] - base[n])`` for each selected n, in place.

    Layers whose delta is numerically zero are left untouched. Returns one
    record per layer.
    """
    records = []
    for name in sorted(names):
        dw = params[name] - base[name]
        try:
            upd = extract_rank1(dw, name=name, rescale=rescale)
        except DegenerateDelta:
            log.debug("skipping %s: delta is degenerate", name)
            records.append(SubstitutionRecord(name, 0.0, float(np.linalg.norm(dw)), 1.0, True))
            continue
        params[name] = base[name] + upd.materialize()
        records.append(SubstitutionRecord(name, upd.sigma1, upd.norm, upd.scale))
    return records
