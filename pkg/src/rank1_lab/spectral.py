"""Rank-1 extraction, rank-1 model construction and singular-spectrum reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import linalg
from .checkpoint import Checkpoint, DeltaSet, default_patterns, matches
from .errors import DegenerateDelta, DegenerateMatrix, TooFewValues

log = logging.getLogger(__name__)


@dataclass
class Rank1Update:
    name: str
    sigma1: float
    u1: np.ndarray
    v1: np.ndarray
    scale: float  # |dW|_F / sigma1 when rescaled, else 1

    def materialize(self) -> np.ndarray:
        return (self.scale * self.sigma1) * np.outer(self.u1, self.v1)

    @property
    def norm(self) -> float:
        return self.scale * self.sigma1


def extract_rank1(dw, name: str = "", rescale: bool = True) -> Rank1Update:
    """Top singular component of ``dw``, rescaled to carry the full Frobenius norm."""
    dw = linalg.as_matrix(dw, name or "delta")
    try:
        sigma1, u1, v1 = linalg.rank1_triple(dw)
    except DegenerateMatrix as exc:
        raise DegenerateDelta(f"{name or 'delta'}: {exc}") from exc
    scale = linalg.frobenius_norm(dw) / sigma1 if rescale else 1.0
    return Rank1Update(name=name, sigma1=sigma1, u1=u1, v1=v1, scale=scale)


def build_rank1_model(
    base: Checkpoint,
    tuned: Checkpoint,
    selection: Sequence[str] | None = None,
    others: str = "tuned",
    rescale: bool = True,
) -> Checkpoint:
    """base + rescaled rank-1 delta on every selected 2-D layer.

    Parameters outside the selection take the ``tuned`` values (or ``base``
    with ``others="base"``). Layers whose delta is numerically zero are
    copied from base and listed under the ``rank1_degenerate`` metadata key.
    """
    if others not in ("tuned", "base"):
        raise ValueError(f"others must be 'tuned' or 'base', got {others!r}")
    patterns = default_patterns() if selection is None else tuple(selection)
    out: dict[str, np.ndarray] = {}
    replaced, degenerate = [], []
    for name in sorted(tuned.tensors):
        t = tuned.tensors[name]
        b = base.tensors.get(name)
        selected = (
            b is not None and b.shape == t.shape and t.ndim == 2 and matches(name, patterns)
        )
        if not selected:
            src = b if (others == "base" and b is not None) else t
            out[name] = src.copy()
            continue
        dw = t.astype(np.float64) - b.astype(np.float64)
        try:
            upd = extract_rank1(dw, name=name, rescale=rescale)
        except DegenerateDelta:
            log.warning("layer %s has a degenerate delta; copied from base", name)
            degenerate.append(name)
            out[name] = b.copy()
            continue
        out[name] = b.astype(np.float64) + upd.materialize()
        replaced.append(name)
    if others == "base":
        for name in sorted(set(base.tensors) - set(tuned.tensors)):
            out[name] = base.tensors[name].copy()
    meta = dict(tuned.metadata)
    meta.update(
        rank1_selection=json.dumps(list(patterns)),
        rank1_others=others,
        rank1_rescale=str(bool(rescale)).lower(),
        rank1_layers=json.dumps(replaced),
        rank1_degenerate=json.dumps(degenerate),
    )
    return Checkpoint(tensors=out, metadata=meta)


def tail_fit(s, skip: int = 1) -> tuple[float, float]:
    """Least-squares line through (i, s_i) for 1-based i > skip; returns (slope, r2)."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size - skip < 3:
        raise TooFewValues(f"need at least 3 values after skipping {skip}, have {s.size - skip}")
    y = s[skip:]
    x = np.arange(skip + 1, s.size + 1, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float(np.dot(xc, yc) / np.dot(xc, xc))
    ss_tot = float(np.dot(yc, yc))
    resid = yc - slope * xc
    ss_res = float(np.dot(resid, resid))
    # a constant tail is perfectly explained by a flat line
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return slope, r2


@dataclass
class SpectrumRow:
    name: str
    shape: tuple[int, int]
    singular_values: np.ndarray
    effective_rank: float
    threshold_rank: int
    sigma_ratios: np.ndarray
    tail_slope: float | None
    tail_r2: float | None
    degenerate: bool = False

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "degenerate": self.degenerate,
            "singular_values": [float(x) for x in self.singular_values],
            "sigma_ratios": [float(x) for x in self.sigma_ratios],
            "effective_rank": self.effective_rank,
            "threshold_rank": self.threshold_rank,
            "tail_slope": self.tail_slope,
            "tail_r2": self.tail_r2,
        }


@dataclass
class SpectrumReport:
    rows: list[SpectrumRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, name: str) -> SpectrumRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.rows]


def spectrum_row(name: str, m, tail_skip: int = 1, tau: float = 0.01) -> SpectrumRow:
    m = linalg.as_matrix(m, name)
    s = linalg.svd(m).s
    shape = (int(m.shape[0]), int(m.shape[1]))
    if s[0] < linalg.DEGENERATE_RTOL * max(1.0, linalg.frobenius_norm(m)):
        k = s.size
        return SpectrumRow(name, shape, np.zeros(k), 0.0, 0, np.zeros(k), None, None, True)
    try:
        slope, r2 = tail_fit(s, tail_skip)
    except TooFewValues:
        slope, r2 = None, None
    return SpectrumRow(
        name=name,
        shape=shape,
        singular_values=s,
        effective_rank=linalg.effective_rank(s),
        threshold_rank=linalg.threshold_rank(s, tau),
        sigma_ratios=s / s[0],
        tail_slope=slope,
        tail_r2=r2,
    )


def spectrum(ds: DeltaSet, tail_skip: int = 1, tau: float = 0.01) -> SpectrumReport:
    """Per-layer singular spectra of every 2-D entry, ordered by layer name."""
    if not ds.entries:
        raise ValueError("delta set is empty")
    rows = [
        spectrum_row(name, ds.entries[name], tail_skip, tau)
        for name in sorted(ds.entries)
        if np.ndim(ds.entries[name]) == 2
    ]
    return SpectrumReport(rows=rows, metadata={"tail_skip": tail_skip, "tau": tau})


@dataclass
class RatioRow:
    name: str
    percentages: list[float]

    def cells(self) -> list[str]:
        return [f"{p:.2f}%" for p in self.percentages]

    def format(self) -> str:
        return ", ".join(self.cells())


@dataclass
class RatioTable:
    rows: list[RatioRow]
    excluded_degenerate: list[str]
    max_ratio: float
    top_k: int


def sigma_ratio_table(report: SpectrumReport, max_ratio: float = 0.70, top_k: int = 7) -> RatioTable:
    """Layers with sigma2/sigma1 <= max_ratio, top_k values as % of sigma1."""
    rows, degenerate = [], []
    for r in report.rows:
        if r.degenerate:
            degenerate.append(r.name)
            continue
        s = r.singular_values
        if s.size >= 2 and s[1] / s[0] > max_ratio:
            continue
        pct = [float(100.0 * x / s[0]) for x in s[:top_k]]
        rows.append(RatioRow(r.name, pct))
    return RatioTable(rows=rows, excluded_degenerate=degenerate, max_ratio=max_ratio, top_k=top_k)


def row_from_values(name: str, s) -> SpectrumRow:
    """Wrap an explicit spectrum (e.g. published values) as a report row."""
    s = np.sort(np.asarray(s, dtype=np.float64))[::-1]
    try:
        slope, r2 = tail_fit(s)
    except TooFewValues:
        slope, r2 = None, None
    return SpectrumRow(
        name, (s.size, s.size), s, linalg.effective_rank(s), linalg.threshold_rank(s),
        s / s[0], slope, r2,
    )


def write_spectrum_json(report: SpectrumReport, path) -> None:
    doc = {"metadata": report.metadata, "layers": [r.to_json() for r in report.rows]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and not math.isfinite(x):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_spectrum_csv(report: SpectrumReport, path, cap: int = 32) -> None:
    head = [
        "name", "rows", "cols", "degenerate", "effective_rank", "threshold_rank",
        "sigma1", "sigma2_over_sigma1", "tail_slope", "tail_r2",
    ] + [f"s{i}" for i in range(1, cap + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for r in report.rows:
            s = r.singular_values
            ratio2 = float(r.sigma_ratios[1]) if s.size > 1 else None
            vals = [_fmt(float(x)) for x in s[:cap]] + [""] * max(0, cap - s.size)
            w.writerow(
                [r.name, r.shape[0], r.shape[1], int(r.degenerate), _fmt(r.effective_rank),
                 r.threshold_rank, _fmt(float(s[0])), _fmt(ratio2), _fmt(r.tail_slope),
                 _fmt(r.tail_r2)] + vals
            )


def write_ratio_table_csv(table: RatioTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [f"sigma{i}" for i in range(1, table.top_k + 1)])
        for r in table.rows:
            cells = r.cells()
            w.writerow([r.name] + cells + [""] * (table.top_k - len(cells)))


def rank1_invariants(base: Checkpoint, rank1: Checkpoint, tuned: Checkpoint,
                     names: Iterable[str]) -> dict[str, dict[str, float]]:
    """Per-layer norm ratio and sigma2/sigma1 of (rank1 - base) vs (tuned - base)."""
    out = {}
    for name in names:
        b = base.tensors[name].astype(np.float64)
        ext = rank1.tensors[name].astype(np.float64) - b
        full = tuned.tensors[name].astype(np.float64) - b
        nf = linalg.frobenius_norm(full)
        out[name] = {
            "norm_ratio": linalg.frobenius_norm(ext) / nf if nf > 0 else float("nan"),
            "sigma_ratio": linalg.sigma_ratio(ext),
        }
    return out
