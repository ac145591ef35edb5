"""LoRA vs full fine-tune geometry, plus numerical checks of the rank-1 gradient laws."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import linalg
from . import model as M
from .checkpoint import DeltaSet
from .errors import RankMismatch


@dataclass
class AlignmentRow:
    name: str
    sigma1: float
    frob_cos: float
    hadamard_ratio: float
    theta_left: float
    theta_right: float
    rank: int = 1
    extension: bool = False  # r > 1: angles to the adapter column/row spaces

    def to_json(self) -> dict:
        return asdict(self)


PANEL_COLUMNS = ("name", "sigma1", "frob_cos", "theta_left", "theta_right",
                 "hadamard_ratio", "rank", "extension")


def align_layer(name: str, adapter: M.LoraAdapter, full_delta, allow_extension: bool = True
                ) -> AlignmentRow:
    r = adapter.r
    if r != 1 and not allow_extension:
        raise RankMismatch(f"{name}: adapter rank {r} != 1")
    dw = linalg.as_matrix(full_delta, name)
    sigma1, u1, v1 = linalg.rank1_triple(dw)
    top = sigma1 * np.outer(u1, v1)
    lora = adapter.delta()
    if r == 1:
        tl = linalg.principal_angle(adapter.A[:, 0], u1)
        tr = linalg.principal_angle(adapter.B[0], v1)
    else:
        tl = linalg.subspace_angle(adapter.A, u1)
        tr = linalg.subspace_angle(adapter.B.T, v1)
    return AlignmentRow(
        name=name, sigma1=sigma1,
        frob_cos=linalg.frob_cosine(lora, top),
        hadamard_ratio=linalg.hadamard_norm_ratio(lora, top),
        theta_left=tl, theta_right=tr, rank=r, extension=r != 1,
    )


def align_report(adapters: dict, full_delta: DeltaSet, allow_extension: bool = True
                 ) -> list[AlignmentRow]:
    """One row per adapter layer present in the full fine-tune delta, ordered by name."""
    missing = sorted(set(adapters) - set(full_delta.entries))
    if missing:
        raise KeyError(f"adapter layers missing from the full delta: {missing}")
    return [align_layer(n, adapters[n], full_delta.entries[n], allow_extension)
            for n in sorted(adapters)]


def write_alignment_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for r in rows:
            d = r.to_json()
            w.writerow([repr(d[c]) if isinstance(d[c], float) else
                        (int(d[c]) if isinstance(d[c], bool) else d[c]) for c in PANEL_COLUMNS])


def write_alignment_json(rows, path) -> None:
    doc = {"columns": list(PANEL_COLUMNS), "layers": [r.to_json() for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- gradient laws ------------------------------------------------------------

def _probe_layers(cfg: M.ModelConfig) -> list[str]:
    names = M.linear_names(cfg)
    return names + ([] if cfg.tie_embeddings else ["lm_head"])


def _sigma_ratio(g) -> tuple[float, int, bool]:
    s = linalg.singular_values(g)
    if s[0] <= 1e-300:
        return 0.0, 0, True
    return float(s[1] / s[0]) if s.size > 1 else 0.0, int(np.count_nonzero(s > 1e-10 * s[0])), False


@dataclass
class GradientRankRow:
    name: str
    active_tokens: int
    sigma_ratio: float  # sigma2 / sigma1, 0 for an exactly zero gradient
    numerical_rank: int
    zero: bool
    outer_residual: float  # |grad - sum_t delta_t x_t^T|_F / |grad|_F


def rank1_gradient_check(cfg: M.ModelConfig, seed: int = 0, active_tokens=(1, 3),
                         objective: str = "logprob") -> list[GradientRankRow]:
    """Weight gradients of a T-token objective on a seeded random model.

    With T=1 the prompt is a single token, so each linear layer sees a single
    input row and its gradient is exactly one outer product. With T > 1 the
    gradient is a sum of T outer products (rank <= T); ``outer_residual``
    confirms that decomposition from the recorded layer inputs and output
    gradients.
    """
    rng = np.random.default_rng([seed, 1])
    params = M.init(M.ModelConfig(**{**cfg.to_dict(), "seed": seed}))
    # break the init symmetry of unit norm weights so every path is exercised
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + 0.1 * rng.normal(size=v.shape)
    rows = []
    for T in active_tokens:
        tokens = rng.integers(cfg.vocab_size, size=(1, T))
        targets = rng.integers(cfg.vocab_size, size=(1, T))
        weights = rng.normal(size=(1, T))
        _, tape = M.forward(cfg, params, tokens)
        grads, outg = M.backward(tape, cfg, params, targets, weights, objective=objective,
                                 output_grads=True)
        for name in _probe_layers(cfg):
            g = grads[name]
            if name == "lm_head":
                h = tape.final_hidden
                probs = M._softmax(tape.logits)
                delta = -probs * weights[..., None]
                np.put_along_axis(delta, targets[..., None],
                                  np.take_along_axis(delta, targets[..., None], -1)
                                  + weights[..., None], -1)
                if objective == "prob":
                    p_t = np.take_along_axis(probs, targets[..., None], -1)
                    delta = delta * p_t
                recon = np.einsum("bto,bti->oi", delta, h)
            else:
                recon = np.einsum("bto,bti->oi", outg[name], tape.lin_in[name])
            ratio, rank, zero = _sigma_ratio(g)
            ng = linalg.frobenius_norm(g)
            resid = linalg.frobenius_norm(g - recon) / ng if ng > 0 else 0.0
            rows.append(GradientRankRow(name, int(T), ratio, rank, zero, resid))
    return rows


@dataclass
class LoraGradRow:
    name: str
    active_tokens: int
    cos_a_g: float  # |cos(grad_a, g)| at a single position
    cos_b_x: float
    oracle_err_a: float  # |grad_a - alpha * sum_t g_t (x_t . b)| relative to its norm
    oracle_err_b: float
    dispersion_a: float  # 1 - |cos(grad_a, g_last)| for T > 1
    dispersion_b: float
    span_residual_a: float  # 1 - |proj of grad_a onto span{g_t}| / |grad_a|
    grad_a_norm: float = 0.0
    grad_b_norm: float = 0.0


def _abs_cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(min(1.0, abs(np.dot(a, b)) / (na * nb)))


def _span_residual(vec, rows) -> float:
    nv = np.linalg.norm(vec)
    if nv == 0:
        return 0.0
    res = linalg.svd(np.asarray(rows).T)
    r = int(np.count_nonzero(res.s > 1e-12 * res.s[0]))
    proj = res.u[:, :r].T @ vec
    return float(max(0.0, 1.0 - np.linalg.norm(proj) / nv))


def lora_gradients(cfg: M.ModelConfig, params, adapters, tokens, targets, weights):
    _, tape = M.forward(cfg, params, tokens, adapters)
    grads, outg = M.backward(tape, cfg, params, targets, weights, adapters, output_grads=True)
    return grads, outg, tape


def lora_asymmetry_check(cfg: M.ModelConfig, seed: int = 0, active_tokens: int = 1,
                         alpha: float = 2.0, orthogonal_b: bool = False) -> list[LoraGradRow]:
    """Rank-1 adapter factor gradients compared with g (output grad) and x (input).

    ``orthogonal_b`` projects each B row orthogonal to the layer input at the
    single active position, the case where the scalar x.b vanishes.
    """
    rng = np.random.default_rng([seed, 2])
    params = M.init(M.ModelConfig(**{**cfg.to_dict(), "seed": seed}))
    names = M.linear_names(cfg)
    adapters = M.attach_lora(params, names, r=1, alpha=alpha, seed=seed, std=0.1)
    for ad in adapters.values():
        ad.B[:] = rng.normal(0.0, 0.1, ad.B.shape)
    T = int(active_tokens)
    tokens = rng.integers(cfg.vocab_size, size=(1, T))
    targets = rng.integers(cfg.vocab_size, size=(1, T))
    weights = rng.normal(size=(1, T))
    if orthogonal_b:
        if T != 1:
            raise ValueError("orthogonal_b needs a single active position")
        # inputs of later layers depend on earlier adapters, so project layer by layer
        for name in names:
            _, tape = M.forward(cfg, params, tokens, adapters)
            x = tape.lin_in[name][0, 0]
            b = adapters[name].B[0]
            adapters[name].B[0] = b - (b @ x) / (x @ x) * x
    grads, outg, tape = lora_gradients(cfg, params, adapters, tokens, targets, weights)
    rows = []
    for name in names:
        ad = adapters[name]
        a, b = ad.A[:, 0], ad.B[0]
        ga = grads[f"{name}.lora_A"][:, 0]
        gb = grads[f"{name}.lora_B"][0]
        g = outg[name][0]  # (T, d_out)
        x = tape.lin_in[name][0]  # (T, d_in)
        oracle_a = alpha * sum(g[t] * float(x[t] @ b) for t in range(T))
        oracle_b = alpha * sum(x[t] * float(g[t] @ a) for t in range(T))

        def rel(u, v):
            n = max(np.linalg.norm(v), 1e-300)
            return float(np.linalg.norm(u - v) / n) if np.linalg.norm(v) > 0 else float(
                np.linalg.norm(u))

        rows.append(LoraGradRow(
            name=name, active_tokens=T,
            cos_a_g=_abs_cos(ga, g[-1]), cos_b_x=_abs_cos(gb, x[-1]),
            oracle_err_a=rel(ga, oracle_a), oracle_err_b=rel(gb, oracle_b),
            dispersion_a=1.0 - _abs_cos(ga, g[-1]) if T > 1 else 0.0,
            dispersion_b=1.0 - _abs_cos(gb, x[-1]) if T > 1 else 0.0,
            span_residual_a=_span_residual(ga, g),
            grad_a_norm=float(np.linalg.norm(ga)), grad_b_norm=float(np.linalg.norm(gb)),
        ))
    return rows


def cross_check(row: AlignmentRow) -> float:
    """| |frob_cos| - cos(theta_left) cos(theta_right) | for a rank-1 adapter."""
    return abs(abs(row.frob_cos) - math.cos(row.theta_left) * math.cos(row.theta_right))


__all__ = [
    "AlignmentRow", "align_layer", "align_report", "write_alignment_csv",
    "write_alignment_json", "rank1_gradient_check", "lora_asymmetry_check",
    "lora_gradients", "cross_check", "GradientRankRow", "LoraGradRow",
]
