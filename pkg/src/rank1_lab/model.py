"""Tiny decoder-only transformer with a hand-written backward pass.

Parameter names follow the usual Llama-style layout without the ``.weight``
suffix on projections, e.g. ``layers.0.self_attn.q_proj`` or
``layers.1.mlp.gate_proj``.  Linear weights are stored ``(d_out, d_in)``.

Blocks are pre-norm: ``x + attn(norm(x))`` then ``x + mlp(norm(x))`` with a
SwiGLU MLP ``down(silu(gate(x)) * up(x))`` and learned absolute positions.
All arithmetic is float64.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, SequenceTooLong, TapeMismatch, TokenOutOfRange

NORM_TYPES = ("rmsnorm", "layernorm")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 24
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    norm_type: str = "rmsnorm"
    tie_embeddings: bool = False
    init_std: float = 0.02
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.norm_type not in NORM_TYPES:
            raise ConfigError(f"norm_type must be one of {NORM_TYPES}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def linear_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names += [f"layers.{i}.self_attn.{p}_proj" for p in "qkvo"]
        names += [f"layers.{i}.mlp.{p}_proj" for p in ("gate", "up", "down")]
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed_tokens": (v, d),
        "embed_positions": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        shapes[f"{pre}.input_layernorm"] = (d,)
        for p in "qkvo":
            shapes[f"{pre}.self_attn.{p}_proj"] = (d, d)
        shapes[f"{pre}.post_attention_layernorm"] = (d,)
        shapes[f"{pre}.mlp.gate_proj"] = (f, d)
        shapes[f"{pre}.mlp.up_proj"] = (f, d)
        shapes[f"{pre}.mlp.down_proj"] = (d, f)
    shapes["norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (v, d)
    return shapes


def init(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded scaled-normal init; norm weights start at one."""
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.ones(shape)
            continue
        std = cfg.init_std
        if name.endswith(("o_proj", "down_proj")):
            std *= resid_scale
        params[name] = rng.normal(0.0, std, size=shape)
    return params


# -- LoRA -------------------------------------------------------------------

@dataclass
class LoraAdapter:
    A: np.ndarray  # (d_out, r)
    B: np.ndarray  # (r, d_in)
    alpha: float = 1.0

    @property
    def r(self) -> int:
        return int(self.A.shape[1])

    def delta(self) -> np.ndarray:
        return self.alpha * (self.A @ self.B)


def attach_lora(params, names, r: int = 1, alpha: float = 1.0, seed: int = 0,
                std: float = 0.02) -> dict[str, LoraAdapter]:
    """Adapters with seeded normal A and zero B, so W + alpha*A@B == W initially."""
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    rng = np.random.default_rng(seed)
    out = {}
    for name in sorted(names):
        d_out, d_in = params[name].shape
        out[name] = LoraAdapter(rng.normal(0.0, std, (d_out, r)), np.zeros((r, d_in)), alpha)
    return out


def merge_adapters(params, adapters) -> dict[str, np.ndarray]:
    merged = {k: v.copy() for k, v in params.items()}
    for name, ad in (adapters or {}).items():
        merged[name] = merged[name] + ad.delta()
    return merged


# -- forward ----------------------------------------------------------------

@dataclass
class Tape:
    tokens: np.ndarray
    logits: np.ndarray
    lin_in: dict = field(default_factory=dict)  # linear name -> input x (B,T,d_in)
    lin_xb: dict = field(default_factory=dict)  # linear name -> x @ B.T for adapters
    norms: dict = field(default_factory=dict)  # norm name -> (xhat, rinv)
    attn: dict = field(default_factory=dict)  # layer -> (q, k, v, probs) in head layout
    mlp: dict = field(default_factory=dict)  # layer -> (gate, up)
    final_hidden: np.ndarray | None = None
    shapes: dict = field(default_factory=dict)
    adapter_names: tuple = ()


def _norm_fwd(x, w, cfg):
    if cfg.norm_type == "layernorm":
        xc = x - x.mean(axis=-1, keepdims=True)
    else:
        xc = x
    rinv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + cfg.norm_eps)
    xhat = xc * rinv
    return xhat * w, (xhat, rinv)


def _norm_bwd(dy, w, cache, cfg):
    xhat, rinv = cache
    dw = np.einsum("btd,btd->d", dy, xhat)
    dxhat = dy * w
    dx = dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    if cfg.norm_type == "layernorm":
        dx = dx - np.mean(dxhat, axis=-1, keepdims=True)
    return dx * rinv, dw


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _mm(x, w):
    """``x @ w`` for stacked rows as one 2-D matmul."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def _outer_sum(dy, x):
    """sum over leading axes of dy_n x_n^T."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] > cfg.max_seq_len:
        raise SequenceTooLong(f"length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenOutOfRange("token id outside [0, vocab_size)")
    return tokens.astype(np.int64)


def forward(cfg: ModelConfig, params, tokens, adapters=None) -> tuple[np.ndarray, Tape]:
    """Logits ``(B, T, V)`` for token ids ``(B, T)`` (or ``(T,)``) plus the tape."""
    tokens = _check_tokens(cfg, tokens)
    adapters = adapters or {}
    B, T = tokens.shape
    H, hd = cfg.n_heads, cfg.head_dim
    tape = Tape(tokens=tokens, logits=None, shapes={k: v.shape for k, v in params.items()},
                adapter_names=tuple(sorted(adapters)))

    def lin(name, x):
        tape.lin_in[name] = x
        y = _mm(x, params[name].T)
        ad = adapters.get(name)
        if ad is not None:
            xb = _mm(x, ad.B.T)
            tape.lin_xb[name] = xb
            y = y + ad.alpha * _mm(xb, ad.A.T)
        return y

    def heads(z):
        return z.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    x = params["embed_tokens"][tokens] + params["embed_positions"][:T][None]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        a_in, tape.norms[f"{pre}.input_layernorm"] = _norm_fwd(
            x, params[f"{pre}.input_layernorm"], cfg)
        q = heads(lin(f"{pre}.self_attn.q_proj", a_in))
        k = heads(lin(f"{pre}.self_attn.k_proj", a_in))
        v = heads(lin(f"{pre}.self_attn.v_proj", a_in))
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
        scores = np.where(mask, -np.inf, scores)
        probs = _softmax(scores)
        tape.attn[i] = (q, k, v, probs)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + lin(f"{pre}.self_attn.o_proj", ctx)

        m_in, tape.norms[f"{pre}.post_attention_layernorm"] = _norm_fwd(
            x, params[f"{pre}.post_attention_layernorm"], cfg)
        gate = lin(f"{pre}.mlp.gate_proj", m_in)
        up = lin(f"{pre}.mlp.up_proj", m_in)
        tape.mlp[i] = (gate, up)
        x = x + lin(f"{pre}.mlp.down_proj", gate * _sigmoid(gate) * up)

    h, tape.norms["norm"] = _norm_fwd(x, params["norm"], cfg)
    tape.final_hidden = h
    head = params["embed_tokens"] if cfg.tie_embeddings else params["lm_head"]
    logits = _mm(h, head.T)
    tape.logits = logits
    return logits, tape


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def logprob_per_token(logits, targets) -> np.ndarray:
    """log pi(target_t | prefix) gathered from ``logits[..., t, :]``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} are misaligned")
    lp = log_softmax(logits)
    return np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]


def entropy_per_token(logits) -> np.ndarray:
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return -np.sum(np.exp(lp) * lp, axis=-1)


# -- backward ---------------------------------------------------------------

def backward(tape: Tape, cfg: ModelConfig, params, targets, weights, adapters=None,
             objective: str = "logprob", output_grads: bool = False):
    """Exact gradients of ``sum_{b,t} w[b,t] * f(pi(targets[b,t] | tokens[b,:t+1]))``.

    ``f`` is log (``objective="logprob"``) or identity (``"prob"``). Returns a
    dict of named gradients (adapter factors as ``{layer}.lora_A/.lora_B``);
    with ``output_grads=True`` also returns the gradient reaching each linear
    layer's output, keyed by layer name.
    """
    adapters = adapters or {}
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.ndim == 1:
        targets, weights = targets[None], weights.reshape(1, -1)
    if targets.shape != tape.tokens.shape or weights.shape != targets.shape:
        raise TapeMismatch("targets/weights do not match the tape's token grid")
    if {k: v.shape for k, v in params.items()} != tape.shapes:
        raise TapeMismatch("parameter shapes differ from the forward pass")
    if tuple(sorted(adapters)) != tape.adapter_names:
        raise TapeMismatch("adapter set differs from the forward pass")

    B, T = targets.shape
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for name, ad in adapters.items():
        grads[f"{name}.lora_A"] = np.zeros_like(ad.A)
        grads[f"{name}.lora_B"] = np.zeros_like(ad.B)
    outg = {}

    probs = _softmax(tape.logits)
    w_eff = weights
    if objective == "prob":
        w_eff = weights * np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    elif objective != "logprob":
        raise ValueError(f"unknown objective {objective!r}")
    dlogits = -probs * w_eff[..., None]
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) + w_eff[..., None], axis=-1)

    def lin_bwd(name, dy):
        x = tape.lin_in[name]
        if output_grads:
            outg[name] = dy
        grads[name] += _outer_sum(dy, x)
        dx = _mm(dy, params[name])
        ad = adapters.get(name)
        if ad is not None:
            xb = tape.lin_xb[name]
            grads[f"{name}.lora_A"] += ad.alpha * _outer_sum(dy, xb)
            dya = _mm(dy, ad.A)  # (B,T,r)
            grads[f"{name}.lora_B"] += ad.alpha * _outer_sum(dya, x)
            dx = dx + ad.alpha * _mm(dya, ad.B)
        return dx

    head_name = "embed_tokens" if cfg.tie_embeddings else "lm_head"
    h = tape.final_hidden
    grads[head_name] += _outer_sum(dlogits, h)
    dh = _mm(dlogits, params[head_name])
    dx, dw = _norm_bwd(dh, params["norm"], tape.norms["norm"], cfg)
    grads["norm"] += dw

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}"
        gate, up = tape.mlp[i]
        sig = _sigmoid(gate)
        silu = gate * sig
        dact = lin_bwd(f"{pre}.mlp.down_proj", dx)
        dgate = dact * up * (sig * (1.0 + gate * (1.0 - sig)))
        dup = dact * silu
        dm = lin_bwd(f"{pre}.mlp.gate_proj", dgate) + lin_bwd(f"{pre}.mlp.up_proj", dup)
        dn, dw = _norm_bwd(dm, params[f"{pre}.post_attention_layernorm"],
                           tape.norms[f"{pre}.post_attention_layernorm"], cfg)
        grads[f"{pre}.post_attention_layernorm"] += dw
        dx = dx + dn

        q, k, v, p = tape.attn[i]
        dctx = lin_bwd(f"{pre}.self_attn.o_proj", dx)
        dctx = dctx.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = p * (dp - np.sum(p * dp, axis=-1, keepdims=True)) / np.sqrt(hd)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def flat(z):
            return z.transpose(0, 2, 1, 3).reshape(B, T, d)

        da = (lin_bwd(f"{pre}.self_attn.q_proj", flat(dq))
              + lin_bwd(f"{pre}.self_attn.k_proj", flat(dk))
              + lin_bwd(f"{pre}.self_attn.v_proj", flat(dv)))
        dn, dw = _norm_bwd(da, params[f"{pre}.input_layernorm"],
                           tape.norms[f"{pre}.input_layernorm"], cfg)
        grads[f"{pre}.input_layernorm"] += dw
        dx = dx + dn

    np.add.at(grads["embed_tokens"], tape.tokens, dx)
    grads["embed_positions"][:T] += dx.sum(axis=0)
    if output_grads:
        return grads, outg
    return grads


# -- sampling ---------------------------------------------------------------

def nucleus_pick(probs, top_p: float, u) -> np.ndarray:
    """Inverse-CDF draw from the top-p nucleus of each row of ``probs``.

    The nucleus is the smallest probability-sorted prefix whose mass reaches
    ``top_p`` (ties broken by token id). ``u`` holds one uniform per row.
    """
    probs = np.atleast_2d(probs)
    u = np.atleast_1d(u)
    order = np.argsort(-probs, axis=-1, kind="stable")
    ps = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(ps, axis=-1)
    keep = (cum - ps) < top_p
    keep[:, 0] = True
    ps = np.where(keep, ps, 0.0)
    cum = np.cumsum(ps, axis=-1)
    thresh = u * cum[:, -1]
    pos = np.sum(cum <= thresh[:, None], axis=-1)
    last = np.sum(keep, axis=-1) - 1
    pos = np.minimum(pos, last)
    return order[np.arange(len(order)), pos]


def _lin2(params, adapters, name, x):
    y = x @ params[name].T
    ad = adapters.get(name)
    if ad is not None:
        y = y + ad.alpha * ((x @ ad.B.T) @ ad.A.T)
    return y


def _decode_step(cfg, params, adapters, cache, rows, tok, pos):
    """Logits for one new token per row, reading and extending the KV cache."""
    H, hd = cfg.n_heads, cfg.head_dim
    m = rows.size
    width = int(pos.max()) + 1
    future = np.arange(width)[None, None, :] > pos[:, None, None]
    x = params["embed_tokens"][tok] + params["embed_positions"][pos]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        a, _ = _norm_fwd(x, params[f"{pre}.input_layernorm"], cfg)
        q = _lin2(params, adapters, f"{pre}.self_attn.q_proj", a).reshape(m, H, hd)
        ck, cv = cache[i]
        ck[rows, :, pos] = _lin2(params, adapters, f"{pre}.self_attn.k_proj", a).reshape(m, H, hd)
        cv[rows, :, pos] = _lin2(params, adapters, f"{pre}.self_attn.v_proj", a).reshape(m, H, hd)
        K = ck[rows, :, :width]
        V = cv[rows, :, :width]
        scores = np.einsum("mhd,mhtd->mht", q, K) / np.sqrt(hd)
        probs = _softmax(np.where(future, -np.inf, scores))
        ctx = np.einsum("mht,mhtd->mhd", probs, V).reshape(m, cfg.d_model)
        x = x + _lin2(params, adapters, f"{pre}.self_attn.o_proj", ctx)
        b, _ = _norm_fwd(x, params[f"{pre}.post_attention_layernorm"], cfg)
        gate = _lin2(params, adapters, f"{pre}.mlp.gate_proj", b)
        up = _lin2(params, adapters, f"{pre}.mlp.up_proj", b)
        x = x + _lin2(params, adapters, f"{pre}.mlp.down_proj", gate * _sigmoid(gate) * up)
    h, _ = _norm_fwd(x, params["norm"], cfg)
    head = params["embed_tokens"] if cfg.tie_embeddings else params["lm_head"]
    return h @ head.T


def generate(cfg: ModelConfig, params, prompts, max_new_tokens: int, rngs=None,
             temperature: float = 1.0, top_p: float = 1.0, greedy: bool = False,
             eos_id: int | None = None, pad_id: int = 0, adapters=None) -> list[list[int]]:
    """Batched autoregressive sampling with a KV cache; one RNG stream per prompt.

    Returns the sampled continuation for each prompt (EOS included when it is
    produced). Greedy decoding, or ``temperature == 0``, takes the argmax.
    """
    greedy = greedy or temperature == 0
    adapters = adapters or {}
    n = len(prompts)
    if n == 0:
        return []
    if not greedy and (rngs is None or len(rngs) != n):
        raise ValueError("need one RNG stream per prompt for stochastic sampling")
    lengths = np.array([len(p) for p in prompts])
    if lengths.min() < 1:
        raise ValueError("prompts must be non-empty")
    total = int(lengths.max()) + max_new_tokens
    if total > cfg.max_seq_len:
        raise SequenceTooLong(f"prompt + max_new_tokens = {total} > max_seq_len")
    width = int(lengths.max())
    buf = np.full((n, width), pad_id, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, :len(p)] = p
    out: list[list[int]] = [[] for _ in range(n)]
    if max_new_tokens <= 0:
        return out
    # prefill: rows are right padded, so each row's real prefix is unaffected by pads
    logits, tape = forward(cfg, params, buf, adapters)
    cache = []
    for i in range(cfg.n_layers):
        _, k, v, _ = tape.attn[i]
        ck = np.zeros((n, cfg.n_heads, total, cfg.head_dim))
        cv = np.zeros_like(ck)
        ck[:, :, :width] = k
        cv[:, :, :width] = v
        cache.append((ck, cv))
    last = logits[np.arange(n), lengths - 1]
    live = np.arange(n)
    done = np.zeros(n, dtype=bool)
    for step in range(max_new_tokens):
        if greedy:
            nxt = np.argmax(last, axis=-1)
        else:
            pr = _softmax(last / temperature)
            u = np.array([rngs[i].random() for i in live])
            nxt = nucleus_pick(pr, top_p, u)
        for j, i in enumerate(live):
            tok = int(nxt[j])
            out[i].append(tok)
            if eos_id is not None and tok == eos_id:
                done[i] = True
        keep = ~done[live]
        nxt = nxt[keep]
        live = live[keep]
        if live.size == 0 or step == max_new_tokens - 1:
            break
        pos = lengths[live] + step
        last = _decode_step(cfg, params, adapters, cache, live, nxt, pos)
    return out


def sample(cfg: ModelConfig, params, prompt, temperature: float = 1.0, top_p: float = 1.0,
           max_new_tokens: int = 16, rng=None, greedy: bool = False,
           eos_id: int | None = None, adapters=None) -> list[int]:
    rngs = None if (greedy or temperature == 0) else [rng]
    return generate(cfg, params, [list(prompt)], max_new_tokens, rngs, temperature, top_p,
                    greedy, eos_id, adapters=adapters)[0]


# -- snapshots --------------------------------------------------------------

def snapshot(cfg: ModelConfig, params, adapters=None, metadata=None) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    meta = {"model_config": json.dumps(cfg.to_dict(), sort_keys=True),
            "model_config_hash": cfg.config_hash()}
    if adapters:
        alphas = {a.alpha for a in adapters.values()}
        if len(alphas) != 1:
            raise ValueError("all adapters in one snapshot must share alpha")
        meta["lora_alpha"] = repr(float(alphas.pop()))
        meta["lora_targets"] = json.dumps(sorted(adapters))
        for name, ad in adapters.items():
            tensors[f"{name}.lora_A"] = np.array(ad.A, dtype=np.float64)
            tensors[f"{name}.lora_B"] = np.array(ad.B, dtype=np.float64)
    meta.update({str(k): str(v) for k, v in (metadata or {}).items()})
    return Checkpoint(tensors=tensors, metadata=meta)


def restore(ckpt: Checkpoint):
    """Inverse of :func:`snapshot`: ``(config, params, adapters)``."""
    cfg = ModelConfig.from_dict(json.loads(ckpt.metadata["model_config"]))
    targets = json.loads(ckpt.metadata.get("lora_targets", "[]"))
    alpha = float(ckpt.metadata.get("lora_alpha", "1.0"))
    lora_keys = {f"{t}.lora_{s}" for t in targets for s in "AB"}
    params = {k: v.copy() for k, v in ckpt.tensors.items() if k not in lora_keys}
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ConfigError("checkpoint tensors do not match its model config")
    adapters = {
        t: LoraAdapter(ckpt.tensors[f"{t}.lora_A"].copy(), ckpt.tensors[f"{t}.lora_B"].copy(), alpha)
        for t in targets
    }
    return cfg, params, adapters
