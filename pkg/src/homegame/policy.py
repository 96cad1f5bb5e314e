"""Action-attention policy: transformer trunk with query/key heads.

Per-action scores are dot products between a context query (read at the
observation slot of the sequence [task, history, observation, actions...])
and per-action keys (read at the action slot of [task, history, observation,
action_i]). All gradients are derived by hand; everything runs in float64
numpy so finite-difference checks are meaningful.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

N_CTX = 3  # task, history, observation slots carry learned positions
LN_EPS = 1e-5


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    embed_dim: int = 64
    ffn_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("heads must divide hidden dimension")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "heads": self.heads, "hidden": self.hidden,
                "embed_dim": self.embed_dim, "ffn_mult": self.ffn_mult}

    @classmethod
    def from_dict(cls, raw: dict) -> "PolicyConfig":
        return cls(**raw)


@dataclass
class PolicyParams:
    config: PolicyConfig
    tensors: dict[str, np.ndarray]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"non-finite values in parameter {name}")


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)


def init_params(config: PolicyConfig, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    M, D, F = config.hidden, config.embed_dim, config.hidden * config.ffn_mult
    t: dict[str, np.ndarray] = {
        "embed/W": _uniform(rng, D, (D, M)),
        "embed/b": np.zeros(M),
        "pos": 0.02 * rng.standard_normal((N_CTX, M)),
        "ln_f/g": np.ones(M),
        "ln_f/b": np.zeros(M),
        "head_q/W": _uniform(rng, M, (M, M)),
        "head_q/b": np.zeros(M),
        "head_k/W": _uniform(rng, M, (M, M)),
        "head_k/b": np.zeros(M),
    }
    for l in range(config.layers):
        p = f"layer{l}"
        for mat in ("Wq", "Wk", "Wv", "Wo"):
            t[f"{p}/attn/{mat}"] = _uniform(rng, M, (M, M))
        for b in ("bq", "bk", "bv", "bo"):
            t[f"{p}/attn/{b}"] = np.zeros(M)
        t[f"{p}/ln1/g"] = np.ones(M)
        t[f"{p}/ln1/b"] = np.zeros(M)
        t[f"{p}/ln2/g"] = np.ones(M)
        t[f"{p}/ln2/b"] = np.zeros(M)
        t[f"{p}/ffn/W1"] = _uniform(rng, M, (M, F))
        t[f"{p}/ffn/b1"] = np.zeros(F)
        t[f"{p}/ffn/W2"] = _uniform(rng, F, (F, M))
        t[f"{p}/ffn/b2"] = np.zeros(M)
    return PolicyParams(config, t)


@dataclass
class AgentInput:
    task_embedding: np.ndarray
    history: list[np.ndarray]
    obs_embedding: np.ndarray
    action_embeddings: list[np.ndarray]
    action_texts: list[str] = field(default_factory=list)

    def validate(self, embed_dim: int):
        if not self.action_embeddings:
            raise ValueError("need at least one permissible action")
        for v in (self.task_embedding, self.obs_embedding,
                  *self.history, *self.action_embeddings):
            if v.shape != (embed_dim,):
                raise ValueError(f"embedding dimension mismatch: {v.shape} != ({embed_dim},)")


def history_average(history: list[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Mean of past observation embeddings; zero vector before the first step."""
    if not history:
        if dim is None:
            raise ValueError("need dim for an empty history")
        return np.zeros(dim)
    dims = {v.shape for v in history}
    if len(dims) != 1:
        raise ValueError(f"inconsistent history dimensions: {dims}")
    return np.mean(history, axis=0)


# --- primitive forward/backward ---------------------------------------------

def _layer_norm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def _layer_norm_bwd(dy, cache):
    xh, inv, g = cache
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    dg = (dy * xh).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dg, db


def _gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * phi, (x, phi)


def _gelu_bwd(dy, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return dy * (phi + x * pdf)


def _split_heads(x, heads):
    b, s, m = x.shape
    return x.reshape(b, s, heads, m // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_fwd(x, t, prefix, heads):
    q = x @ t[f"{prefix}/Wq"] + t[f"{prefix}/bq"]
    k = x @ t[f"{prefix}/Wk"] + t[f"{prefix}/bk"]
    v = x @ t[f"{prefix}/Wv"] + t[f"{prefix}/bv"]
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    dh = qh.shape[-1]
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores -= scores.max(-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(-1, keepdims=True)
    ctx = w @ vh
    merged = _merge_heads(ctx)
    out = merged @ t[f"{prefix}/Wo"] + t[f"{prefix}/bo"]
    return out, (x, qh, kh, vh, w, merged)


def _attention_bwd(dout, cache, t, prefix, grads):
    x, qh, kh, vh, w, merged = cache
    heads, dh = qh.shape[1], qh.shape[-1]
    grads[f"{prefix}/Wo"] += np.einsum("bsm,bsn->mn", merged, dout)
    grads[f"{prefix}/bo"] += dout.sum((0, 1))
    dmerged = dout @ t[f"{prefix}/Wo"].T
    dctx = _split_heads(dmerged, heads)
    dw = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = w.transpose(0, 1, 3, 2) @ dctx
    # softmax backward (rows of w)
    dscores = w * (dw - (dw * w).sum(-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    dx = np.zeros_like(x)
    for name, d in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
        grads[f"{prefix}/{name}"] += np.einsum("bsm,bsn->mn", x, d)
        grads[f"{prefix}/b{name[1].lower()}"] += d.sum((0, 1))
        dx += d @ t[f"{prefix}/{name}"].T
    return dx


def _trunk_fwd(params: PolicyParams, x: np.ndarray):
    """x: (batch, seq, embed_dim) -> (batch, seq, hidden), pre-LN residual blocks."""
    t = params.tensors
    cfg = params.config
    h = x @ t["embed/W"] + t["embed/b"]
    n_ctx = min(N_CTX, h.shape[1])
    h[:, :n_ctx] += t["pos"][:n_ctx]
    caches = []
    for l in range(cfg.layers):
        p = f"layer{l}"
        u, ln1_cache = _layer_norm_fwd(h, t[f"{p}/ln1/g"], t[f"{p}/ln1/b"])
        a, attn_cache = _attention_fwd(u, t, f"{p}/attn", cfg.heads)
        h = h + a
        v, ln2_cache = _layer_norm_fwd(h, t[f"{p}/ln2/g"], t[f"{p}/ln2/b"])
        f1 = v @ t[f"{p}/ffn/W1"] + t[f"{p}/ffn/b1"]
        g, gelu_cache = _gelu_fwd(f1)
        f2 = g @ t[f"{p}/ffn/W2"] + t[f"{p}/ffn/b2"]
        h = h + f2
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activations after layer {l}")
        caches.append((ln1_cache, attn_cache, ln2_cache, gelu_cache, v, g))
    out, lnf_cache = _layer_norm_fwd(h, t["ln_f/g"], t["ln_f/b"])
    return out, (x, caches, lnf_cache)


def _trunk_bwd(params: PolicyParams, dout: np.ndarray, cache, grads):
    t = params.tensors
    cfg = params.config
    x, caches, lnf_cache = cache
    dh, dg, db = _layer_norm_bwd(dout, lnf_cache)
    grads["ln_f/g"] += dg
    grads["ln_f/b"] += db
    for l in reversed(range(cfg.layers)):
        p = f"layer{l}"
        ln1_cache, attn_cache, ln2_cache, gelu_cache, v, g = caches[l]
        # FFN block
        df2 = dh
        grads[f"{p}/ffn/W2"] += np.einsum("bsf,bsm->fm", g, df2)
        grads[f"{p}/ffn/b2"] += df2.sum((0, 1))
        dg_act = df2 @ t[f"{p}/ffn/W2"].T
        df1 = _gelu_bwd(dg_act, gelu_cache)
        grads[f"{p}/ffn/W1"] += np.einsum("bsm,bsf->mf", v, df1)
        grads[f"{p}/ffn/b1"] += df1.sum((0, 1))
        dv = df1 @ t[f"{p}/ffn/W1"].T
        dres, dg2, db2 = _layer_norm_bwd(dv, ln2_cache)
        grads[f"{p}/ln2/g"] += dg2
        grads[f"{p}/ln2/b"] += db2
        dh = dh + dres
        # attention block
        da = dh
        du = _attention_bwd(da, attn_cache, t, f"{p}/attn", grads)
        dres, dg1, db1 = _layer_norm_bwd(du, ln1_cache)
        grads[f"{p}/ln1/g"] += dg1
        grads[f"{p}/ln1/b"] += db1
        dh = dh + dres
    n_ctx = min(N_CTX, dh.shape[1])
    grads["pos"][:n_ctx] += dh[:, :n_ctx].sum(0)
    grads["embed/W"] += np.einsum("bsd,bsm->dm", x, dh)
    grads["embed/b"] += dh.sum((0, 1))
    return dh @ t["embed/W"].T


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def forward(params: PolicyParams, inp: AgentInput):
    """Policy probabilities over permissible actions plus cached activations."""
    cfg = params.config
    inp.validate(cfg.embed_dim)
    t = params.tensors
    hist = history_average(inp.history, cfg.embed_dim)
    ctx = [np.asarray(inp.task_embedding, dtype=float), hist,
           np.asarray(inp.obs_embedding, dtype=float)]
    acts = [np.asarray(a, dtype=float) for a in inp.action_embeddings]
    n = len(acts)

    q_seq = np.stack(ctx + acts)[None, :, :]                  # (1, 3+n, D)
    k_seq = np.stack([np.stack(ctx + [a]) for a in acts])     # (n, 4, D)

    q_out, q_cache = _trunk_fwd(params, q_seq)
    k_out, k_cache = _trunk_fwd(params, k_seq)
    q_read = q_out[0, N_CTX - 1]                              # observation slot
    k_read = k_out[:, N_CTX]                                  # action slot
    q = q_read @ t["head_q/W"] + t["head_q/b"]
    k = k_read @ t["head_k/W"] + t["head_k/b"]
    scores = k @ q
    pi = _softmax(scores)
    if not np.all(np.isfinite(pi)):
        raise NumericalError("non-finite policy output")
    cache = {"q_cache": q_cache, "k_cache": k_cache, "q_read": q_read,
             "k_read": k_read, "q": q, "k": k, "scores": scores, "pi": pi, "n": n}
    return pi, cache


def backward(params: PolicyParams, inp: AgentInput, expert_index: int, cache):
    """Gradients of -log pi[expert_index] for every parameter tensor."""
    n = cache["n"]
    if not (0 <= expert_index < n):
        raise ValueError(f"expert index {expert_index} out of range for {n} actions")
    t = params.tensors
    grads = params.zeros_like()
    pi, q, k = cache["pi"], cache["q"], cache["k"]

    dscores = pi.copy()
    dscores[expert_index] -= 1.0
    dq = k.T @ dscores
    dk = np.outer(dscores, q)

    grads["head_q/W"] += np.outer(cache["q_read"], dq)
    grads["head_q/b"] += dq
    dq_read = t["head_q/W"] @ dq
    grads["head_k/W"] += cache["k_read"].T @ dk
    grads["head_k/b"] += dk.sum(0)
    dk_read = dk @ t["head_k/W"].T

    dq_out = np.zeros((1, N_CTX + n, t["embed/W"].shape[1]))
    dq_out[0, N_CTX - 1] = dq_read
    _trunk_bwd(params, dq_out, cache["q_cache"], grads)

    dk_out = np.zeros((n, N_CTX + 1, t["embed/W"].shape[1]))
    dk_out[:, N_CTX] = dk_read
    _trunk_bwd(params, dk_out, cache["k_cache"], grads)
    return grads


def loss_from_cache(cache, expert_index: int) -> float:
    return float(-np.log(cache["pi"][expert_index] + 1e-300))


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_params(path: str, params: PolicyParams):
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": params.config.to_dict()})
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8),
             **params.tensors)


def load_params(path: str) -> PolicyParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = PolicyConfig.from_dict(meta["config"])
        tensors = {k: data[k] for k in data.files if k != "__meta__"}
    return PolicyParams(config, tensors)
