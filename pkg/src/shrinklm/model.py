"""Desk-scale decoder-only transformer in plain numpy.

Architecture follows the LLaMA recipe so that exactly seven projection
matrices per layer exist (q/k/v/o and gate/up/down): pre-RMSNorm blocks,
rotary position embeddings, SiLU-gated MLP, untied byte embedding and
output head. All math is float64; forward is single-sequence (loop over
a batch where needed), training forward/backward is batched.

The forward engine is shared between the dense model and its low-rank
counterpart: any object with `config`, `dense_tensors()` and
`apply_projection(layer, kind, x)` can run it (see compression module).

Tokens are raw bytes 0..255 plus BOS=256 and EOS=257.

A model is immutable during forward; `backward` mutates only its own
grad buffers, so concurrent readers are safe while no mutator runs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

PROJECTION_KINDS = (
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
)
_KIND_INDEX = {k: i for i, k in enumerate(PROJECTION_KINDS)}

BOS_ID = 256
EOS_ID = 257
RMS_EPS = 1e-5
ROPE_BASE = 10000.0
MIN_CORPUS_BYTES = 64 * 1024


@dataclass(frozen=True)
class ProjectionId:
    """One of the seven compressible weight matrices of one layer."""

    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in _KIND_INDEX:
            raise ValidationError(f"unknown projection kind {self.kind!r}")
        if self.layer < 0:
            raise ValidationError(f"negative layer index {self.layer}")

    @property
    def param_name(self) -> str:
        return f"layers.{self.layer}.{self.kind}.weight"

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.layer, _KIND_INDEX[self.kind])

    def __str__(self) -> str:
        return f"L{self.layer}.{self.kind}"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 192
    max_seq_len: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"config.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValidationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_ff": self.d_ff, "max_seq_len": self.max_seq_len, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def projection_shape(config: ModelConfig, kind: str) -> tuple[int, int]:
    """(out_features, in_features) of a projection; y = x @ W.T."""
    d, f = config.d_model, config.d_ff
    return {
        "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
        "gate_proj": (f, d), "up_proj": (f, d), "down_proj": (d, f),
    }[kind]


def all_projection_ids(config: ModelConfig) -> list[ProjectionId]:
    """Every ProjectionId in canonical order (layer, then kind)."""
    return [
        ProjectionId(layer, kind)
        for layer in range(config.n_layers)
        for kind in PROJECTION_KINDS
    ]


@dataclass
class TinyLM:
    """Dense model: config, named parameter tensors, optional grad buffers."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] | None = None

    def apply_projection(self, layer: int, kind: str, x: np.ndarray) -> np.ndarray:
        return x @ self.params[f"layers.{layer}.{kind}.weight"].T

    def dense_tensors(self) -> dict[str, np.ndarray]:
        return self.params

    def projection(self, pid: ProjectionId) -> np.ndarray:
        return self.params[pid.param_name]

    def ensure_grads(self) -> dict[str, np.ndarray]:
        if self.grads is None:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        return self.grads

    def projection_grad(self, pid: ProjectionId) -> np.ndarray | None:
        if self.grads is None:
            return None
        return self.grads.get(pid.param_name)


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb"]
    for layer in range(config.n_layers):
        names.append(f"layers.{layer}.attn_norm.weight")
        for kind in ("q_proj", "k_proj", "v_proj", "o_proj"):
            names.append(f"layers.{layer}.{kind}.weight")
        names.append(f"layers.{layer}.mlp_norm.weight")
        for kind in ("gate_proj", "up_proj", "down_proj"):
            names.append(f"layers.{layer}.{kind}.weight")
    names += ["final_norm.weight", "lm_head"]
    return names


def param_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    if name in ("tok_emb", "lm_head"):
        return (config.vocab_size, config.d_model)
    if name.endswith("norm.weight"):
        return (config.d_model,)
    kind = name.split(".")[2]
    return projection_shape(config, kind)


def init_model(config: ModelConfig) -> TinyLM:
    """Seeded Gaussian init; residual-feeding projections scaled down."""
    rng = np.random.default_rng([config.seed, 0])
    std = 0.02
    resid_std = std / np.sqrt(2.0 * config.n_layers)
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape)
        elif name.endswith(("o_proj.weight", "down_proj.weight")):
            params[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    return TinyLM(config=config, params=params)


# ---------------------------------------------------------------------------
# shared forward engine (dense and factorized models)
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer rotary-position keys/values for incremental decoding."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.length = 0
        self.k = [None] * config.n_layers
        self.v = [None] * config.n_layers

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray):
        if self.k[layer] is None:
            self.k[layer] = k_new
            self.v[layer] = v_new
        else:
            self.k[layer] = np.concatenate([self.k[layer], k_new], axis=1)
            self.v[layer] = np.concatenate([self.v[layer], v_new], axis=1)


def _rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = ROPE_BASE ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (..., T, head_dim), halves convention.
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_apply_inverse(g: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Transpose of the rotation: gradient back through _rope_apply.
    half = g.shape[-1] // 2
    g1, g2 = g[..., :half], g[..., half:]
    return np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)


def _rmsnorm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * weight


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def _validate_tokens(config: ModelConfig, tokens: np.ndarray, extra: int = 0) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValidationError("token sequence must be 1-D and non-empty")
    if toks.min() < 0 or toks.max() >= config.vocab_size:
        bad = toks[(toks < 0) | (toks >= config.vocab_size)][0]
        raise ValidationError(f"token id {bad} outside vocab of size {config.vocab_size}")
    if toks.size + extra > config.max_seq_len:
        raise ValidationError(
            f"sequence of length {toks.size + extra} exceeds max_seq_len {config.max_seq_len}"
        )
    return toks


def forward(model, tokens, cache: KVCache | None = None, capture=None) -> np.ndarray:
    """Logits (seq_len x vocab) for a token sequence.

    With a cache, `tokens` is the new suffix and attention also covers the
    cached positions; the cache is extended in place. `capture`, when
    given, receives every projection input via capture.add(layer, kind, x).
    """
    cfg = model.config
    offset = cache.length if cache is not None else 0
    toks = _validate_tokens(cfg, tokens, extra=offset)
    tensors = model.dense_tensors()
    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(head_dim)

    t_new = toks.size
    positions = offset + np.arange(t_new)
    cos, sin = _rope_tables(positions, head_dim)

    x = tensors["tok_emb"][toks]
    for layer in range(cfg.n_layers):
        n1 = _rmsnorm(x, tensors[f"layers.{layer}.attn_norm.weight"])
        if capture is not None:
            capture.add(layer, "q_proj", n1)
        q = _split_heads(model.apply_projection(layer, "q_proj", n1), n_heads)
        k = _split_heads(model.apply_projection(layer, "k_proj", n1), n_heads)
        v = _split_heads(model.apply_projection(layer, "v_proj", n1), n_heads)
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)

        if cache is not None:
            cache.append(layer, k, v)
            k_all, v_all = cache.k[layer], cache.v[layer]
        else:
            k_all, v_all = k, v

        scores = (q @ k_all.transpose(0, 2, 1)) * scale
        # query t (absolute offset+t) may attend keys 0..offset+t
        key_pos = np.arange(k_all.shape[1])
        mask = key_pos[None, :] > (offset + np.arange(t_new))[:, None]
        scores = np.where(mask[None, :, :], -np.inf, scores)
        probs = _softmax(scores)
        attn = _merge_heads(probs @ v_all)

        if capture is not None:
            capture.add(layer, "o_proj", attn)
        h = x + model.apply_projection(layer, "o_proj", attn)

        n2 = _rmsnorm(h, tensors[f"layers.{layer}.mlp_norm.weight"])
        if capture is not None:
            capture.add(layer, "gate_proj", n2)
        g = model.apply_projection(layer, "gate_proj", n2)
        u = model.apply_projection(layer, "up_proj", n2)
        act = g * _sigmoid(g) * u
        if capture is not None:
            capture.add(layer, "down_proj", act)
        x = h + model.apply_projection(layer, "down_proj", act)

    nf = _rmsnorm(x, tensors["final_norm.weight"])
    logits = nf @ tensors["lm_head"].T
    if cache is not None:
        cache.length = offset + t_new
    if not np.all(np.isfinite(logits)):
        raise NumericalError("forward produced non-finite logits")
    return logits


def greedy_generate(model, prompt, n_tokens: int) -> np.ndarray:
    """Greedy continuation of `prompt`; returns the generated ids only."""
    if n_tokens < 1:
        return np.zeros(0, dtype=np.int64)
    cache = KVCache(model.config)
    logits = forward(model, prompt, cache=cache)
    out = []
    for i in range(n_tokens):
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        if i + 1 < n_tokens:
            logits = forward(model, np.array([nxt]), cache=cache)
    return np.array(out, dtype=np.int64)


def sample_generate(model, prompt, n_tokens: int, temperature: float, seed: int) -> np.ndarray:
    """Temperature sampling (temperature <= 0 falls back to greedy)."""
    if temperature <= 0.0:
        return greedy_generate(model, prompt, n_tokens)
    if n_tokens < 1:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    cache = KVCache(model.config)
    logits = forward(model, prompt, cache=cache)
    out = []
    for i in range(n_tokens):
        p = _softmax(logits[-1] / temperature)
        nxt = int(rng.choice(p.size, p=p))
        out.append(nxt)
        if i + 1 < n_tokens:
            logits = forward(model, np.array([nxt]), cache=cache)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# training path: batched forward with stashed intermediates, manual backward
# ---------------------------------------------------------------------------

def _batched_forward_train(model: TinyLM, inputs: np.ndarray):
    """Forward over (B, T) inputs keeping everything backward needs."""
    cfg = model.config
    p = model.params
    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(head_dim)
    b, t = inputs.shape
    cos, sin = _rope_tables(np.arange(t), head_dim)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)

    x = p["tok_emb"][inputs]
    saved = {"inputs": inputs, "cos": cos, "sin": sin, "layers": []}
    for layer in range(cfg.n_layers):
        s: dict = {"x_in": x}
        w_n1 = p[f"layers.{layer}.attn_norm.weight"]
        inv1 = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        n1 = x * inv1 * w_n1
        s["inv1"], s["n1"] = inv1, n1

        q = n1 @ p[f"layers.{layer}.q_proj.weight"].T
        k = n1 @ p[f"layers.{layer}.k_proj.weight"].T
        v = n1 @ p[f"layers.{layer}.v_proj.weight"].T
        q = q.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        k = k.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        v = v.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)
        s["q"], s["k"], s["v"] = q, k, v

        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[None, None, :, :], -np.inf, scores)
        probs = _softmax(scores)
        s["probs"] = probs
        attn = probs @ v
        attn_flat = attn.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        s["attn_flat"] = attn_flat
        h = x + attn_flat @ p[f"layers.{layer}.o_proj.weight"].T
        s["h"] = h

        w_n2 = p[f"layers.{layer}.mlp_norm.weight"]
        inv2 = 1.0 / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + RMS_EPS)
        n2 = h * inv2 * w_n2
        s["inv2"], s["n2"] = inv2, n2
        g = n2 @ p[f"layers.{layer}.gate_proj.weight"].T
        u = n2 @ p[f"layers.{layer}.up_proj.weight"].T
        sig = _sigmoid(g)
        act = g * sig * u
        s["g"], s["u"], s["sig"] = g, u, sig
        x = h + act @ p[f"layers.{layer}.down_proj.weight"].T
        s["act"] = act
        saved["layers"].append(s)

    invf = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    nf = x * invf * p["final_norm.weight"]
    saved["x_final"], saved["invf"], saved["nf"] = x, invf, nf
    logits = nf @ p["lm_head"].T
    return logits, saved


def _rmsnorm_backward(dy, x, inv, weight):
    xhat = x * inv
    dw = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dxw = dy * weight
    dx = inv * (dxw - xhat * np.mean(dxw * xhat, axis=-1, keepdims=True))
    return dx, dw


def backward(model: TinyLM, batch) -> float:
    """Mean next-token cross-entropy over `batch` (B, T); fills model.grads.

    Gradients cover every parameter tensor (all seven projection kinds,
    embeddings, norms, output head). Deterministic for fixed inputs.
    """
    cfg = model.config
    toks = np.asarray(batch, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.size == 0:
        raise ValidationError("backward: empty batch")
    if toks.shape[1] < 2:
        raise ValidationError("backward: sequences must have length >= 2")
    if toks.shape[1] - 1 > cfg.max_seq_len:
        raise ValidationError(f"backward: sequence length {toks.shape[1]} over limit")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise ValidationError("backward: token id out of range")

    inputs, targets = toks[:, :-1], toks[:, 1:]
    b, t = inputs.shape
    p = model.params
    grads = model.ensure_grads()
    for gname in grads:
        grads[gname][...] = 0.0

    logits, saved = _batched_forward_train(model, inputs)
    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(head_dim)

    # loss and dlogits
    zmax = np.max(logits, axis=-1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax), axis=-1, keepdims=True))
    tgt_logit = np.take_along_axis(logits, targets[..., None], axis=-1)
    n_pred = b * t
    loss = float(np.sum(lse[..., 0] - tgt_logit[..., 0]) / n_pred)
    if not np.isfinite(loss):
        raise NumericalError("backward: non-finite loss")

    dlogits = np.exp(logits - lse)
    np.subtract.at(dlogits.reshape(n_pred, -1), (np.arange(n_pred), targets.ravel()), 1.0)
    dlogits /= n_pred

    nf = saved["nf"]
    grads["lm_head"] += dlogits.reshape(-1, dlogits.shape[-1]).T @ nf.reshape(-1, nf.shape[-1])
    dnf = dlogits @ p["lm_head"]
    dx, dwf = _rmsnorm_backward(dnf, saved["x_final"], saved["invf"], p["final_norm.weight"])
    grads["final_norm.weight"] += dwf

    for layer in range(cfg.n_layers - 1, -1, -1):
        s = saved["layers"][layer]
        dact = dx @ p[f"layers.{layer}.down_proj.weight"]
        grads[f"layers.{layer}.down_proj.weight"] += dx.reshape(-1, dx.shape[-1]).T @ s["act"].reshape(-1, s["act"].shape[-1])

        g, u, sig = s["g"], s["u"], s["sig"]
        du = dact * g * sig
        dg = dact * u * (sig + g * sig * (1.0 - sig))
        grads[f"layers.{layer}.up_proj.weight"] += du.reshape(-1, du.shape[-1]).T @ s["n2"].reshape(-1, s["n2"].shape[-1])
        grads[f"layers.{layer}.gate_proj.weight"] += dg.reshape(-1, dg.shape[-1]).T @ s["n2"].reshape(-1, s["n2"].shape[-1])
        dn2 = dg @ p[f"layers.{layer}.gate_proj.weight"] + du @ p[f"layers.{layer}.up_proj.weight"]
        dh_norm, dw2 = _rmsnorm_backward(
            dn2, s["h"], s["inv2"], p[f"layers.{layer}.mlp_norm.weight"]
        )
        grads[f"layers.{layer}.mlp_norm.weight"] += dw2
        dh = dx + dh_norm

        do = dh  # gradient wrt o_proj output
        grads[f"layers.{layer}.o_proj.weight"] += do.reshape(-1, do.shape[-1]).T @ s["attn_flat"].reshape(-1, s["attn_flat"].shape[-1])
        dattn_flat = do @ p[f"layers.{layer}.o_proj.weight"]
        dattn = dattn_flat.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)

        probs, q, k, v = s["probs"], s["q"], s["k"], s["v"]
        dprobs = dattn @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dattn
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        dq = _rope_apply_inverse(dq, saved["cos"], saved["sin"])
        dk = _rope_apply_inverse(dk, saved["cos"], saved["sin"])

        dq = dq.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        dk = dk.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        dv = dv.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        grads[f"layers.{layer}.q_proj.weight"] += dq.reshape(-1, dq.shape[-1]).T @ s["n1"].reshape(-1, s["n1"].shape[-1])
        grads[f"layers.{layer}.k_proj.weight"] += dk.reshape(-1, dk.shape[-1]).T @ s["n1"].reshape(-1, s["n1"].shape[-1])
        grads[f"layers.{layer}.v_proj.weight"] += dv.reshape(-1, dv.shape[-1]).T @ s["n1"].reshape(-1, s["n1"].shape[-1])
        dn1 = (
            dq @ p[f"layers.{layer}.q_proj.weight"]
            + dk @ p[f"layers.{layer}.k_proj.weight"]
            + dv @ p[f"layers.{layer}.v_proj.weight"]
        )
        dx_norm, dw1 = _rmsnorm_backward(
            dn1, s["x_in"], s["inv1"], p[f"layers.{layer}.attn_norm.weight"]
        )
        grads[f"layers.{layer}.attn_norm.weight"] += dw1
        dx = dh + dx_norm

    np.add.at(grads["tok_emb"], inputs, dx)
    return loss


def loss_only(model: TinyLM, batch) -> float:
    """Mean next-token cross-entropy without touching grad buffers."""
    toks = np.asarray(batch, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None, :]
    inputs, targets = toks[:, :-1], toks[:, 1:]
    logits, _ = _batched_forward_train(model, inputs)
    zmax = np.max(logits, axis=-1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax), axis=-1, keepdims=True))
    tgt = np.take_along_axis(logits, targets[..., None], axis=-1)
    return float(np.mean(lse - tgt))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # Decoupled weight decay on matrix parameters. Without it a briefly
    # trained model keeps the flat singular spectrum of its random init,
    # and SVD truncation damage stops tracking what the network actually
    # uses; decay shrinks unused directions so low-rank structure is real.
    weight_decay: float = 0.1

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch_size": self.batch_size, "seq_len": self.seq_len,
            "learning_rate": self.learning_rate, "beta1": self.beta1,
            "beta2": self.beta2, "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdamState:
    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, tc: TrainConfig):
        self.t += 1
        bc1 = 1.0 - tc.beta1 ** self.t
        bc2 = 1.0 - tc.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = tc.beta1 * self.m[name] + (1.0 - tc.beta1) * g
            self.v[name] = tc.beta2 * self.v[name] + (1.0 - tc.beta2) * g * g
            p -= tc.learning_rate * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + tc.adam_eps)
            if tc.weight_decay and p.ndim == 2:
                p -= tc.learning_rate * tc.weight_decay * p


def sample_batches(corpus_ids: np.ndarray, tc: TrainConfig, rng: np.random.Generator,
                   count: int) -> np.ndarray:
    """(count, batch_size, seq_len+1) random windows of the corpus."""
    span = tc.seq_len + 1
    high = corpus_ids.size - span
    starts = rng.integers(0, high, size=(count, tc.batch_size))
    idx = starts[..., None] + np.arange(span)
    return corpus_ids[idx]


def train(config: ModelConfig, corpus: bytes, steps: int,
          train_config: TrainConfig | None = None,
          log_every: int = 0) -> tuple[TinyLM, list[float]]:
    """Train from scratch on a byte corpus; returns (model, per-step losses).

    Deterministic for fixed (config.seed, corpus, steps, train_config):
    the same seed always produces a bit-identical parameter set.
    """
    if len(corpus) < MIN_CORPUS_BYTES:
        raise ValidationError(
            f"corpus of {len(corpus)} bytes below minimum {MIN_CORPUS_BYTES}"
        )
    tc = train_config or TrainConfig(steps=steps)
    if tc.steps != steps:
        tc = TrainConfig(**{**tc.to_dict(), "steps": steps})
    model = init_model(config)
    ids = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    rng = np.random.default_rng([config.seed, 1])
    adam = AdamState(model.params)
    losses: list[float] = []
    for step in range(steps):
        batch = sample_batches(ids, tc, rng, 1)[0]
        try:
            loss = backward(model, batch)
        except NumericalError as exc:
            raise NumericalError(f"training diverged at step {step}: {exc}") from exc
        adam.step(model.params, model.grads, tc)
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f}")
    return model, losses


def tokenize_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> str:
    """Bytes back to text; specials dropped, undecodable bytes replaced."""
    raw = bytes(int(i) for i in ids if 0 <= int(i) < 256)
    return raw.decode("utf-8", errors="replace")
