"""A small OPT-style decoder-only transformer in numpy with hand-written backprop.

Weights live in an ordered ``params`` dict keyed by dotted names that mirror
the OPT layout (``decoder.layers.<i>.fc1.weight`` ...). Submodule outputs can
be recorded or overwritten ("patched") by path, e.g. ``decoder.layers.2.fc1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from leaklab.errors import ArgumentError, PathError
from leaklab.numeric import primitives as P
from leaklab.numeric.rng import Rng
from leaklab.text import PAD, VOCAB_SIZE

INIT_STD = 0.02

# Per-block submodules recorded by a full trace, in flat-index order.
BLOCK_SUBMODULES = (
    "self_attn_layer_norm",
    "self_attn.q_proj",
    "self_attn.k_proj",
    "self_attn.v_proj",
    "self_attn.out_proj",
    "fc1",
    "fc2",
)
EMBED_PATH = "decoder.embeddings"
PROJECTIONS = ("self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.out_proj", "fc1", "fc2")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 128
    seed: int = 0
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1:
            raise ArgumentError("n_layers, d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ArgumentError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_ff < self.d_model:
            raise ArgumentError("d_ff must be >= d_model")
        if self.vocab_size != VOCAB_SIZE:
            raise ArgumentError(f"vocab_size must be {VOCAB_SIZE} for the byte tokenizer")
        if self.max_seq < 2:
            raise ArgumentError("max_seq must be >= 2")
        if self.activation not in P.ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def layer_path(i: int, sub: str | None = None) -> str:
    return f"decoder.layers.{i}" if sub is None else f"decoder.layers.{i}.{sub}"


def trace_paths(config: ModelConfig) -> list[str]:
    """All recordable trace points in flat-index order (embeddings first)."""
    out = [EMBED_PATH]
    for i in range(config.n_layers):
        out.extend(layer_path(i, s) for s in BLOCK_SUBMODULES)
    return out


def fc1_paths(config: ModelConfig) -> list[str]:
    return [layer_path(i, "fc1") for i in range(config.n_layers)]


def projection_paths(config: ModelConfig) -> list[str]:
    return [layer_path(i, s) for i in range(config.n_layers) for s in PROJECTIONS]


@dataclass
class DecoderModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def named_weights(self) -> list[tuple[str, np.ndarray]]:
        return list(self.params.items())

    def weight(self, path: str) -> np.ndarray:
        """The 2-D weight of a linear submodule path such as ``decoder.layers.0.fc1``."""
        name = path + ".weight"
        if name not in self.params or self.params[name].ndim != 2:
            raise PathError(f"no 2-D weight at submodule path {path!r}")
        return self.params[name]

    def copy(self) -> "DecoderModel":
        return DecoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "decoder.embed_tokens.weight": (v, d),
        "decoder.embed_positions.weight": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        p = layer_path(i)
        shapes[f"{p}.self_attn_layer_norm.weight"] = (d,)
        shapes[f"{p}.self_attn_layer_norm.bias"] = (d,)
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            shapes[f"{p}.self_attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.self_attn.{proj}.bias"] = (d,)
        shapes[f"{p}.final_layer_norm.weight"] = (d,)
        shapes[f"{p}.final_layer_norm.bias"] = (d,)
        shapes[f"{p}.fc1.weight"] = (f, d)
        shapes[f"{p}.fc1.bias"] = (f,)
        shapes[f"{p}.fc2.weight"] = (d, f)
        shapes[f"{p}.fc2.bias"] = (d,)
    shapes["decoder.final_layer_norm.weight"] = (d,)
    shapes["decoder.final_layer_norm.bias"] = (d,)
    return shapes


def init(config: ModelConfig) -> DecoderModel:
    rng = Rng(config.seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if "layer_norm" in name:
            params[name] = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        elif name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.child(name).normal(INIT_STD, shape)
    return DecoderModel(config, params)


# -------------------------------------------------------------------- forward

LoraMap = Mapping[str, tuple[np.ndarray, np.ndarray, float]]
PatchMap = Mapping[str, Mapping[int, np.ndarray]]


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, T, V)
    trace: dict[str, np.ndarray]  # path -> (B, T, dim) recorded activations
    cache: dict | None = None


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ArgumentError(f"expected a non-empty token sequence, got shape {arr.shape}")
    return arr


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -np.inf), k=1)


def forward(
    model: DecoderModel,
    tokens,
    record: Iterable[str] | None = None,
    patch: PatchMap | None = None,
    lora: LoraMap | None = None,
    keep_cache: bool = False,
) -> ForwardResult:
    """Causal forward pass over a (B, T) or (T,) token array.

    ``record`` names submodule paths whose outputs are returned in ``trace``
    (``decoder.layers.<i>.fc1:input`` records the input of fc1). ``patch``
    overwrites a path's output at given positions before it flows onward.
    """
    cfg = model.config
    p = model.params
    ids = _as_batch(tokens)
    B, T = ids.shape
    if T > cfg.max_seq:
        raise ArgumentError(f"sequence length {T} exceeds max_seq={cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ArgumentError("token id out of vocabulary range")
    want = set(record or ())
    patch = patch or {}
    lora = lora or {}
    trace: dict[str, np.ndarray] = {}
    cache: dict = {"ids": ids, "layers": []} if keep_cache else None
    act, _ = P.ACTIVATIONS[cfg.activation]

    def emit(path: str, value: np.ndarray) -> np.ndarray:
        if path in patch:
            value = value.copy()
            for pos, vec in patch[path].items():
                value[:, pos] = vec
        if path in want:
            trace[path] = value.copy()
        return value

    def lin(path: str, x: np.ndarray) -> np.ndarray:
        y = P.linear(x, p[path + ".weight"], p[path + ".bias"])
        if path in lora:
            a, b, scale = lora[path]
            y = y + scale * ((x @ a.T) @ b.T)
        return y

    h = emit(EMBED_PATH, p["decoder.embed_tokens.weight"][ids] + p["decoder.embed_positions.weight"][:T])
    mask = _causal_mask(T)
    H, hd = cfg.n_heads, cfg.head_dim
    for i in range(cfg.n_layers):
        lp = layer_path(i)
        a_in, ln1_c = P.layernorm(h, p[f"{lp}.self_attn_layer_norm.weight"], p[f"{lp}.self_attn_layer_norm.bias"])
        a_in = emit(f"{lp}.self_attn_layer_norm", a_in)
        q = emit(f"{lp}.self_attn.q_proj", lin(f"{lp}.self_attn.q_proj", a_in))
        k = emit(f"{lp}.self_attn.k_proj", lin(f"{lp}.self_attn.k_proj", a_in))
        v = emit(f"{lp}.self_attn.v_proj", lin(f"{lp}.self_attn.v_proj", a_in))
        qh = q.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        att = P.softmax(qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(hd) + mask)
        ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        o = emit(f"{lp}.self_attn.out_proj", lin(f"{lp}.self_attn.out_proj", ctx))
        h_mid = h + o
        m_in, ln2_c = P.layernorm(h_mid, p[f"{lp}.final_layer_norm.weight"], p[f"{lp}.final_layer_norm.bias"])
        m_in = emit(f"{lp}.final_layer_norm", m_in)
        if f"{lp}.fc1:input" in want:
            trace[f"{lp}.fc1:input"] = m_in.copy()
        f1 = emit(f"{lp}.fc1", lin(f"{lp}.fc1", m_in))
        g = act(f1)
        f2 = emit(f"{lp}.fc2", lin(f"{lp}.fc2", g))
        h_out = emit(lp, h_mid + f2)
        if keep_cache:
            cache["layers"].append(
                dict(h=h, a_in=a_in, ln1=ln1_c, qh=qh, kh=kh, vh=vh, att=att, ctx=ctx,
                     m_in=m_in, ln2=ln2_c, f1=f1, g=g)
            )
        h = h_out
    hf, lnf_c = P.layernorm(h, p["decoder.final_layer_norm.weight"], p["decoder.final_layer_norm.bias"])
    logits = hf @ p["decoder.embed_tokens.weight"].T
    if keep_cache:
        cache.update(hf=hf, lnf=lnf_c)
    return ForwardResult(logits=logits, trace=trace, cache=cache)


def logits(model: DecoderModel, tokens, lora: LoraMap | None = None) -> np.ndarray:
    return forward(model, tokens, lora=lora).logits


# ------------------------------------------------------------------- backward


def backward(
    model: DecoderModel,
    cache: dict,
    dlogits: np.ndarray,
    lora: LoraMap | None = None,
    param_grads: bool = True,
) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of the forward pass.

    Returns gradients keyed by parameter name (when ``param_grads``) and by
    ``<path>.lora_A`` / ``<path>.lora_B`` for every adapter in ``lora``.
    """
    cfg = model.config
    p = model.params
    lora = lora or {}
    grads: dict[str, np.ndarray] = {}
    _, act_bwd = P.ACTIVATIONS[cfg.activation]
    ids = cache["ids"]
    B, T = ids.shape
    H, hd = cfg.n_heads, cfg.head_dim
    E = p["decoder.embed_tokens.weight"]

    def acc(name, g):
        if g is None:
            return
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    def lin_bwd(path: str, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
        dx, dw, db = P.linear_backward(dy, x, p[path + ".weight"], param_grads)
        if param_grads:
            acc(path + ".weight", dw)
            acc(path + ".bias", db)
        if path in lora:
            a, b, scale = lora[path]
            xa = x @ a.T  # (..., r)
            dyb = dy @ b  # (..., r)
            dx = dx + scale * (dyb @ a)
            r = a.shape[0]
            acc(path + ".lora_B", scale * dy.reshape(-1, dy.shape[-1]).T @ xa.reshape(-1, r))
            acc(path + ".lora_A", scale * dyb.reshape(-1, r).T @ x.reshape(-1, x.shape[-1]))
        return dx

    dhf = dlogits @ E
    if param_grads:
        acc("decoder.embed_tokens.weight", dlogits.reshape(-1, dlogits.shape[-1]).T @ cache["hf"].reshape(-1, cfg.d_model))
    dh, dg, db = P.layernorm_backward(dhf, cache["lnf"], p["decoder.final_layer_norm.weight"], param_grads)
    if param_grads:
        acc("decoder.final_layer_norm.weight", dg)
        acc("decoder.final_layer_norm.bias", db)

    for i in reversed(range(cfg.n_layers)):
        lp = layer_path(i)
        c = cache["layers"][i]
        # MLP branch
        dgact = lin_bwd(f"{lp}.fc2", dh, c["g"])
        df1 = act_bwd(dgact, c["f1"])
        dm_in = lin_bwd(f"{lp}.fc1", df1, c["m_in"])
        dh_mid, dg2, db2 = P.layernorm_backward(dm_in, c["ln2"], p[f"{lp}.final_layer_norm.weight"], param_grads)
        if param_grads:
            acc(f"{lp}.final_layer_norm.weight", dg2)
            acc(f"{lp}.final_layer_norm.bias", db2)
        dh_mid = dh_mid + dh
        # attention branch
        dctx = lin_bwd(f"{lp}.self_attn.out_proj", dh_mid, c["ctx"])
        dctxh = dctx.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        datt = dctxh @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["att"].transpose(0, 1, 3, 2) @ dctxh
        dscores = P.softmax_backward(datt, c["att"]) / math.sqrt(hd)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)

        da_in = lin_bwd(f"{lp}.self_attn.q_proj", merge(dqh), c["a_in"])
        da_in = da_in + lin_bwd(f"{lp}.self_attn.k_proj", merge(dkh), c["a_in"])
        da_in = da_in + lin_bwd(f"{lp}.self_attn.v_proj", merge(dvh), c["a_in"])
        dh_in, dg1, db1 = P.layernorm_backward(da_in, c["ln1"], p[f"{lp}.self_attn_layer_norm.weight"], param_grads)
        if param_grads:
            acc(f"{lp}.self_attn_layer_norm.weight", dg1)
            acc(f"{lp}.self_attn_layer_norm.bias", db1)
        dh = dh_in + dh_mid

    if param_grads:
        acc("decoder.embed_tokens.weight", P.embedding_backward(dh, ids, cfg.vocab_size))
        dpos = np.zeros_like(p["decoder.embed_positions.weight"])
        dpos[:T] = dh.sum(axis=0)
        acc("decoder.embed_positions.weight", dpos)
    return grads


# ----------------------------------------------------------- losses & metrics


def target_weights(ids: np.ndarray) -> np.ndarray:
    """0/1 weights over next-token targets ``ids[:, 1:]``, excluding PAD."""
    return (ids[:, 1:] != PAD).astype(np.float64)


def loss_and_grads(
    model: DecoderModel,
    tokens,
    weights: np.ndarray | None = None,
    lora: LoraMap | None = None,
    param_grads: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    ids = _as_batch(tokens)
    if ids.shape[1] < 2:
        raise ArgumentError("need at least 2 tokens for a next-token loss")
    w = target_weights(ids) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ArgumentError("no loss-bearing targets (all PAD or masked out)")
    res = forward(model, ids[:, :-1], lora=lora, keep_cache=True)
    loss, dlogits = P.cross_entropy(res.logits, ids[:, 1:], w)
    return loss, backward(model, res.cache, dlogits, lora=lora, param_grads=param_grads)


def weighted_loss(model: DecoderModel, tokens, weights: np.ndarray, lora: LoraMap | None = None) -> float:
    ids = _as_batch(tokens)
    if ids.shape[1] < 2:
        raise ArgumentError("need at least 2 tokens for a next-token loss")
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ArgumentError("no loss-bearing targets (all PAD or masked out)")
    res = forward(model, ids[:, :-1], lora=lora)
    loss, _ = P.cross_entropy(res.logits, ids[:, 1:], w)
    return loss


def lm_loss(model: DecoderModel, tokens, lora: LoraMap | None = None) -> float:
    """Mean next-token cross-entropy over non-PAD targets."""
    ids = _as_batch(tokens)
    return weighted_loss(model, ids, target_weights(ids), lora=lora)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def token_accuracy(
    model: DecoderModel, corpus: Sequence[Sequence[int]], lora: LoraMap | None = None, batch: int = 64
) -> float:
    """Teacher-forced top-1 next-token accuracy over all non-PAD targets."""
    if not corpus:
        raise ArgumentError("empty corpus")
    hits = 0
    total = 0
    order = sorted(range(len(corpus)), key=lambda i: len(corpus[i]))
    for start in range(0, len(order), batch):
        ids = pad_batch([corpus[i] for i in order[start : start + batch]])
        if ids.shape[1] < 2:
            continue
        lg = forward(model, ids[:, :-1], lora=lora).logits
        pred = lg.argmax(axis=-1)
        w = target_weights(ids).astype(bool)
        hits += int(((pred == ids[:, 1:]) & w).sum())
        total += int(w.sum())
    if total == 0:
        raise ArgumentError("corpus has no non-PAD targets")
    return hits / total


def greedy_decode(
    model: DecoderModel,
    prompt: Sequence[int],
    max_new: int,
    stop: int | None = None,
    lora: LoraMap | None = None,
) -> list[int]:
    """Append argmax tokens (ties -> lowest id) until ``stop`` or ``max_new``."""
    out = [int(t) for t in prompt]
    if not out:
        raise ArgumentError("empty prompt")
    if max_new < 0 or len(out) + max_new > model.config.max_seq:
        raise ArgumentError(
            f"prompt of {len(out)} tokens + {max_new} new exceeds max_seq={model.config.max_seq}"
        )
    for _ in range(max_new):
        lg = forward(model, out, lora=lora).logits[0, -1]
        nxt = int(np.argmax(lg))  # first maximal index
        out.append(nxt)
        if stop is not None and nxt == stop:
            break
    return out
