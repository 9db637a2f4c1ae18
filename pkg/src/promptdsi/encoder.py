"""Small transformer encoder with prefix-prompt injection at chosen layers.

Pre-layer-norm blocks, GELU feed-forward, learned absolute position
embeddings. Sequences are stored positions-first: a batch of hidden states is
(B, n, dim). Prefix prompts are virtual tokens concatenated in embedding
space ahead of the keys/values of self-attention; queries always come from
the real tokens only, so the output length never changes and prefixes never
receive position embeddings.

The forward is exposed in stages (embed -> blocks -> final CLS readout) so a
caller can read intermediate activations mid-pass, e.g. to select prompts
from the average embedding below the first prompting layer without a second
pass.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, VocabularyError
from .numerics import array_digest, softmax

CLS_ID = 0
LN_EPS = 1e-5

SINGLE_PASS = "single_pass"
TWO_PASS = "two_pass"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_layers: int = 4
    dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    max_seq_len: int = 32
    prompt_layers: tuple[int, ...] = (2,)  # 1-based, contiguous
    selection_mode: str = SINGLE_PASS

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        layers = tuple(self.prompt_layers)
        if layers:
            if any(l < 1 or l > self.num_layers for l in layers):
                raise ConfigError(f"prompt layers {layers} outside [1, {self.num_layers}]")
            if sorted(layers) != list(range(min(layers), min(layers) + len(layers))):
                raise ConfigError(f"prompt layers {layers} must be contiguous")
            object.__setattr__(self, "prompt_layers", tuple(sorted(layers)))
        if self.selection_mode not in (SINGLE_PASS, TWO_PASS):
            raise ConfigError(f"unknown selection mode {self.selection_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "dim": self.dim,
            "num_heads": self.num_heads,
            "ff_dim": self.ff_dim,
            "max_seq_len": self.max_seq_len,
            "prompt_layers": list(self.prompt_layers),
            "selection_mode": self.selection_mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        obj = dict(obj)
        obj["prompt_layers"] = tuple(obj.get("prompt_layers", (2,)))
        return cls(**obj)


def _layer_param_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [
        p + "ln1.g", p + "ln1.b",
        p + "attn.wq", p + "attn.wk", p + "attn.wv", p + "attn.wo",
        p + "ln2.g", p + "ln2.b",
        p + "ff.w1", p + "ff.b1", p + "ff.w2", p + "ff.b2",
    ]


def encoder_param_names(config: EncoderConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.num_layers):
        names.extend(_layer_param_names(i))
    names.extend(["ln_f.g", "ln_f.b"])
    return names


@dataclass
class EncoderState:
    """All encoder parameters keyed by path; ``frozen`` marks the backbone."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    frozen: bool = False

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> "EncoderState":
        d, ff, v = config.dim, config.ff_dim, config.vocab_size
        params: dict[str, np.ndarray] = {}

        def normal(shape):
            return rng.normal(0.0, 0.02, size=shape).astype(dtype)

        params["tok_emb"] = normal((v, d))
        params["pos_emb"] = normal((config.max_seq_len, d))
        for i in range(config.num_layers):
            p = f"layers.{i}."
            params[p + "ln1.g"] = np.ones(d, dtype=dtype)
            params[p + "ln1.b"] = np.zeros(d, dtype=dtype)
            params[p + "attn.wq"] = normal((d, d))
            params[p + "attn.wk"] = normal((d, d))
            params[p + "attn.wv"] = normal((d, d))
            params[p + "attn.wo"] = normal((d, d))
            params[p + "ln2.g"] = np.ones(d, dtype=dtype)
            params[p + "ln2.b"] = np.zeros(d, dtype=dtype)
            params[p + "ff.w1"] = normal((d, ff))
            params[p + "ff.b1"] = np.zeros(ff, dtype=dtype)
            params[p + "ff.w2"] = normal((ff, d))
            params[p + "ff.b2"] = np.zeros(d, dtype=dtype)
        params["ln_f.g"] = np.ones(d, dtype=dtype)
        params["ln_f.b"] = np.zeros(d, dtype=dtype)
        return cls(config=config, params=params)

    @property
    def dtype(self) -> np.dtype:
        return self.params["tok_emb"].dtype

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(array_digest(self.params[name]).encode())
        return h.hexdigest()

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class PrefixSet:
    """One prompt tensor per prompting layer, each (m, dim) with even m.

    The first m/2 rows feed the attention keys, the last m/2 the values.
    """

    prompts: dict[int, np.ndarray]

    def __post_init__(self):
        for layer, p in self.prompts.items():
            if p.ndim != 2 or p.shape[0] % 2 != 0:
                raise ConfigError(f"prefix for layer {layer} must be (m, dim) with even m, got {p.shape}")

    def split(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.prompts[layer]
        m2 = p.shape[0] // 2
        return p[:m2], p[m2:]


@dataclass
class PassCounter:
    """Counts per-query transformer-block executions (the unit behind the
    single- vs two-pass cost comparison)."""

    layer_invocations: int = 0
    forward_passes: int = 0


# ---------------------------------------------------------------------------
# token plumbing
# ---------------------------------------------------------------------------


def prepend_cls(tokens) -> list[int]:
    """Tokenizer step: every encoder input starts with the reserved CLS id."""
    return [CLS_ID] + list(tokens)


def validate_ids(ids: np.ndarray, config: EncoderConfig) -> None:
    if ids.ndim != 2:
        raise DataError(f"expected a (B, n) id batch, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise DataError(
            f"sequence length {ids.shape[1]} exceeds max {config.max_seq_len}; refusing to truncate"
        )
    if ids.shape[1] < 1:
        raise DataError("empty sequence")
    if np.any(ids < 0) or np.any(ids >= config.vocab_size):
        bad = ids[(ids < 0) | (ids >= config.vocab_size)][0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {config.vocab_size}")
    if np.any(ids[:, 0] != CLS_ID):
        raise DataError("sequences must begin with the CLS token id 0")


# ---------------------------------------------------------------------------
# staged forward
# ---------------------------------------------------------------------------


def _gelu(x: np.ndarray):
    """Exact (erf) GELU; returns (value, cdf) so backward can reuse the erf."""
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * cdf, cdf


def _gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * phi


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def embed_batch(ids: np.ndarray, state: EncoderState):
    """Token + position embeddings; layer-0 hidden states."""
    validate_ids(ids, state.config)
    x = state.params["tok_emb"][ids] + state.params["pos_emb"][: ids.shape[1]]
    return x, {"ids": ids}


def embed_backward(dx: np.ndarray, cache, state: EncoderState, grads: dict) -> None:
    ids = cache["ids"]
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][: ids.shape[1]] += dx.sum(axis=0)


def attention_with_prefix(
    x: np.ndarray,
    p_k: np.ndarray | None,
    p_v: np.ndarray | None,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    num_heads: int,
) -> np.ndarray:
    """Multi-head attention over [prefix, x] keys/values with queries from x.

    x is (n, dim); p_k and p_v are (m/2, dim) or None for an empty prefix.
    Returns (n, dim). Attention is fully bidirectional (no mask) and the
    prefix rows never pass through the query projection, so the output length
    is always n.
    """
    d = x.shape[1]
    if d % num_heads != 0:
        raise ConfigError(f"dim {d} not divisible by {num_heads} heads")
    pk = None if p_k is None or p_k.shape[0] == 0 else p_k[None]
    pv = None if p_v is None or p_v.shape[0] == 0 else p_v[None]
    out, _ = _attn_forward(x[None], pk, pv, wq, wk, wv, wo, num_heads)
    return out[0]


def _heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _unheads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attn_forward(u, pk, pv, wq, wk, wv, wo, num_heads):
    """u (B,n,d); pk/pv (B,m2,d) or None. Returns (out (B,n,d), cache)."""
    bsz, n, d = u.shape
    dh = d // num_heads
    kin = u if pk is None else np.concatenate([pk, u], axis=1)
    vin = u if pv is None else np.concatenate([pv, u], axis=1)
    m2 = 0 if pk is None else pk.shape[1]
    qh = _heads(u @ wq, num_heads)          # (B, H, n, dh)
    kh = _heads(kin @ wk, num_heads)        # (B, H, m2+n, dh)
    vh = _heads(vin @ wv, num_heads)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    attn = softmax(scores, axis=-1)
    ctx = _unheads(attn @ vh)               # (B, n, d)
    out = ctx @ wo
    cache = {"u": u, "kin": kin, "vin": vin, "qh": qh, "kh": kh, "vh": vh,
             "attn": attn, "ctx": ctx, "m2": m2, "num_heads": num_heads}
    return out, cache


def _attn_backward(dout, cache, wq, wk, wv, wo, need_weight_grads=True):
    u, kin, vin = cache["u"], cache["kin"], cache["vin"]
    qh, kh, vh, attn = cache["qh"], cache["kh"], cache["vh"], cache["attn"]
    m2, num_heads = cache["m2"], cache["num_heads"]
    bsz, n, d = u.shape
    dh = d // num_heads

    dctx = _heads(dout @ wo.T, num_heads)                 # (B, H, n, dh)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)               # (B, H, n, M)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx               # (B, H, M, dh)
    dscores = attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh                                    # (B, H, n, dh)
    dkh = dscores.transpose(0, 1, 3, 2) @ qh              # (B, H, M, dh)

    dq = _unheads(dqh)
    dk = _unheads(dkh)
    dv = _unheads(dvh)
    wgrads = None
    if need_weight_grads:
        flat = lambda x: x.reshape(-1, x.shape[-1])
        wgrads = {
            "attn.wq": flat(u).T @ flat(dq),
            "attn.wk": flat(kin).T @ flat(dk),
            "attn.wv": flat(vin).T @ flat(dv),
            "attn.wo": flat(cache["ctx"]).T @ flat(dout),
        }
    dkin = dk @ wk.T
    dvin = dv @ wv.T
    du = dq @ wq.T + dkin[:, m2:] + dvin[:, m2:]
    dpk = dkin[:, :m2] if m2 else None
    dpv = dvin[:, :m2] if m2 else None
    return du, dpk, dpv, wgrads


def block_forward(
    x: np.ndarray,
    state: EncoderState,
    layer: int,
    prefix: tuple[np.ndarray, np.ndarray] | None = None,
    counter: PassCounter | None = None,
):
    """One pre-LN block (1-based ``layer``) on a (B, n, d) batch.

    ``prefix`` is an optional (p_k, p_v) pair of (B, m/2, d) arrays injected
    into this block's attention keys/values.
    """
    p = state.params
    pre = f"layers.{layer - 1}."
    if counter is not None:
        counter.layer_invocations += x.shape[0]
    u1, ln1_cache = _ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    pk, pv = (None, None) if prefix is None else prefix
    if pk is not None and pk.shape[1] == 0:
        pk, pv = None, None
    a, attn_cache = _attn_forward(
        u1, pk, pv, p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"],
        p[pre + "attn.wo"], state.config.num_heads,
    )
    x_mid = x + a
    u2, ln2_cache = _ln_forward(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
    z1 = u2 @ p[pre + "ff.w1"] + p[pre + "ff.b1"]
    g1, gelu_cdf = _gelu(z1)
    x_out = x_mid + g1 @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    cache = {"layer": layer, "ln1": ln1_cache, "attn": attn_cache,
             "ln2": ln2_cache, "u2": u2, "z1": z1, "g1": g1, "gelu_cdf": gelu_cdf}
    return x_out, cache


def block_backward(dx_out: np.ndarray, cache, state: EncoderState, grads: dict | None):
    """Backward of one block; returns (dx_in, (dpk, dpv)).

    ``grads=None`` skips the weight-gradient accumulation (frozen backbone):
    only the input and prefix gradients are produced."""
    p = state.params
    pre = f"layers.{cache['layer'] - 1}."
    g1, z1, u2 = cache["g1"], cache["z1"], cache["u2"]
    want_w = grads is not None
    flat = lambda x: x.reshape(-1, x.shape[-1])

    if want_w:
        grads[pre + "ff.w2"] += flat(g1).T @ flat(dx_out)
        grads[pre + "ff.b2"] += dx_out.sum(axis=(0, 1))
    dg1 = dx_out @ p[pre + "ff.w2"].T
    dz1 = dg1 * _gelu_grad(z1, cache["gelu_cdf"])
    if want_w:
        grads[pre + "ff.w1"] += flat(u2).T @ flat(dz1)
        grads[pre + "ff.b1"] += dz1.sum(axis=(0, 1))
    du2 = dz1 @ p[pre + "ff.w1"].T
    dx_mid_ln, dg, db = _ln_backward(du2, cache["ln2"], p[pre + "ln2.g"])
    if want_w:
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
    dx_mid = dx_out + dx_mid_ln

    du1, dpk, dpv, attn_grads = _attn_backward(
        dx_mid, cache["attn"], p[pre + "attn.wq"], p[pre + "attn.wk"],
        p[pre + "attn.wv"], p[pre + "attn.wo"], need_weight_grads=want_w,
    )
    if want_w:
        for name, g in attn_grads.items():
            grads[pre + name] += g
    dx_ln, dg, db = _ln_backward(du1, cache["ln1"], p[pre + "ln1.g"])
    if want_w:
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
    dx_in = dx_mid + dx_ln
    return dx_in, (dpk, dpv)


def final_cls_forward(x: np.ndarray, state: EncoderState):
    """Final layer norm over the last block's output; returns the CLS row."""
    y, cache = _ln_forward(x, state.params["ln_f.g"], state.params["ln_f.b"])
    return y[:, 0], cache


def final_cls_backward(d_hq: np.ndarray, cache, x_shape, state: EncoderState, grads: dict | None):
    dy = np.zeros(x_shape, dtype=d_hq.dtype)
    dy[:, 0] = d_hq
    dx, dg, db = _ln_backward(dy, cache, state.params["ln_f.g"])
    if grads is not None:
        grads["ln_f.g"] += dg
        grads["ln_f.b"] += db
    return dx


# ---------------------------------------------------------------------------
# whole-sequence conveniences
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutputs:
    hidden: list[np.ndarray]  # [embeddings, block 1, ..., block L], each (n, d)
    h_q: np.ndarray  # (d,) final-layer CLS after the last layer norm
    caches: list = field(default_factory=list, repr=False)


def encoder_forward(
    token_ids,
    state: EncoderState,
    prefix: PrefixSet | None = None,
    counter: PassCounter | None = None,
) -> EncoderOutputs:
    """Full forward for a single sequence (already CLS-prefixed)."""
    ids = np.asarray([list(token_ids)], dtype=np.intp)
    x, _ = embed_batch(ids, state)
    hidden = [x[0].copy()]
    caches = []
    for layer in range(1, state.config.num_layers + 1):
        pfx = None
        if prefix is not None and layer in prefix.prompts:
            pk, pv = prefix.split(layer)
            pfx = (pk[None], pv[None])
        x, cache = block_forward(x, state, layer, pfx, counter)
        hidden.append(x[0].copy())
        caches.append(cache)
    h_q, _ = final_cls_forward(x, state)
    if counter is not None:
        counter.forward_passes += 1
    return EncoderOutputs(hidden=hidden, h_q=h_q[0], caches=caches)


def avg_at_layer(token_ids, state: EncoderState, layer: int) -> np.ndarray:
    """Mean over positions of the hidden states below ``layer`` (1-based).

    For layer 1 this is the mean of the embedding-layer outputs. Computed
    prompt-free: the result can never depend on prompt parameters.
    """
    if not 1 <= layer <= state.config.num_layers:
        raise ConfigError(f"layer {layer} outside [1, {state.config.num_layers}]")
    ids = np.asarray([list(token_ids)], dtype=np.intp)
    x, _ = embed_batch(ids, state)
    for li in range(1, layer):
        x, _ = block_forward(x, state, li)
    return x[0].mean(axis=0)
