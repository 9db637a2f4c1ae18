"""Dense float kernels with exact forward semantics and verified gradients.

Everything here operates on plain numpy arrays. Two precisions are supported:
float64 for gradient-check / audit work, float32 for experiment runs (finite
differences are unreliable in 32-bit).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DomainError, NumericError

DTYPE_TEST = np.float64
DTYPE_RUN = np.float32


def resolve_dtype(name) -> np.dtype:
    """Map 'float32'/'float64' (or a dtype) to the numpy dtype."""
    if isinstance(name, str):
        if name not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {name!r}")
        return np.dtype(name)
    return np.dtype(name)


def array_digest(arr: np.ndarray) -> str:
    """SHA-256 of the raw little-endian bytes; used for freeze audits."""
    import hashlib

    a = np.ascontiguousarray(arr)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return hashlib.sha256(a.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (subtracts the running max)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy_logits(logits: np.ndarray, target_ids) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over a batch of logit rows.

    Returns (loss, grad) where grad = (softmax - onehot) / B, the exact
    gradient of the loss w.r.t. the logits.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ContractError(f"logits must be (B, C) with B >= 1, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    targets = np.asarray(target_ids, dtype=np.intp)
    b, c = logits.shape
    if targets.shape != (b,):
        raise ContractError(f"expected {b} target ids, got shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError(f"target id out of range [0, {c})")
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(b), targets].mean())
    grad = softmax(logits, axis=1)
    grad[np.arange(b), targets] -= 1.0
    grad /= b
    return loss, grad


# ---------------------------------------------------------------------------
# cosine geometry
# ---------------------------------------------------------------------------


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine of a zero-norm vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); values in [0, 2]."""
    return 1.0 - cosine_similarity(u, v)


def cosine_similarity_grads(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d cos(u, v) / du and / dv."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine of a zero-norm vector is undefined")
    cos = float(np.dot(u, v) / (nu * nv))
    du = v / (nu * nv) - cos * u / (nu * nu)
    dv = u / (nu * nv) - cos * v / (nv * nv)
    return du, dv


# ---------------------------------------------------------------------------
# AdamW (decoupled weight decay)
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam.

    Per parameter: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, then
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p) with bias-corrected
    moments. An optional per-parameter mask restricts the update (and the
    decay) to unmasked entries, leaving masked entries byte-identical.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        """Apply one update in place to every parameter that has a gradient."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            if masks is not None and masks.get(name) is not None:
                update = update * masks[name]
            p -= self.lr * update


def adamw_step(params: dict, grads: dict, state: AdamW, masks: dict | None = None) -> AdamW:
    """Functional wrapper around AdamW.step; updates params in place."""
    state.step(params, grads, masks)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    entries_checked: int
    entries: list | None = None  # (name, flat index, analytic, numeric, rel)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    @property
    def max_abs_err(self) -> float:
        if not self.entries:
            return 0.0
        return max(abs(a - n) for _, _, a, n, _ in self.entries)


def check_gradients(
    f,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_entries: int = 64,
    seed: int = 0,
    masks: dict | None = None,
    collect_entries: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` is a zero-argument callable returning the scalar loss as currently
    parameterized; entries of ``params`` are perturbed in place around their
    current values. At most ``max_entries`` coordinates per tensor are sampled
    uniformly with a fixed seed; a mask (broadcastable to the parameter, zero
    = frozen) restricts sampling to trainable entries. Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8). Arrays must be float64.

    Note the measurement limit: f carries O(|f|*ulp) evaluation noise, so a
    coordinate whose true derivative is below roughly that noise / (2*eps)
    cannot be resolved at this eps no matter how correct the analytic
    gradient is. ``collect_entries`` exposes per-coordinate records so a
    caller can re-measure such coordinates at a different evaluation point.
    """
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    records: list | None = [] if collect_entries else None
    total = 0
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradient checks require float64 parameters ({name!r} is {p.dtype})")
        a = analytic[name]
        if a.shape != p.shape:
            raise ContractError(f"analytic gradient shape mismatch for {name!r}")
        mask = masks.get(name) if masks is not None else None
        if mask is None:
            eligible = np.arange(p.size)
        else:
            eligible = np.flatnonzero(np.broadcast_to(mask, p.shape).reshape(-1) != 0)
        n_entries = eligible.size
        if n_entries == 0:
            continue
        if n_entries <= max_entries:
            idxs = eligible
        else:
            idxs = eligible[rng.choice(n_entries, size=max_entries, replace=False)]
        flat = p.reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(a.reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
            total += 1
            if records is not None:
                records.append((name, int(i), ana, numeric, rel))
        per_param[name] = worst
    return GradCheckReport(per_param=per_param, entries_checked=total, entries=records)
