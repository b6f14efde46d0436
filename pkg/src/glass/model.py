"""Deterministic desk-scale decoder-only transformer with gated FFN blocks.

The model is intentionally small and fully reproducible: pre-RMSNorm
residual stack, multi-head causal attention, a gated feed-forward block
per layer (up/gate expansion, elementwise gating, down projection), and
an output head tied to the token embeddings.  All math is float64 numpy.

Besides the exact forward pass, the module provides manual reverse-mode
gradients of the cross-entropy loss with respect to every FFN hidden
activation, and constrained temperature sampling used for self-generated
calibration corpora.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import storage
from .errors import NumericError, ValidationError

UP_ACTIVATIONS = ("identity", "relu", "silu", "gelu_tanh")
GATE_ACTIVATIONS = ("silu", "sigmoid", "identity")

BOS_ID = 0

_GELU_C = math.sqrt(2.0 / math.pi)


def _identity(z):
    return z


def _d_identity(z):
    return np.ones_like(z)


def _relu(z):
    return np.maximum(z, 0.0)


def _d_relu(z):
    return (z > 0.0).astype(np.float64)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _d_sigmoid(z):
    s = _sigmoid(z)
    return s * (1.0 - s)


def _silu(z):
    return z * _sigmoid(z)


def _d_silu(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _gelu_tanh(z):
    u = _GELU_C * (z + 0.044715 * z**3)
    return 0.5 * z * (1.0 + np.tanh(u))


def _d_gelu_tanh(z):
    u = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * z**2)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * du


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (_identity, _d_identity),
    "relu": (_relu, _d_relu),
    "silu": (_silu, _d_silu),
    "sigmoid": (_sigmoid, _d_sigmoid),
    "gelu_tanh": (_gelu_tanh, _d_gelu_tanh),
}


def activation(name: str) -> Callable:
    return _ACTIVATIONS[name][0]


def activation_grad(name: str) -> Callable:
    return _ACTIVATIONS[name][1]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture configuration of a desk-scale decoder."""

    vocab_size: int
    d_model: int
    ffn_width: int
    n_layers: int
    n_heads: int
    max_seq: int
    phi_u: str = "identity"
    phi_g: str = "silu"
    norm_eps: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "ffn_width": self.ffn_width,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq": self.max_seq,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.phi_u not in UP_ACTIVATIONS:
            raise ValidationError(f"phi_u must be one of {UP_ACTIVATIONS}, got {self.phi_u!r}")
        if self.phi_g not in GATE_ACTIVATIONS:
            raise ValidationError(f"phi_g must be one of {GATE_ACTIVATIONS}, got {self.phi_g!r}")
        if not (self.norm_eps > 0 and math.isfinite(self.norm_eps)):
            raise ValidationError(f"norm_eps must be a positive real, got {self.norm_eps!r}")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ValidationError(f"seed must fit in an unsigned 64-bit integer, got {self.seed!r}")

    def to_doc(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "ffn_width": self.ffn_width,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq": self.max_seq,
            "phi_u": self.phi_u,
            "phi_g": self.phi_g,
            "norm_eps": self.norm_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "ModelSpec":
        spec = cls(**{k: doc[k] for k in cls.__dataclass_fields__})
        spec.validate()
        return spec


@dataclass(frozen=True)
class PlantedSpec:
    """Designates FFN units whose expansion columns get inflated at init.

    Planting creates a known "important" unit subset per layer so that
    recovery behaviour can be tested against ground truth.
    """

    units: Mapping[int, tuple[int, ...]]
    scale: float = 4.0

    def validate(self, spec: ModelSpec) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"planted scale must be a positive real, got {self.scale!r}")
        for layer, idx in self.units.items():
            if not (0 <= layer < spec.n_layers):
                raise ValidationError(f"planted layer {layer} outside [0, {spec.n_layers})")
            for j in idx:
                if not (0 <= j < spec.ffn_width):
                    raise ValidationError(
                        f"planted unit {j} in layer {layer} outside [0, {spec.ffn_width})"
                    )


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Weights of one decoder layer; arrays are read-only after init."""

    index: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray
    b_up: np.ndarray
    b_gate: np.ndarray
    b_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    phi_u: str = "identity"
    phi_g: str = "silu"

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down",
                     "b_up", "b_gate", "b_down", "attn_norm", "ffn_norm"):
            getattr(self, name).setflags(write=False)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set, including the spec it was built from."""

    spec: ModelSpec
    embed: np.ndarray
    layers: tuple[LayerParams, ...]
    final_norm: np.ndarray

    def __post_init__(self):
        self.embed.setflags(write=False)
        self.final_norm.setflags(write=False)

    def validate(self) -> None:
        self.spec.validate()
        d, m, v = self.spec.d_model, self.spec.ffn_width, self.spec.vocab_size
        shapes = {"embed": (self.embed, (v, d)), "final_norm": (self.final_norm, (d,))}
        if len(self.layers) != self.spec.n_layers:
            raise ValidationError(
                f"expected {self.spec.n_layers} layers, got {len(self.layers)}"
            )
        for layer in self.layers:
            shapes.update({
                f"layers[{layer.index}].wq": (layer.wq, (d, d)),
                f"layers[{layer.index}].wk": (layer.wk, (d, d)),
                f"layers[{layer.index}].wv": (layer.wv, (d, d)),
                f"layers[{layer.index}].wo": (layer.wo, (d, d)),
                f"layers[{layer.index}].w_up": (layer.w_up, (d, m)),
                f"layers[{layer.index}].w_gate": (layer.w_gate, (d, m)),
                f"layers[{layer.index}].w_down": (layer.w_down, (m, d)),
                f"layers[{layer.index}].b_up": (layer.b_up, (m,)),
                f"layers[{layer.index}].b_gate": (layer.b_gate, (m,)),
                f"layers[{layer.index}].b_down": (layer.b_down, (d,)),
                f"layers[{layer.index}].attn_norm": (layer.attn_norm, (d,)),
                f"layers[{layer.index}].ffn_norm": (layer.ffn_norm, (d,)),
            })
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Per-layer, per-token FFN activations plus the output logits.

    ``h[l][t]`` is the gated hidden vector of layer ``l`` at position
    ``t``; ``z_u``/``z_g`` are the matching pre-activations.
    """

    h: tuple[np.ndarray, ...]
    z_u: tuple[np.ndarray, ...]
    z_g: tuple[np.ndarray, ...]
    logits: np.ndarray


@dataclass(frozen=True, eq=False)
class HiddenGradTrace:
    """Gradient of the scalar loss w.r.t. each FFN hidden activation."""

    g: tuple[np.ndarray, ...]


def _param_rng(seed: int, path: str) -> np.random.Generator:
    # Counter-based stream keyed by (seed, parameter path) so that every
    # parameter is reproducible independently of draw order.
    digest = hashlib.sha256(f"{seed}/{path}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw(seed: int, path: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    rng = _param_rng(seed, path)
    return rng.standard_normal(shape) * (1.0 / math.sqrt(fan_in))


def init_model(spec: ModelSpec, planted: PlantedSpec | None = None) -> ModelParams:
    """Build deterministic weights for ``spec``.

    Every matrix is drawn as normal(0, 1/sqrt(fan_in)) from a stream keyed
    by (spec.seed, parameter path); biases start at zero and norm scales
    at one.  When ``planted`` is given, the designated units' up/gate
    columns are multiplied by ``planted.scale``.
    """
    spec.validate()
    if planted is not None:
        planted.validate(spec)
    d, m, seed = spec.d_model, spec.ffn_width, spec.seed
    embed = _draw(seed, "embed", (spec.vocab_size, d), d)
    layers = []
    for i in range(spec.n_layers):
        prefix = f"layers.{i}."
        w_up = _draw(seed, prefix + "w_up", (d, m), d)
        w_gate = _draw(seed, prefix + "w_gate", (d, m), d)
        if planted is not None and i in planted.units:
            idx = list(planted.units[i])
            w_up[:, idx] *= planted.scale
            w_gate[:, idx] *= planted.scale
        layers.append(LayerParams(
            index=i,
            wq=_draw(seed, prefix + "wq", (d, d), d),
            wk=_draw(seed, prefix + "wk", (d, d), d),
            wv=_draw(seed, prefix + "wv", (d, d), d),
            wo=_draw(seed, prefix + "wo", (d, d), d),
            w_up=w_up,
            w_gate=w_gate,
            w_down=_draw(seed, prefix + "w_down", (m, d), m),
            b_up=np.zeros(m),
            b_gate=np.zeros(m),
            b_down=np.zeros(d),
            attn_norm=np.ones(d),
            ffn_norm=np.ones(d),
            phi_u=spec.phi_u,
            phi_g=spec.phi_g,
        ))
    params = ModelParams(spec=spec, embed=embed, layers=tuple(layers), final_norm=np.ones(d))
    params.validate()
    return params


def ffn_forward(x: np.ndarray, layer: LayerParams):
    """Gated FFN: z_u = xW_up + b_up, z_g = xW_gate + b_gate,
    h = phi_u(z_u) * phi_g(z_g), y = hW_down + b_down.

    ``x`` may be a single vector (d,) or a stack (T, d).
    Returns (y, h, z_u, z_g).
    """
    z_u = x @ layer.w_up + layer.b_up
    z_g = x @ layer.w_gate + layer.b_gate
    h = activation(layer.phi_u)(z_u) * activation(layer.phi_g)(z_g)
    y = h @ layer.w_down + layer.b_down
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(y))):
        raise NumericError(f"non-finite FFN intermediate in layer {layer.index}")
    return y, h, z_u, z_g


def unit_contribution(x: np.ndarray, layer: LayerParams, j: int) -> np.ndarray:
    """Output term contributed by hidden unit ``j`` alone.

    Computed from the unit's associate weight triplet (up column, gate
    column, down row); the down-projection bias is included once, so
    summing (contribution - b_down) over units and adding b_down back
    recovers the full FFN output.
    """
    m = layer.w_up.shape[1]
    if not (0 <= j < m):
        raise ValidationError(f"unit index {j} outside [0, {m})")
    a_u = activation(layer.phi_u)(x @ layer.w_up[:, j] + layer.b_up[j])
    a_g = activation(layer.phi_g)(x @ layer.w_gate[:, j] + layer.b_gate[j])
    return np.multiply.outer(a_u * a_g, layer.w_down[j, :]) + layer.b_down


def _rmsnorm(x: np.ndarray, w: np.ndarray, eps: float):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / r * w, r


def _rmsnorm_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, r: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    gw = g * w
    return gw / r - x * (np.sum(gw * x, axis=-1, keepdims=True) / (d * r**3))


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


class _ForwardCache:
    """Intermediates of one forward pass, kept for reverse mode."""

    __slots__ = ("x_in", "xn1", "r1", "q", "k", "v", "probs", "x_mid",
                 "xn2", "r2", "z_u", "z_g", "h", "x_out", "xn_f", "r_f", "logits")

    def __init__(self):
        self.x_in = []
        self.xn1 = []
        self.r1 = []
        self.q = []
        self.k = []
        self.v = []
        self.probs = []
        self.x_mid = []
        self.xn2 = []
        self.r2 = []
        self.z_u = []
        self.z_g = []
        self.h = []


def _validate_tokens(tokens: Sequence[int], spec: ModelSpec) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("token sequence must be a non-empty 1-d id list")
    if ids.size > spec.max_seq:
        raise ValidationError(f"sequence length {ids.size} exceeds max_seq {spec.max_seq}")
    if np.any(ids < 0) or np.any(ids >= spec.vocab_size):
        bad = ids[(ids < 0) | (ids >= spec.vocab_size)][0]
        raise ValidationError(f"token id {bad} outside [0, {spec.vocab_size})")
    return ids


def _forward(params: ModelParams, ids: np.ndarray,
             h_offsets: Mapping[int, np.ndarray] | None = None,
             unit_mask: Sequence[np.ndarray] | None = None) -> _ForwardCache:
    spec = params.spec
    t_real = ids.size
    # A single-row matmul may take a different BLAS path than the same row
    # inside a taller matrix; pad to two rows so prefix logits are exactly
    # reproducible at every length.
    padded = t_real == 1
    if padded:
        ids = np.concatenate([ids, np.array([0], dtype=np.int64)])
    t = ids.size
    n_heads = spec.n_heads
    scale = 1.0 / math.sqrt(spec.d_model // n_heads)
    neg_inf_mask = np.triu(np.full((t, t), -np.inf), k=1)

    cache = _ForwardCache()
    x = params.embed[ids]
    for li, layer in enumerate(params.layers):
        cache.x_in.append(x)
        xn1, r1 = _rmsnorm(x, layer.attn_norm, spec.norm_eps)
        cache.xn1.append(xn1)
        cache.r1.append(r1)
        q = _split_heads(xn1 @ layer.wq, n_heads)
        k = _split_heads(xn1 @ layer.wk, n_heads)
        v = _split_heads(xn1 @ layer.wv, n_heads)
        cache.q.append(q)
        cache.k.append(k)
        cache.v.append(v)
        scores = q @ k.transpose(0, 2, 1) * scale + neg_inf_mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        cache.probs.append(probs)
        ctx = _merge_heads(probs @ v)
        x = x + ctx @ layer.wo
        cache.x_mid.append(x)
        xn2, r2 = _rmsnorm(x, layer.ffn_norm, spec.norm_eps)
        cache.xn2.append(xn2)
        cache.r2.append(r2)
        z_u = xn2 @ layer.w_up + layer.b_up
        z_g = xn2 @ layer.w_gate + layer.b_gate
        h = activation(layer.phi_u)(z_u) * activation(layer.phi_g)(z_g)
        if h_offsets is not None and li in h_offsets:
            off = np.asarray(h_offsets[li], dtype=np.float64)
            if off.shape != (t_real, spec.ffn_width):
                raise ValidationError(
                    f"h_offsets[{li}] has shape {off.shape}, expected {(t_real, spec.ffn_width)}"
                )
            if padded:
                off = np.concatenate([off, np.zeros((1, spec.ffn_width))])
            h = h + off
        if unit_mask is not None:
            keep = np.zeros(spec.ffn_width)
            keep[np.asarray(unit_mask[li], dtype=np.int64)] = 1.0
            h = h * keep
        cache.z_u.append(z_u)
        cache.z_g.append(z_g)
        cache.h.append(h)
        y = h @ layer.w_down + layer.b_down
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(y))):
            raise NumericError(f"non-finite FFN intermediate in layer {li}")
        x = x + y
    cache.x_out = x
    xn_f, r_f = _rmsnorm(x, params.final_norm, spec.norm_eps)
    cache.xn_f = xn_f
    cache.r_f = r_f
    logits = xn_f @ params.embed.T
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if padded:
        cache.logits = logits[:1]
        for name in ("x_in", "xn1", "q", "k", "v", "x_mid", "xn2", "z_u", "z_g", "h"):
            setattr(cache, name, [a[:, :1] if a.ndim == 3 else a[:1] for a in getattr(cache, name)])
    else:
        cache.logits = logits
    return cache


def model_forward(tokens: Sequence[int], params: ModelParams,
                  h_offsets: Mapping[int, np.ndarray] | None = None,
                  unit_mask: Sequence[np.ndarray] | None = None) -> ForwardTrace:
    """Run the causal decoder over ``tokens`` and record FFN activations.

    ``h_offsets`` optionally adds a (T, m) array to layer ``l``'s gated
    hidden activations before the down projection (used by perturbation
    oracles).  ``unit_mask`` optionally zeroes all hidden units not listed
    per layer (the reference sparsification path).
    """
    ids = _validate_tokens(tokens, params.spec)
    cache = _forward(params, ids, h_offsets=h_offsets, unit_mask=unit_mask)
    return ForwardTrace(
        h=tuple(cache.h),
        z_u=tuple(cache.z_u),
        z_g=tuple(cache.z_g),
        logits=cache.logits,
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    One target per logits row; a target of -1 excludes that row from the
    mean (no loss contribution).
    """
    logits = np.asarray(logits, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise ValidationError("need one target per logits row")
    if np.any(tgt >= logits.shape[1]) or np.any(tgt < -1):
        raise ValidationError("target id out of range")
    include = tgt >= 0
    if not np.any(include):
        raise ValidationError("all targets masked out")
    logp = _log_softmax(logits[include])
    return float(-np.mean(logp[np.arange(logp.shape[0]), tgt[include]]))


def backward_hidden_grads(params: ModelParams, tokens: Sequence[int],
                          targets: Sequence[int]) -> HiddenGradTrace:
    """Exact gradient of cross_entropy w.r.t. every FFN hidden activation.

    Reverse mode through the tied output head, final norm, and all
    residual/attention/FFN paths; ``g[l][t, j]`` is the derivative of the
    mean loss w.r.t. ``h_j`` of layer ``l`` at position ``t``.  Targets
    use the same -1 masking convention as :func:`cross_entropy`.
    """
    ids = _validate_tokens(tokens, params.spec)
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (ids.size,):
        raise ValidationError("need one target per position")
    if np.any(tgt >= params.spec.vocab_size) or np.any(tgt < -1):
        raise ValidationError("target id out of range")
    include = tgt >= 0
    if not np.any(include):
        raise ValidationError("all targets masked out")

    spec = params.spec
    cache = _forward(params, ids)
    t = ids.size
    n_heads = spec.n_heads
    scale = 1.0 / math.sqrt(spec.d_model // n_heads)

    # d(mean CE)/d(logits): (softmax - onehot) / n_included on scored rows.
    probs = np.exp(_log_softmax(cache.logits))
    dlogits = np.zeros_like(probs)
    n_inc = int(np.count_nonzero(include))
    rows = np.nonzero(include)[0]
    dlogits[rows] = probs[rows]
    dlogits[rows, tgt[rows]] -= 1.0
    dlogits /= n_inc

    dxn_f = dlogits @ params.embed
    dx = _rmsnorm_backward(dxn_f, cache.x_out[:t], params.final_norm, cache.r_f[:t])

    grads: list[np.ndarray] = [np.empty(0)] * spec.n_layers
    for li in range(spec.n_layers - 1, -1, -1):
        layer = params.layers[li]
        # FFN branch: residual hands dx straight to the block output.
        dh = dx @ layer.w_down.T
        grads[li] = dh
        z_u, z_g = cache.z_u[li], cache.z_g[li]
        a_u = activation(layer.phi_u)(z_u)
        a_g = activation(layer.phi_g)(z_g)
        dz_u = dh * a_g * activation_grad(layer.phi_u)(z_u)
        dz_g = dh * a_u * activation_grad(layer.phi_g)(z_g)
        dxn2 = dz_u @ layer.w_up.T + dz_g @ layer.w_gate.T
        dx = dx + _rmsnorm_backward(dxn2, cache.x_mid[li], layer.ffn_norm, cache.r2[li][:t])
        # Attention branch.
        dctx = _split_heads(dx @ layer.wo.T, n_heads)
        p = cache.probs[li][:, :t, :t]
        q, k, v = cache.q[li], cache.k[li], cache.v[li]
        dp = dctx @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ dctx
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 2, 1) @ q * scale
        dxn1 = (_merge_heads(dq) @ layer.wq.T
                + _merge_heads(dk) @ layer.wk.T
                + _merge_heads(dv) @ layer.wv.T)
        dx = dx + _rmsnorm_backward(dxn1, cache.x_in[li], layer.attn_norm, cache.r1[li][:t])
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite hidden gradient")
    return HiddenGradTrace(g=tuple(grads))


@dataclass(frozen=True)
class SamplingPolicy:
    """Settings for one sampling step.

    ``bigram_penalty`` (when not None) is added to the logit of every
    candidate that would recreate a bigram already present in the
    history; the default magnitude used by corpus generation, -1e9,
    excludes such candidates outright.
    """

    temperature: float = 1.0
    greedy: bool = False
    bigram_penalty: float | None = None

    def validate(self) -> None:
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValidationError(f"temperature must be > 0, got {self.temperature!r}")
        if self.bigram_penalty is not None and not math.isfinite(self.bigram_penalty):
            raise ValidationError("bigram_penalty must be finite")


@dataclass(frozen=True)
class SampleOutcome:
    token: int
    fell_back: bool


def sample_next(logits: np.ndarray, rng: np.random.Generator,
                policy: SamplingPolicy, history: Sequence[int]) -> SampleOutcome:
    """Draw the next token from softmax(logits / T) under ``policy``.

    With the bigram penalty active, candidates v for which
    (history[-1], v) already occurs as an adjacent pair in ``history``
    are penalized.  If every candidate is penalized, sampling falls back
    to the unpenalized distribution and the outcome is flagged.
    """
    policy.validate()
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValidationError("logits must be a vector")
    fell_back = False
    effective = logits
    if policy.bigram_penalty is not None and len(history) >= 1:
        last = history[-1]
        penalized = {b for a, b in zip(history[:-1], history[1:]) if a == last}
        if len(penalized) >= logits.size:
            fell_back = True
        elif penalized:
            effective = logits.copy()
            effective[list(penalized)] += policy.bigram_penalty
    if policy.greedy:
        return SampleOutcome(int(np.argmax(effective)), fell_back)
    z = effective / policy.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    cum = np.cumsum(p)
    cum[-1] = 1.0
    token = int(np.searchsorted(cum, rng.random(), side="right"))
    return SampleOutcome(min(token, logits.size - 1), fell_back)


def generate_tokens(params: ModelParams, prompt: Sequence[int], count: int,
                    policy_for_step: Callable[[int], SamplingPolicy],
                    rng: np.random.Generator | None = None) -> list[int]:
    """Extend ``prompt`` by ``count`` sampled tokens; returns the new tokens.

    The policy may change per step (index 0 = first generated token).
    Greedy policies need no rng.
    """
    seq = list(prompt)
    if len(seq) + count > params.spec.max_seq:
        raise ValidationError(
            f"prompt ({len(seq)}) plus generated ({count}) exceeds max_seq {params.spec.max_seq}"
        )
    out = []
    for step in range(count):
        trace = model_forward(seq, params)
        policy = policy_for_step(step)
        if rng is None and not policy.greedy:
            raise ValidationError("non-greedy sampling requires an rng")
        outcome = sample_next(trace.logits[-1], rng, policy, seq)
        seq.append(outcome.token)
        out.append(outcome.token)
    return out


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for document ``index`` of a seeded batch."""
    digest = hashlib.sha256(f"doc/{seed}/{index}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
