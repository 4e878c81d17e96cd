"""Small feedforward network with per-sample normalization and manual backprop.

Every hidden block is ``linear -> instance norm (optional) -> ReLU``. The
feature extractor is followed by either a single-logit sigmoid head
(``"binary"``, used for isolation) or a C-way softmax head (``"multiclass"``,
the primary classifier). Computation runs in the dtype of the parameter
vector: float32 normally, float64 when a higher-precision reference is needed.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS_NORM = 1e-5
EPS_CLAMP = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

HEADS = ("binary", "multiclass")

PRESETS = {
    "slim": (32, 16),
    "base": (64, 32),
    "deep": (64, 64, 32),
}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = PRESETS["base"]
    use_instance_norm: bool = True
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_widths:
            raise ValueError("hidden_widths must be non-empty")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive: {self.hidden_widths}")
        if self.use_instance_norm and any(w < 2 for w in self.hidden_widths):
            raise ValueError("instance norm needs hidden widths >= 2")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def latent_dim(self) -> int:
        return self.hidden_widths[-1]

    def head_width(self, head: str) -> int:
        if head == "binary":
            return 1
        if head == "multiclass":
            return self.num_classes
        raise ValueError(f"unknown head {head!r}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "use_instance_norm": self.use_instance_norm,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            use_instance_norm=bool(d["use_instance_norm"]),
            num_classes=int(d["num_classes"]),
            seed=int(d.get("seed", 0)),
        )


def preset(name: str, input_dim: int, **kwargs) -> NetworkSpec:
    """NetworkSpec for one of the width/depth presets ("slim", "base", "deep")."""
    return NetworkSpec(input_dim=input_dim, hidden_widths=PRESETS[name], **kwargs)


def layout(spec: NetworkSpec, head: str) -> tuple[tuple[str, tuple[int, ...]], ...]:
    segments = []
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_widths):
        segments.append((f"f.{i}.weight", (fan_in, width)))
        segments.append((f"f.{i}.bias", (width,)))
        if spec.use_instance_norm:
            segments.append((f"f.{i}.norm_gain", (width,)))
            segments.append((f"f.{i}.norm_bias", (width,)))
        fan_in = width
    out = spec.head_width(head)
    segments.append(("h.weight", (fan_in, out)))
    segments.append(("h.bias", (out,)))
    return tuple(segments)


def _size(shape) -> int:
    return math.prod(shape)


@functools.lru_cache(maxsize=64)
def _offsets(layout) -> tuple[tuple[str, int, int, tuple[int, ...]], ...]:
    out, start = [], 0
    for name, shape in layout:
        stop = start + _size(shape)
        out.append((name, start, stop, shape))
        start = stop
    return tuple(out)


class ParameterVector:
    """Flat parameter array plus the (name, shape) layout that slices it."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.asarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        layout = tuple((str(n), tuple(s)) for n, s in layout)
        offsets = _offsets(layout)
        expected = offsets[-1][2] if offsets else 0
        if values.ndim != 1 or values.size != expected:
            raise ValueError(f"values of length {values.size} do not match layout size {expected}")
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParameterVector(n={self.values.size}, dtype={self.values.dtype}, segments={len(self.layout)})"

    def _check(self, other: "ParameterVector"):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        if other.layout != self.layout:
            raise ValueError("parameter layouts differ")
        return None

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return ParameterVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return ParameterVector(self.values - other.values, self.layout)

    def __mul__(self, scalar):
        if isinstance(scalar, ParameterVector):
            return NotImplemented
        return ParameterVector(self.values * self.values.dtype.type(scalar), self.layout)

    __rmul__ = __mul__

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ParameterVector":
        return ParameterVector(self.values.astype(dtype), self.layout)

    def offsets(self) -> dict[str, tuple[int, int]]:
        return {name: (a, b) for name, a, b, _ in _offsets(self.layout)}

    def segments(self) -> dict[str, np.ndarray]:
        """Views into ``values``, reshaped per layout."""
        v = self.values
        return {name: v[a:b].reshape(shape) for name, a, b, shape in _offsets(self.layout)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.segments()[name]


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list = field(default_factory=list)        # linear outputs per hidden layer
    normed: list = field(default_factory=list)     # (zhat, inv_std) per layer, or None
    post: list = field(default_factory=list)       # ReLU outputs per hidden layer
    logits: np.ndarray | None = None


def init_params(spec: NetworkSpec, head: str = "multiclass", seed: int | None = None) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; norm gain 1, shift 0."""
    lay = layout(spec, head)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    chunks = []
    fan_in = spec.input_dim
    for name, shape in lay:
        if name.endswith(".weight"):
            fan_in = shape[0]
        if name.endswith("norm_gain"):
            chunks.append(np.ones(shape, dtype=np.float32))
        elif name.endswith("norm_bias"):
            chunks.append(np.zeros(shape, dtype=np.float32))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return ParameterVector(np.concatenate([c.ravel() for c in chunks]), lay)


def head_of(params: ParameterVector) -> str:
    shape = dict(params.layout)["h.bias"]
    return "binary" if shape == (1,) else "multiclass"


def instance_normalize(activation, gain, bias, eps: float = EPS_NORM) -> np.ndarray:
    a = np.asarray(activation)
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    return gain * (a - mean) / np.sqrt(var + eps) + bias


def _as_batch(spec: NetworkSpec, x, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    return x, single


def features(spec: NetworkSpec, params: ParameterVector, x, trace: ForwardTrace | None = None) -> np.ndarray:
    seg = params.segments()
    eps = params.values.dtype.type(EPS_NORM)
    a = x
    for i in range(len(spec.hidden_widths)):
        z = a @ seg[f"f.{i}.weight"] + seg[f"f.{i}.bias"]
        if spec.use_instance_norm:
            inv_w = 1.0 / z.shape[1]
            centered = z - z.sum(axis=1, keepdims=True) * inv_w
            var = (centered * centered).sum(axis=1, keepdims=True) * inv_w
            inv_std = 1 / np.sqrt(var + eps)
            zhat = centered * inv_std
            u = seg[f"f.{i}.norm_gain"] * zhat + seg[f"f.{i}.norm_bias"]
            norm = (zhat, inv_std)
        else:
            u, norm = z, None
        a = np.maximum(u, 0)
        if trace is not None:
            trace.pre.append(z)
            trace.normed.append(norm)
            trace.post.append(a)
    return a


def logits(spec: NetworkSpec, params: ParameterVector, x, trace: ForwardTrace | None = None) -> np.ndarray:
    seg = params.segments()
    a = features(spec, params, x, trace)
    out = a @ seg["h.weight"] + seg["h.bias"]
    if trace is not None:
        trace.logits = out
    return out


def sigmoid(z):
    z = np.asarray(z)
    # tanh form does not overflow for large |z|
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def softmax(z):
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_binary(spec: NetworkSpec, params: ParameterVector, x):
    """Sigmoid score of the binary head; scalar for a single input, array for a batch."""
    xb, single = _as_batch(spec, x, params.values.dtype)
    trace = ForwardTrace(inputs=xb)
    p = sigmoid(logits(spec, params, xb, trace)[:, 0])
    return (p[0] if single else p), trace


def forward_multiclass(spec: NetworkSpec, params: ParameterVector, x):
    xb, single = _as_batch(spec, x, params.values.dtype)
    trace = ForwardTrace(inputs=xb)
    probs = softmax(logits(spec, params, xb, trace))
    return (probs[0] if single else probs), trace


def predict_binary(spec: NetworkSpec, params: ParameterVector, x) -> np.ndarray:
    """Batch sigmoid scores without keeping a trace."""
    xb, _ = _as_batch(spec, x, params.values.dtype)
    return sigmoid(logits(spec, params, xb)[:, 0])


def predict_proba(spec: NetworkSpec, params: ParameterVector, x) -> np.ndarray:
    xb, _ = _as_batch(spec, x, params.values.dtype)
    return softmax(logits(spec, params, xb))


def binary_ce_loss(p, m):
    p = np.clip(p, EPS_CLAMP, 1 - EPS_CLAMP)
    return -(m * np.log(p) + (1 - m) * np.log(1 - p))


def cross_entropy_loss(probs, y):
    probs = np.atleast_2d(probs)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    picked = np.clip(probs[np.arange(len(y)), y], EPS_CLAMP, 1.0)
    return -np.log(picked)


def mean_loss(spec: NetworkSpec, params: ParameterVector, x, labels, head: str | None = None) -> float:
    head = head or head_of(params)
    if head == "binary":
        p = predict_binary(spec, params, x)
        return float(np.mean(binary_ce_loss(p, np.asarray(labels, dtype=p.dtype))))
    probs = predict_proba(spec, params, x)
    return float(np.mean(cross_entropy_loss(probs, labels)))


def backward(spec: NetworkSpec, params: ParameterVector, trace: ForwardTrace, dlogits: np.ndarray) -> ParameterVector:
    """Backpropagate d(loss)/d(logits) through a recorded forward pass."""
    seg = params.segments()
    grad = ParameterVector(np.empty_like(params.values), params.layout)  # every segment is written below
    gseg = grad.segments()

    a_last = trace.post[-1]
    gseg["h.weight"][...] = a_last.T @ dlogits
    gseg["h.bias"][...] = dlogits.sum(axis=0)
    da = dlogits @ seg["h.weight"].T

    for i in reversed(range(len(spec.hidden_widths))):
        du = da * (trace.post[i] > 0)
        if spec.use_instance_norm:
            zhat, inv_std = trace.normed[i]
            gseg[f"f.{i}.norm_gain"][...] = (du * zhat).sum(axis=0)
            gseg[f"f.{i}.norm_bias"][...] = du.sum(axis=0)
            dzhat = du * seg[f"f.{i}.norm_gain"]
            inv_w = 1.0 / dzhat.shape[1]
            dz = inv_std * (
                dzhat
                - dzhat.sum(axis=1, keepdims=True) * inv_w
                - zhat * ((dzhat * zhat).sum(axis=1, keepdims=True) * inv_w)
            )
        else:
            dz = du
        a_in = trace.inputs if i == 0 else trace.post[i - 1]
        gseg[f"f.{i}.weight"][...] = a_in.T @ dz
        gseg[f"f.{i}.bias"][...] = dz.sum(axis=0)
        if i > 0:
            da = dz @ seg[f"f.{i}.weight"].T
    return grad


def loss_and_gradient(spec: NetworkSpec, params: ParameterVector, x, labels, head: str | None = None,
                      with_loss: bool = True):
    """Mean loss over the batch and its exact gradient (loss is None when ``with_loss`` is off)."""
    head = head or head_of(params)
    xb, _ = _as_batch(spec, x, params.values.dtype)
    n = xb.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{n} inputs but {labels.shape[0]} labels")
    trace = ForwardTrace(inputs=xb)
    z = logits(spec, params, xb, trace)
    if head == "binary":
        m = labels.astype(z.dtype)
        p = sigmoid(z[:, 0])
        loss = float(np.mean(binary_ce_loss(p, m))) if with_loss else None
        dlogits = ((p - m) / n)[:, None]
    elif head == "multiclass":
        y = labels.astype(np.int64)
        if y.min() < 0 or y.max() >= spec.num_classes:
            raise ValueError("class label out of range")
        probs = softmax(z)
        loss = float(np.mean(cross_entropy_loss(probs, y))) if with_loss else None
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1
        dlogits /= n
    else:
        raise ValueError(f"unknown head {head!r}")
    return loss, backward(spec, params, trace, dlogits)


def gradient(spec: NetworkSpec, params: ParameterVector, x, labels, head: str | None = None) -> ParameterVector:
    return loss_and_gradient(spec, params, x, labels, head, with_loss=False)[1]


@dataclass
class OptimizerState:
    """Optimizer hyperparameters plus per-parameter accumulators (allocated on first step)."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    velocity: np.ndarray | None = None
    second: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, empty accumulators."""
        return OptimizerState(self.kind, self.learning_rate, self.momentum, self.beta1, self.beta2, self.eps)


def optimizer_step(state: OptimizerState, params: ParameterVector, grad: ParameterVector) -> ParameterVector:
    if grad.layout != params.layout:
        raise ValueError("gradient layout does not match parameters")
    dtype = params.values.dtype
    g = grad.values.astype(dtype, copy=False)
    lr = dtype.type(state.learning_rate)
    if state.kind == "sgd":
        return ParameterVector(params.values - lr * g, params.layout)

    if state.velocity is None:
        state.velocity = np.zeros_like(params.values)
        if state.kind == "adam":
            state.second = np.zeros_like(params.values)
    elif state.velocity.shape != params.values.shape:
        raise ValueError("optimizer accumulators do not match parameter length")

    if state.kind == "sgd_momentum":
        state.velocity = dtype.type(state.momentum) * state.velocity + g
        return ParameterVector(params.values - lr * state.velocity, params.layout)

    state.t += 1
    b1, b2 = dtype.type(state.beta1), dtype.type(state.beta2)
    state.velocity = b1 * state.velocity + (1 - b1) * g
    state.second = b2 * state.second + (1 - b2) * g * g
    m_hat = state.velocity / dtype.type(1 - state.beta1 ** state.t)
    v_hat = state.second / dtype.type(1 - state.beta2 ** state.t)
    return ParameterVector(params.values - lr * m_hat / (np.sqrt(v_hat) + dtype.type(state.eps)), params.layout)


def copy_feature_extractor(dst: ParameterVector, src: ParameterVector) -> ParameterVector:
    """Return ``dst`` with every ``f.*`` segment replaced by the one in ``src``."""
    out = dst.copy()
    src_off = src.offsets()
    for name, (a, b) in out.offsets().items():
        if name.startswith("f."):
            if name not in src_off:
                raise ValueError(f"source parameters lack segment {name}")
            sa, sb = src_off[name]
            if sb - sa != b - a:
                raise ValueError(f"segment {name} has a different size")
            out.values[a:b] = src.values[sa:sb]
    return out


def batch_indices(n: int, size: int) -> Sequence[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]
