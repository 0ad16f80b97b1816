"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations called while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded whenever one of their inputs requires a gradient.  Outside a
tape everything runs as plain numpy, which is what inference uses.

The op set is deliberately narrow: exactly what the encoder, the scoring
heads, the relation module and the KB scorer need.
"""
from __future__ import annotations

import contextvars
import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, IntegrityError, NumericError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "factlink_tape", default=None
)

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to one execution context.  Use it as a context manager to
    make it the active tape; records are appended in execution order, which is
    a valid topological order for the reverse sweep.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: operands {a.name or 'lhs'}{list(a.shape)} and "
            f"{b.name or 'rhs'}{list(b.shape)} do not broadcast"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit(out, (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operand")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(
            f"matmul: {a.name or 'lhs'}{list(a.shape)} @ {b.name or 'rhs'}{list(b.shape)}: "
            f"inner dimensions {ka} and {kb} differ"
        )
    if a.ndim == 1:
        out = matmul(reshape(a, (1, ka)), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (kb, 1)))
        return reshape(out, out.shape[:-1])
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(out, (a, b), back)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[list(t.shape) for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, ts, back)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit(a.data[key], (a,), back)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; the embedding lookup is ``take(weight, ids)``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    if idx.size and (idx.min() < -shape[axis] or idx.max() >= shape[axis]):
        raise IndexError(f"take: index out of range for axis {axis} of size {shape[axis]}")

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(np.take(a.data, idx, axis=axis), (a,), back)


embedding = take


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean: empty reduction")

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


def scatter_add(values, index, size: int) -> Tensor:
    """``out[index[e]] += values[e]`` for a 1-d ``values``; sums in index order."""
    values = as_tensor(values)
    idx = np.asarray(index, dtype=np.intp)
    if values.ndim != 1 or idx.shape != values.shape:
        raise ShapeError(f"scatter_add: values{list(values.shape)} vs index{list(idx.shape)}")
    out = np.bincount(idx, weights=values.data, minlength=size).astype(DTYPE)
    return _emit(out, (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------- normalisers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def _segment_max(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, x)
    return mx


def segment_softmax(a, segments, n_segments: int) -> Tensor:
    """Softmax of a flat vector within each segment (one segment per mention)."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    x = a.data
    e = np.exp(x - _segment_max(x, seg, n_segments)[seg])
    z = np.bincount(seg, weights=e, minlength=n_segments)
    s = e / z[seg]

    def back(g):
        gs = g * s
        return (gs - s * np.bincount(seg, weights=gs, minlength=n_segments)[seg],)

    return _emit(s, (a,), back)


def segment_log_softmax(a, segments, n_segments: int) -> Tensor:
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    x = a.data
    z = x - _segment_max(x, seg, n_segments)[seg]
    lse = np.log(np.bincount(seg, weights=np.exp(z), minlength=n_segments))
    out = z - lse[seg]
    s = np.exp(out)

    def back(g):
        return (g - s * np.bincount(seg, weights=g, minlength=n_segments)[seg],)

    return _emit(out, (a,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: x{list(x.shape)} with gamma{list(gamma.shape)} beta{list(beta.shape)}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + beta.data, (x, gamma, beta), back)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer targets over the last axis."""
    logits = as_tensor(logits)
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    lp = log_softmax(logits if logits.ndim == 2 else reshape(logits, (1, -1)), axis=-1)
    picked = getitem(lp, (np.arange(len(tgt)), tgt))
    return neg(mean(picked))


def attention(q, k, v, bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; ``bias`` is an additive constant mask."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention: q{list(q.shape)} k{list(k.shape)} v{list(v.shape)} are inconsistent"
        )
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = add(scores, bias)
    return matmul(softmax(scores, axis=-1), v)


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "multiply": mul,
    "neg": neg,
    "matmul": matmul,
    "concat": concat,
    "mean": mean,
    "sum": tsum,
    "embedding": take,
    "take": take,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
    "exp": exp,
    "log": log,
    "layer_norm": layer_norm,
    "attention": attention,
    "dropout": dropout,
    "cross_entropy": cross_entropy,
    "reshape": reshape,
    "transpose": transpose,
    "scatter_add": scatter_add,
    "segment_softmax": segment_softmax,
    "segment_log_softmax": segment_log_softmax,
}


def apply(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- reverse pass


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward needs a tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad or loss.is_leaf:
        raise ContractError("loss was not produced on the tape")

    for _, inputs, _ in tape.records:
        for t in inputs:
            if t.is_leaf and t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for out, inputs, back in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, back(g)):
            if not t.requires_grad or gi is None:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=DTYPE, copy=True).reshape(t.shape)
            else:
                t.grad += gi


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __iter__(self):
        return iter(self.names())

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, arr in state.items():
            if n not in self._params:
                raise IntegrityError(f"unknown parameter {n!r} in state")
            if self._params[n].shape != np.shape(arr):
                raise ShapeError(f"{n}: shape {list(np.shape(arr))} != {list(self._params[n].shape)}")
            self._params[n].data = np.array(arr, dtype=DTYPE, copy=True)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "factlink-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> str:
    """Write ``store`` as a JSON manifest line followed by raw float64 payload.

    Returns the payload sha256.  No timestamps are written, so equal stores
    give byte-identical files.
    """
    entries, chunks, offset = [], [], 0
    for name, t in store.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": entries,
        "sha256": digest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    return digest


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise IntegrityError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except ValueError as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[nl + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise IntegrityError(f"{path}: checksum mismatch")
    store = ParameterStore()
    for e in header["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        store.add(e["name"], np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]))
    return store, header["meta"]


# ---------------------------------------------------------------- gradient check


def finite_diff_report(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    step: float = 1e-5,
    coords_per_param: int = 64,
    seed: int = 0,
    names: Iterable[str] | None = None,
    analytic: dict[str, np.ndarray] | None = None,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference grads.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    names = list(names) if names is not None else store.names()
    if analytic is None:
        store.zero_grad()
        with Tape() as tape:
            loss = f(store)
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("objective is not finite at the base point")
        backward(loss, tape)
        analytic = {n: store[n].grad.copy() for n in names}

    rng = np.random.default_rng(seed)
    report = {}
    for name in names:
        p = store[name]
        flat = p.data.reshape(-1)
        if flat.size <= coords_per_param:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=coords_per_param, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(f(store).data)
            flat[c] = orig - step
            down = float(f(store).data)
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"objective not finite while perturbing {name}[{c}]")
            num = (up - down) / (2 * step)
            a = float(ga[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(f, store: ParameterStore, step: float = 1e-5, **kwargs) -> float:
    report = finite_diff_report(f, store, step=step, **kwargs)
    return max(report.values(), default=0.0)
