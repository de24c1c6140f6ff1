"""Dense float32 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous float32 numpy array plus an optional
gradient buffer and a ``trainable`` flag. Operations go through
:func:`forward_primitive`, which records each application on the innermost
active :class:`Tape` whenever the result can influence a trainable leaf.
:func:`backward` replays the tape once in reverse, accumulating exact
vector-Jacobian products into the gradient buffers of trainable leaves.

There is no implicit broadcasting: elementwise primitives require equal
shapes, and the only shape adaptation happens inside primitives whose
contracts define it (``linear`` bias, ``bias_add`` trailing broadcast,
convolution kernels). This keeps every VJP exact and shape bugs loud.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TapeError
from .rng import Rng

DTYPE = np.float32

# tanh-approximation GELU constant sqrt(2/pi); exact-erf form is avoided for
# bit-stable cross-platform results
GELU_C = np.float32(0.7978845608028654)
GELU_A = np.float32(0.044715)


class Tensor:
    """Row-major float32 value, optionally trainable."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0 or min(arr.shape) < 1:
            raise ShapeError(f"invalid tensor shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy(), trainable=False, name=self.name)

    def __repr__(self) -> str:
        tag = ", trainable" if self.trainable else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}{tag})"

    # Thin sugar; everything routes through forward_primitive.
    def __add__(self, other: "Tensor") -> "Tensor":
        return forward_primitive("add", [self, other])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return forward_primitive("sub", [self, other])

    def __mul__(self, other: "Tensor") -> "Tensor":
        return forward_primitive("hadamard", [self, other])

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return forward_primitive("matmul", [self, other])


def tensor_new(shape, fill: str = "zeros", *, value: float = 0.0,
               rng: Rng | None = None, lo: float = 0.0, hi: float = 1.0,
               mean: float = 0.0, std: float = 1.0,
               trainable: bool = False, name: str = "") -> Tensor:
    """Allocate and initialize a tensor.

    ``fill`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (uses ``rng``, ``lo``, ``hi``) or ``normal`` (uses ``rng``, ``mean``,
    ``std``). Random fills require an :class:`Rng`.
    """
    dims = tuple(int(s) for s in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid tensor shape {list(dims)}")
    if fill == "zeros":
        data = np.zeros(dims, dtype=DTYPE)
    elif fill == "constant":
        data = np.full(dims, value, dtype=DTYPE)
    elif fill == "uniform":
        if rng is None:
            raise ContractError("uniform fill requires an Rng")
        data = rng.uniform(dims, lo, hi)
    elif fill == "normal":
        if rng is None:
            raise ContractError("normal fill requires an Rng")
        data = rng.normal(dims, mean, std)
    else:
        raise ContractError(f"unknown fill kind {fill!r}")
    return Tensor(data, trainable=trainable, name=name)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class _Entry:
    __slots__ = ("kind", "inputs", "out_id", "ctx", "needs")

    def __init__(self, kind, inputs, out_id, ctx, needs):
        self.kind = kind
        self.inputs = inputs
        self.out_id = out_id
        self.ctx = ctx
        self.needs = needs


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Single-threaded by contract: one tape per training step, never shared.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def _tracks(self, t: Tensor) -> bool:
        return t.trainable or id(t) in self._produced

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


# --------------------------------------------------------------------------
# Primitive registry
# --------------------------------------------------------------------------

# kind -> (forward, vjp). forward(arrays, attrs) -> (out_array, ctx);
# vjp(g, ctx, needs) -> tuple of per-input gradient arrays (None = skip).
_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def register_primitive(kind: str, forward: Callable, vjp: Callable) -> None:
    if kind in _FORWARD:
        raise ContractError(f"primitive {kind!r} registered twice")
    _FORWARD[kind] = forward
    _VJP[kind] = vjp


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a primitive; record the application if a tape is active."""
    if kind not in _FORWARD:
        raise ContractError(f"unknown primitive {kind!r}")
    attrs = attrs or {}
    arrays = [t.data for t in inputs]
    out_data, ctx = _FORWARD[kind](arrays, attrs)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        needs = tuple(tape._tracks(t) for t in inputs)
        if any(needs):
            tape.entries.append(_Entry(kind, tuple(inputs), id(out), ctx, needs))
            tape._produced.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every trainable leaf reachable from ``loss``.

    Gradients of leaves used several times (or across calls) accumulate.
    Non-trainable leaves never receive a gradient buffer.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise TapeError("loss is not on the tape (detached or from another tape)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.out_id, None)
        if g is None:
            continue
        input_grads = _VJP[entry.kind](g, entry.ctx, entry.needs)
        for t, gi in zip(entry.inputs, input_grads):
            if gi is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
            if tid not in tape._produced:
                leaves[tid] = t
    for tid, t in leaves.items():
        if not t.trainable:
            continue
        g = grads[tid].astype(DTYPE, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(build: Callable[[list[Tensor]], Tensor], point: list[Tensor],
               eps: float = 1e-3, max_coords: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must produce a scalar loss from ``point`` deterministically.
    Error per coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|). When ``max_coords`` is given, a deterministic evenly-spaced
    subset of coordinates per tensor is checked (still covering every
    tensor); otherwise the check is exhaustive.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for t in point:
        t.zero_grad()
    with Tape() as tape:
        loss = build(point)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    backward(loss, tape)
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for t in point if t.trainable}

    def eval_loss() -> float:
        return float(build(point).data.reshape(-1)[0])

    worst = 0.0
    for t in point:
        if not t.trainable:
            continue
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = range(n)
        else:
            coords = np.linspace(0, n - 1, max_coords).astype(np.int64)
        a_flat = analytic[id(t)].reshape(-1)
        for i in coords:
            orig = flat[i]
            hi = np.float32(orig + np.float32(eps))
            lo = np.float32(orig - np.float32(eps))
            flat[i] = hi
            lp = eval_loss()
            flat[i] = lo
            lm = eval_loss()
            flat[i] = orig
            numeric = (lp - lm) / (float(hi) - float(lo))
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst


# --------------------------------------------------------------------------
# Primitive implementations
# --------------------------------------------------------------------------

def _require_equal(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _fw_add(arrays, attrs):
    a, b = arrays
    _require_equal("add", a, b)
    return a + b, None


def _fw_sub(arrays, attrs):
    a, b = arrays
    _require_equal("sub", a, b)
    return a - b, None


def _fw_hadamard(arrays, attrs):
    a, b = arrays
    _require_equal("hadamard", a, b)
    return a * b, (a, b)


def _fw_maximum(arrays, attrs):
    a, b = arrays
    _require_equal("maximum", a, b)
    mask = a >= b  # ties route the gradient to the first input
    return np.where(mask, a, b), mask


def _fw_scale(arrays, attrs):
    (a,) = arrays
    f = np.float32(attrs["factor"])
    return a * f, f


def _fw_matmul(arrays, attrs):
    a, b = arrays
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    return np.matmul(a, b), (a, b)


def _vjp_matmul(g, ctx, needs):
    a, b = ctx
    ga = gb = None
    if needs[0]:
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            m = g.shape[-1]
            gb = a.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


def _fw_reshape(arrays, attrs):
    (a,) = arrays
    shape = tuple(int(s) for s in attrs["shape"])
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {list(shape)}")
    return np.ascontiguousarray(a.reshape(shape)), a.shape


def _fw_permute(arrays, attrs):
    (a,) = arrays
    axes = tuple(int(x) for x in attrs["axes"])
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {list(axes)} invalid for rank {a.ndim}")
    return np.ascontiguousarray(np.transpose(a, axes)), axes


def _fw_concat(arrays, attrs):
    axis = int(attrs["axis"])
    ndim = arrays[0].ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    ref = list(arrays[0].shape)
    for a in arrays[1:]:
        other = list(a.shape)
        if len(other) != ndim or [d for i, d in enumerate(other) if i != axis] != \
                [d for i, d in enumerate(ref) if i != axis]:
            raise ShapeError(f"concat: shapes {ref} and {other} differ off axis {axis}")
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (axis, sizes)


def _vjp_concat(g, ctx, needs):
    axis, sizes = ctx
    offsets = np.cumsum(sizes)[:-1]
    pieces = np.split(g, offsets, axis=axis)
    return tuple(p if need else None for p, need in zip(pieces, needs))


def _slice_key(attrs, shape):
    starts = attrs["starts"]
    stops = attrs["stops"]
    steps = attrs.get("steps") or [1] * len(starts)
    if not (len(starts) == len(stops) == len(steps) == len(shape)):
        raise ShapeError(f"slice: spec rank mismatch against shape {list(shape)}")
    return tuple(slice(int(a), int(b), int(s)) for a, b, s in zip(starts, stops, steps))


def _fw_slice(arrays, attrs):
    (a,) = arrays
    key = _slice_key(attrs, a.shape)
    out = np.ascontiguousarray(a[key])
    if out.size == 0:
        raise ShapeError(f"slice: empty result from {a.shape} with {attrs}")
    return out, (a.shape, key)


def _vjp_slice(g, ctx, needs):
    shape, key = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    gx[key] = g
    return (gx,)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    axes = tuple(sorted(int(a) % ndim for a in np.atleast_1d(axes)))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {list(axes)}")
    return axes


def _reduce_out_shape(shape, axes):
    kept = tuple(d for i, d in enumerate(shape) if i not in axes)
    return kept if kept else (1,)


def _fw_sum(arrays, attrs):
    (a,) = arrays
    axes = _norm_axes(attrs.get("axes"), a.ndim)
    out = a.sum(axis=axes, keepdims=True)
    keep_shape = out.shape
    return out.reshape(_reduce_out_shape(a.shape, axes)), (a.shape, keep_shape, None)


def _fw_mean(arrays, attrs):
    (a,) = arrays
    axes = _norm_axes(attrs.get("axes"), a.ndim)
    out = a.mean(axis=axes, keepdims=True, dtype=DTYPE)
    keep_shape = out.shape
    count = int(np.prod([a.shape[i] for i in axes]))
    return out.reshape(_reduce_out_shape(a.shape, axes)), (a.shape, keep_shape, count)


def _vjp_reduce(g, ctx, needs):
    shape, keep_shape, count = ctx
    g = g.reshape(keep_shape)
    if count:
        g = g / np.float32(count)
    return (np.broadcast_to(g, shape).copy(),)


def _fw_relu(arrays, attrs):
    (a,) = arrays
    mask = a > 0
    return np.where(mask, a, np.float32(0)), mask


def _gelu_forward(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    return np.float32(0.5) * x * (np.float32(1) + t), t


def _fw_gelu(arrays, attrs):
    (a,) = arrays
    out, t = _gelu_forward(a)
    return out, (a, t)


def _vjp_gelu(g, ctx, needs):
    x, t = ctx
    du = GELU_C * (np.float32(1) + np.float32(3) * GELU_A * x * x)
    d = np.float32(0.5) * (np.float32(1) + t) + np.float32(0.5) * x * (np.float32(1) - t * t) * du
    return (g * d,)


def _fw_softmax(arrays, attrs):
    (a,) = arrays
    axis = int(attrs["axis"]) % a.ndim
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p.astype(DTYPE), (p.astype(DTYPE), axis)


def _vjp_softmax(g, ctx, needs):
    p, axis = ctx
    inner = (g * p).sum(axis=axis, keepdims=True)
    return (p * (g - inner),)


def _fw_layer_norm(arrays, attrs):
    x, gamma, beta = arrays
    eps = np.float32(attrs.get("eps", 1e-5))
    axis = int(attrs.get("axis", -1)) % x.ndim
    if axis != x.ndim - 1:
        raise ShapeError("layer_norm: only the last axis is supported")
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match axis size {dim}")
    mu = x.mean(axis=-1, keepdims=True, dtype=DTYPE)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=DTYPE)
    inv = np.float32(1) / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _vjp_layer_norm(g, ctx, needs):
    xhat, inv, gamma = ctx
    gx = ggamma = gbeta = None
    lead = tuple(range(g.ndim - 1))
    if needs[1]:
        ggamma = (g * xhat).sum(axis=lead)
    if needs[2]:
        gbeta = g.sum(axis=lead)
    if needs[0]:
        gh = g * gamma
        m1 = gh.mean(axis=-1, keepdims=True, dtype=DTYPE)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
        gx = (gh - m1 - xhat * m2) * inv
    return gx, ggamma, gbeta


def _fw_pad(arrays, attrs):
    (a,) = arrays
    pads = tuple((int(lo), int(hi)) for lo, hi in attrs["pads"])
    if len(pads) != a.ndim:
        raise ShapeError(f"pad: spec rank mismatch against shape {a.shape}")
    return np.pad(a, pads), pads


def _vjp_pad(g, ctx, needs):
    pads = ctx
    key = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pads))
    return (np.ascontiguousarray(g[key]),)


def _fw_embed_lookup(arrays, attrs):
    (table,) = arrays
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2D, got {table.shape}")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError("embed_lookup: index out of table range")
    return np.ascontiguousarray(table[ids]), (table.shape, ids)


def _vjp_embed_lookup(g, ctx, needs):
    shape, ids = ctx
    gt = np.zeros(shape, dtype=g.dtype)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
    return (gt,)


def _fw_bias_add(arrays, attrs):
    x, b = arrays
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias_add: {b.shape} is not a trailing shape of {x.shape}")
    return x + b, (x.ndim - b.ndim,)


def _vjp_bias_add(g, ctx, needs):
    (lead,) = ctx
    gx = g if needs[0] else None
    gb = g.sum(axis=tuple(range(lead))) if needs[1] else None
    return gx, gb


def _fw_linear(arrays, attrs):
    x, w, b = arrays
    if x.shape[-1] != w.shape[0] or w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: shapes x={x.shape} W={w.shape} b={b.shape} do not conform")
    return np.matmul(x, w) + b, (x, w)


def _vjp_linear(g, ctx, needs):
    x, w = ctx
    gx = gw = gb = None
    if needs[0]:
        gx = np.matmul(g, w.T)
    g2 = g.reshape(-1, g.shape[-1])
    if needs[1]:
        gw = x.reshape(-1, x.shape[-1]).T @ g2
    if needs[2]:
        gb = g2.sum(axis=0)
    return gx, gw, gb


def _fw_upsample2d(arrays, attrs):
    (a,) = arrays
    f = int(attrs["factor"])
    if a.ndim != 4 or f < 1:
        raise ShapeError(f"upsample2d_nearest: need [N,C,h,w] and factor>=1, got {a.shape}")
    return np.ascontiguousarray(a.repeat(f, axis=2).repeat(f, axis=3)), (a.shape, f)


def _vjp_upsample2d(g, ctx, needs):
    (n, c, h, w), f = ctx
    return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


for _kind, _fw, _bw in [
    ("add", _fw_add, lambda g, ctx, needs: (g if needs[0] else None, g if needs[1] else None)),
    ("sub", _fw_sub, lambda g, ctx, needs: (g if needs[0] else None, -g if needs[1] else None)),
    ("hadamard", _fw_hadamard,
     lambda g, ctx, needs: (g * ctx[1] if needs[0] else None, g * ctx[0] if needs[1] else None)),
    ("maximum", _fw_maximum,
     lambda g, ctx, needs: (np.where(ctx, g, np.float32(0)) if needs[0] else None,
                            np.where(ctx, np.float32(0), g) if needs[1] else None)),
    ("scale", _fw_scale, lambda g, ctx, needs: (g * ctx,)),
    ("matmul", _fw_matmul, _vjp_matmul),
    ("reshape", _fw_reshape, lambda g, ctx, needs: (g.reshape(ctx),)),
    ("permute", _fw_permute, lambda g, ctx, needs: (np.transpose(g, np.argsort(ctx)),)),
    ("concat", _fw_concat, _vjp_concat),
    ("slice", _fw_slice, _vjp_slice),
    ("sum", _fw_sum, _vjp_reduce),
    ("mean", _fw_mean, _vjp_reduce),
    ("relu", _fw_relu, lambda g, ctx, needs: (np.where(ctx, g, np.float32(0)),)),
    ("gelu", _fw_gelu, _vjp_gelu),
    ("softmax", _fw_softmax, _vjp_softmax),
    ("layer_norm", _fw_layer_norm, _vjp_layer_norm),
    ("pad", _fw_pad, _vjp_pad),
    ("embed_lookup", _fw_embed_lookup, _vjp_embed_lookup),
    ("bias_add", _fw_bias_add, _vjp_bias_add),
    ("linear", _fw_linear, _vjp_linear),
    ("upsample2d_nearest", _fw_upsample2d, _vjp_upsample2d),
]:
    register_primitive(_kind, _fw, _bw)


# --------------------------------------------------------------------------
# Functional helpers
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("sub", [a, b])


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("hadamard", [a, b])


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("maximum", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return forward_primitive("scale", [a], {"factor": factor})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("matmul", [a, b])


def reshape(a: Tensor, shape) -> Tensor:
    return forward_primitive("reshape", [a], {"shape": tuple(shape)})


def permute(a: Tensor, axes) -> Tensor:
    return forward_primitive("permute", [a], {"axes": tuple(axes)})


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return forward_primitive("concat", list(tensors), {"axis": axis})


def slice_tensor(a: Tensor, starts, stops, steps=None) -> Tensor:
    return forward_primitive("slice", [a], {"starts": tuple(starts), "stops": tuple(stops),
                                            "steps": tuple(steps) if steps else None})


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    return forward_primitive("sum", [a], {"axes": axes})


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    return forward_primitive("mean", [a], {"axes": axes})


def relu(a: Tensor) -> Tensor:
    return forward_primitive("relu", [a])


def gelu(a: Tensor) -> Tensor:
    return forward_primitive("gelu", [a])


def softmax(a: Tensor, axis: int) -> Tensor:
    return forward_primitive("softmax", [a], {"axis": axis})


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return forward_primitive("layer_norm", [x, gamma, beta], {"axis": -1, "eps": eps})


def pad(a: Tensor, pads) -> Tensor:
    return forward_primitive("pad", [a], {"pads": tuple(tuple(p) for p in pads)})


def embed_lookup(table: Tensor, ids) -> Tensor:
    return forward_primitive("embed_lookup", [table], {"ids": np.asarray(ids)})


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("bias_add", [x, b])


def activation(x: Tensor, kind: str) -> Tensor:
    """GELU by default; ReLU available for sensitivity checks."""
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ContractError(f"unknown activation {kind!r}")
