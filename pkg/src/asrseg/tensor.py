"""Dense float64 tensors with eager reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires
gradients the result records its parents and a closure mapping the output
gradient to one gradient per parent; :meth:`Tensor.backward` walks that graph
in reverse topological order.  Broadcasting is limited to scalar-tensor
pairs, anything else needs an explicit :func:`broadcast_to` or
:func:`reshape`.
"""

from __future__ import annotations

import contextlib
import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DIV_EPS = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Build an op result; ``backward(g)`` returns one gradient per parent."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Repeated calls accumulate; call :meth:`zero_grad` on the leaves to
        reset.  The recorded graph is released afterwards unless
        ``retain_graph`` is set.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        if retain_graph:
            return
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if (np.abs(b.data) < DIV_EPS).any():
        raise DomainError(f"div: divisor magnitude below {DIV_EPS}")
    out = a.data / b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b)), "div",
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log: argument must be positive")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_UNARY = {"relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_id: str, a, b=None) -> Tensor:
    if op_id in _BINARY:
        if b is None:
            raise ValueError(f"{op_id} needs two operands")
        return _BINARY[op_id](a, b)
    if op_id in _UNARY:
        if b is not None:
            raise ValueError(f"{op_id} takes one operand")
        return _UNARY[op_id](a)
    raise ValueError(f"unknown elementwise op {op_id!r}")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {axes}")
    return tuple(sorted(out))


def reduce(op_id: str, a, axes=None) -> Tensor:
    """``sum``/``mean`` over ``axes``; ``gap`` averages the two spatial axes of H×W×C."""
    a = as_tensor(a)
    if op_id == "gap":
        if a.data.ndim != 3:
            raise ShapeError(f"gap expects H×W×C, got {a.shape}")
        axes = (0, 1)
        op_id = "mean"
    if op_id not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_id!r}")
    axes = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes)
    scale = 1.0
    if op_id == "mean":
        scale = 1.0 / count
        out = out * scale
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * scale, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, op_id)


def sum_(a, axes=None) -> Tensor:
    return reduce("sum", a, axes)


def mean(a, axes=None) -> Tensor:
    return reduce("mean", a, axes)


def gap(a) -> Tensor:
    return reduce("gap", a)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over the expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.data.ndim != len(shape):
        raise ShapeError(f"broadcast_to: rank {a.data.ndim} -> {len(shape)}; reshape first")
    axes = []
    for i, (src, dst) in enumerate(zip(a.shape, shape)):
        if src != dst:
            if src != 1:
                raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
            axes.append(i)
    axes = tuple(axes)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._make(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "broadcast")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = out.copy()

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return Tensor._make(out, (a,), backward, "getitem")


def _fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, ts, backward, "concat")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes).copy(), (a,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of a 1-d or 2-d ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim not in (1, 2) or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            ga = g[..., None] * b.data
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.data.ndim - 1)),) * 2)
        else:
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient x/|x| with 0 at the origin."""
    a = as_tensor(a)
    axis = _norm_axes(axis, a.data.ndim)[0]
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, a.data / safe, 0.0),)

    return Tensor._make(out, (a,), backward, "norm")


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (v,), backward, "softmax")


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.size == 0:
        raise ShapeError("log_softmax of an empty tensor")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (v,), backward, "log_softmax")


def conv2d(x, kernel, bias, dilation: int = 1) -> Tensor:
    """Stride-1 'same' convolution of an H×W×Cin map with a k×k×Cin×Cout kernel."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if cin != x.shape[2] or bias.shape != (cout,):
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    h, w, _ = x.shape
    pad = (k - 1) * dilation // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h, w, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[i * dilation:i * dilation + h, j * dilation:j * dilation + w, :]
    cols2 = cols.reshape(h * w, k * k * cin)
    k2d = kernel.data.reshape(k * k * cin, cout)
    out = (cols2 @ k2d + bias.data).reshape(h, w, cout)

    def backward(g):
        g2 = g.reshape(h * w, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2d.T).reshape(h, w, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[i * dilation:i * dilation + h, j * dilation:j * dilation + w, :] += gcols[:, :, i, j, :]
            gx = gxp[pad:pad + h, pad:pad + w, :]
        return gx, gk, gb

    return Tensor._make(out, (x, kernel, bias), backward, "conv2d")


def avg_pool2(x) -> Tensor:
    """2×2 mean pooling with stride 2 over an H×W×C map."""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {x.shape}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25,)

    return Tensor._make(out, (x,), backward, "avg_pool2")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: output i samples input position i*(n_in-1)/(n_out-1)
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of an H×W×C map by an integer factor."""
    x = as_tensor(x)
    h, w, _ = x.shape
    uh = _interp_matrix(h, h * factor)
    uw = _interp_matrix(w, w * factor)
    out = np.einsum("ai,ijc,bj->abc", uh, x.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ai,abc,bj->ijc", uh, g, uw, optimize=True),)

    return Tensor._make(out, (x,), backward, "upsample")


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated after perturbing ``params`` in place, so it must
    read them rather than capture copies.  The step for coordinate θ is
    1e-5·max(1, |θ|) and the error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    """
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f returned a non-finite value")
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_samples, total), replace=n_samples > total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for idx in flat:
            which = int(np.searchsorted(offsets, idx, side="right") - 1)
            local = int(idx - offsets[which])
            arr = params[which].data.reshape(-1)
            theta = arr[local]
            h = 1e-5 * max(1.0, abs(theta))
            arr[local] = theta + h
            f_plus = f().item()
            arr[local] = theta - h
            f_minus = f().item()
            arr[local] = theta
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("grad_check: f returned a non-finite value")
            g_fd = (f_plus - f_minus) / (2 * h)
            g_a = float(analytic[which].reshape(-1)[local])
            err = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def save_checkpoint(path, named: Iterable[tuple[str, Tensor]], meta: dict | None = None) -> None:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in named:
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    blob = path.with_name(path.name + ".bin")
    manifest = {"format": "asrseg-f64le", "blob": blob.name, "params": entries, "meta": meta or {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    raw = (path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        out[e["name"]] = Tensor(arr.reshape(e["shape"]))
    return out, manifest.get("meta", {})
