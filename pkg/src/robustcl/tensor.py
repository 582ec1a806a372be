"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a handful of primitive operations, each
recording a node on the active GradientTape, and a single backward pass that
walks the tape in reverse. Shapes are explicit; the only broadcasting allowed
is adding a (d,) bias row-wise to an (n, d) matrix and per-channel conv bias.
"""

from __future__ import annotations

import numpy as np


class TensorError(Exception):
    """Shape mismatch, invalid op arguments, or tape misuse."""


class NonFiniteError(TensorError):
    """A primitive produced (or was given) NaN/Inf values."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in output of {op}")


class Tensor:
    """A dense float64 array, optionally tracked on the active gradient tape."""

    __slots__ = ("data", "grad_tracked", "node_id")

    def __init__(self, data, grad_tracked: bool = False):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.grad_tracked = bool(grad_tracked)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy(), grad_tracked=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.grad_tracked})"

    # Operator sugar; all routed through the primitives below.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x, dtype=np.float64)
    if a.shape == ():
        a = np.full(like.shape, float(a))
    return Tensor(a)


class GradientTape:
    """Append-only record of primitive ops, in topological (forward) order."""

    def __init__(self):
        self.nodes = []  # (out_ref, [in_refs], backward_fn)
        self.consumed = False
        self._next_id = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _assign_id(self, t: Tensor) -> None:
        if t.node_id is None:
            t.node_id = self._next_id
            self._next_id += 1

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        for t in inputs:
            self._assign_id(t)
        self._assign_id(out)
        self.nodes.append((out, list(inputs), backward_fn))


_TAPE_STACK: list[GradientTape] = []


def active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.grad_tracked for t in inputs):
        out.grad_tracked = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: GradientTape, output: Tensor):
    """Reverse pass over `tape`; returns {leaf Tensor: gradient ndarray}.

    The map contains an entry for every grad_tracked tensor reachable from
    `output`, keyed by object identity. A tape can be consumed only once.
    """
    if tape.consumed:
        raise TensorError("tape already consumed by a previous backward pass")
    if output.data.shape not in ((), (1,)):
        raise TensorError(f"backward requires a scalar output, got {output.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    tensors: dict[int, Tensor] = {id(output): output}
    produced = set()
    for out, _, _ in tape.nodes:
        produced.add(id(out))
    for out, inputs, backward_fn in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.grad_tracked:
                continue
            tensors[id(t)] = t
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = ig
    result = {}
    for key, g in grads.items():
        t = tensors.get(key)
        if t is None:
            continue
        if key not in produced and t.grad_tracked:
            result[t] = g
    if id(output) not in produced and output.grad_tracked:
        result[output] = grads[id(output)]
    return result


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        _check_finite(out.data, "add")
        return _maybe_record(out, [a, b], lambda g: (g, g))
    # row-wise bias: (n, d) + (d,)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data[None, :])
        _check_finite(out.data, "add")
        return _maybe_record(out, [a, b], lambda g: (g, g.sum(axis=0)))
    raise TensorError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")
    return _maybe_record(out, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")
    ad, bd = a.data, b.data
    return _maybe_record(out, [a, b], lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"div: incompatible shapes {a.shape} and {b.shape}")
    if np.any(b.data == 0.0):
        raise TensorError("div: division by zero")
    out = Tensor(a.data / b.data)
    _check_finite(out.data, "div")
    ad, bd = a.data, b.data
    return _maybe_record(out, [a, b], lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    _check_finite(out.data, "scale")
    return _maybe_record(out, [a], lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")
    ad, bd = a.data, b.data
    return _maybe_record(out, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise TensorError("transpose: 2-D only")
    out = Tensor(a.data.T.copy())
    return _maybe_record(out, [a], lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    out = Tensor(a.data.reshape(shape).copy())
    return _maybe_record(out, [a], lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = (a.data > 0.0).astype(np.float64)  # gradient at 0 is 0
    return _maybe_record(out, [a], lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    _check_finite(out_data, "exp")
    out = Tensor(out_data)
    return _maybe_record(out, [a], lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise TensorError("log: non-positive input")
    out = Tensor(np.log(a.data))
    _check_finite(out.data, "log")
    ad = a.data
    return _maybe_record(out, [a], lambda g: (g / ad,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum())
        shape = a.shape
        return _maybe_record(out, [a], lambda g: (np.full(shape, float(g)),))
    if a.data.ndim != 2 or axis not in (0, 1):
        raise TensorError("tsum: axis reduction supports 2-D, axis in {0, 1}")
    out = Tensor(a.data.sum(axis=axis))
    n = a.shape[axis]
    if axis == 0:
        bwd = lambda g: (np.repeat(g[None, :], n, axis=0),)
    else:
        bwd = lambda g: (np.repeat(g[:, None], n, axis=1),)
    return _maybe_record(out, [a], bwd)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / count)


def max_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    """Max over all entries (axis=None) or per row (axis=1).

    Gradient routes to the first maximal entry (subgradient choice).
    """
    if axis is None:
        out = Tensor(a.data.max())
        idx = np.unravel_index(np.argmax(a.data), a.shape)
        shape = a.shape

        def bwd(g):
            full = np.zeros(shape)
            full[idx] = float(g)
            return (full,)

        return _maybe_record(out, [a], bwd)
    if a.data.ndim != 2 or axis != 1:
        raise TensorError("max_reduce: axis reduction supports 2-D, axis=1")
    out = Tensor(a.data.max(axis=1))
    arg = np.argmax(a.data, axis=1)
    shape = a.shape

    def bwd_rows(g):
        full = np.zeros(shape)
        full[np.arange(shape[0]), arg] = g
        return (full,)

    return _maybe_record(out, [a], bwd_rows)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    if a.data.ndim != 2:
        raise TensorError("l2_normalize_rows: 2-D only")
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms < eps):
        raise TensorError("l2_normalize_rows: zero row")
    y = a.data / norms
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _maybe_record(out, [a], bwd)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise TensorError(f"concat_rows: incompatible shapes {a.shape}, {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    na = a.shape[0]
    return _maybe_record(out, [a, b], lambda g: (g[:na], g[na:]))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim < 1 or not (0 <= start <= stop <= a.shape[0]):
        raise TensorError(f"slice_rows: bad range [{start}, {stop}) for {a.shape}")
    out = Tensor(a.data[start:stop].copy())
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _maybe_record(out, [a], bwd)


# ---------------------------------------------------------------------------
# convolution block primitives (3x3 stride-1 zero-pad, 2x2 max pool)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(n, ci, h, w) -> (n, h*w, ci*9) patches under zero padding."""
    n, ci, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, ci, 9, h, w))
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(n, ci * 9, h * w).transpose(0, 2, 1)


def _col2im(cols: np.ndarray, n: int, ci: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col."""
    cols = cols.transpose(0, 2, 1).reshape(n, ci, 9, h, w)
    xp = np.zeros((n, ci, h + 2, w + 2))
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, k]
            k += 1
    return xp[:, :, 1:1 + h, 1:1 + w]


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    x: (n, ci, h, w); weight: (co, ci, 3, 3); bias: (co,).
    """
    if x.data.ndim != 4:
        raise TensorError("conv2d_3x3: input must be 4-D (n, c, h, w)")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise TensorError("conv2d_3x3: weight must be (co, ci, 3, 3)")
    n, ci, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1] != ci or bias.shape != (co,):
        raise TensorError("conv2d_3x3: channel mismatch")
    cols = _im2col(x.data)  # (n, h*w, ci*9)
    wmat = weight.data.reshape(co, ci * 9)
    out_data = cols @ wmat.T + bias.data[None, None, :]
    out_data = out_data.transpose(0, 2, 1).reshape(n, co, h, w)
    _check_finite(out_data, "conv2d_3x3")
    out = Tensor(out_data)

    def bwd(g):
        gmat = g.reshape(n, co, h * w).transpose(0, 2, 1)  # (n, h*w, co)
        gw = np.einsum("npo,npk->ok", gmat, cols).reshape(co, ci, 3, 3)
        gb = gmat.sum(axis=(0, 1))
        gcols = gmat @ wmat  # (n, h*w, ci*9)
        gx = _col2im(gcols, n, ci, h, w)
        return (gx, gw, gb)

    return _maybe_record(out, [x, weight, bias], bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; spatial dims must be even."""
    if x.data.ndim != 4:
        raise TensorError("maxpool2x2: input must be 4-D")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError("maxpool2x2: spatial dims must be even")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = r.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(flat, axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        gflat = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gr = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gr.reshape(n, c, h, w),)

    return _maybe_record(out, [x], bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_of(f, x: Tensor) -> np.ndarray:
    """Run f under a fresh tape and return d f(x) / d x."""
    leaf = Tensor(x.data.copy(), grad_tracked=True)
    with GradientTape() as tape:
        out = f(leaf)
    grads = backward(tape, out)
    return grads.get(leaf, np.zeros_like(leaf.data))


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    f maps a Tensor to a scalar Tensor. Error per coordinate is
    |g_auto - g_fd| / max(1, |g_fd|).
    """
    if h <= 0:
        raise TensorError("finite_diff_check: h must be positive")
    g_auto = grad_of(f, x)
    base = x.data
    g_fd = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        fp = f(Tensor(xp)).item()
        fm = f(Tensor(xm)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff_check: f non-finite near x")
        g_fd[idx] = (fp - fm) / (2 * h)
        it.iternext()
    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_auto - g_fd) / denom))
