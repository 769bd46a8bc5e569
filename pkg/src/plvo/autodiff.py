"""Reverse-mode automatic differentiation over numpy float64 buffers.

The primitive set is exactly what the odometry network needs: dense matmul,
elementwise arithmetic, concat, relu/sigmoid/softmax, sum/max reductions,
strided 2-D convolution, row gathering and quaternion products. Every op
records a backward closure on the tensors it creates; creation order is the
tape's topological order, so a single reverse sweep propagates exact analytic
gradients.

Broadcasting in binary elementwise ops follows numpy rules; gradients are
summed back down to each operand's shape.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import AutodiffError, ShapeError


class Tensor:
    """N-d float64 value participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_swept")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._swept = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape, detail="needs a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        # first accumulation copies (g may view another node's buffer)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable requires_grad leaf.

        self must be scalar. Re-running backward on a graph whose interior
        nodes were already swept is rejected; re-run the forward pass instead.
        """
        if self.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise AutodiffError("backward root does not require grad")
        tape = Tape.trace(self)
        for node in tape.nodes:
            if node._swept and node._backward is not None:
                raise AutodiffError(
                    "backward applied twice without re-running the forward pass")
        self._accum(np.ones_like(self.data))
        for node in reversed(tape.nodes):
            if node._backward is not None:
                node._backward(node.grad)
                node._swept = True

    # arithmetic sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Topologically ordered record of the differentiable nodes reaching a root.

    Parents precede children; a reverse iteration visits each node exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(order)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _from_op(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    out.data = arr
    out.grad = None
    out._swept = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _from_op(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return _from_op(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _from_op(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the subgradient at exactly 0 is taken as 0."""
    out_data = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out_data > 0, out_data, 1.0)
        a._accum(np.where(out_data > 0, g * 0.5 / safe, 0.0))

    return _from_op(out_data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""

    def backward(g):
        a._accum(g * np.sign(a.data))

    return _from_op(np.abs(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g * (a.data > 0))

    return _from_op(np.maximum(a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _from_op(out_data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# structural primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tensors, backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _from_op(a.data.reshape(shape), (a,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx] along axis 0; backward scatter-adds.

    idx may be any integer array; output shape is idx.shape + a.shape[1:].
    """
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim == 0:
        raise ShapeError("gather_rows", a.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", a.shape, idx.shape,
                         detail=f"index out of range [0, {a.shape[0]})")

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _from_op(a.data[idx], (a,), backward)


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy())
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _from_op(a.data.sum(axis=axis), (a,), backward)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; backward routes to the first (lowest-index) argmax."""
    arg = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        a._accum(buf)

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution

@lru_cache(maxsize=256)
def _conv_plan(H: int, W: int, kh: int, kw: int, sh: int, sw: int):
    """SAME-padding geometry and flat gather indices into the padded grid."""
    Ho = -(-H // sh)
    Wo = -(-W // sw)
    pad_h = max(0, (Ho - 1) * sh + kh - H)
    pad_w = max(0, (Wo - 1) * sw + kw - W)
    pt, pl = pad_h // 2, pad_w // 2
    Hp, Wp = H + pad_h, W + pad_w
    oy = np.arange(Ho) * sh
    ox = np.arange(Wo) * sw
    ky = np.arange(kh)
    kx = np.arange(kw)
    rows = oy[:, None, None, None] + ky[None, None, :, None]
    cols = ox[None, :, None, None] + kx[None, None, None, :]
    flat = (rows * Wp + cols).reshape(-1)
    return Ho, Wo, Hp, Wp, pt, pl, flat


def conv2d(x: Tensor, w: Tensor, stride=1, padding: str = "same") -> Tensor:
    """2-D convolution, channels-last: x [H,W,Cin] * w [kh,kw,Cin,Cout].

    SAME padding keeps output dims at ceil(H/s) x ceil(W/s) so the image
    stream matches the point stream's stride sampling exactly.
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if padding != "same":
        raise ValueError(f"unsupported padding {padding!r}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    Ho, Wo, Hp, Wp, pt, pl, flat = _conv_plan(H, W, kh, kw, sh, sw)

    xp = np.zeros((Hp, Wp, Cin))
    xp[pt:pt + H, pl:pl + W] = x.data
    cols = xp.reshape(-1, Cin)[flat].reshape(Ho * Wo, kh * kw * Cin)
    wmat = w.data.reshape(kh * kw * Cin, Cout)
    out_data = (cols @ wmat).reshape(Ho, Wo, Cout)

    def backward(g):
        gmat = g.reshape(Ho * Wo, Cout)
        if w.requires_grad:
            w._accum((cols.T @ gmat).reshape(w.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(-1, Cin)
            gxp = np.zeros((Hp * Wp, Cin))
            np.add.at(gxp, flat, gcols)
            x._accum(gxp.reshape(Hp, Wp, Cin)[pt:pt + H, pl:pl + W])

    return _from_op(out_data, (x, w), backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel channel mixing: x [H,W,Cin] @ w [Cin,Cout] (+ b)."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[0]:
        raise ShapeError("conv1x1", x.shape, w.shape)
    H, W, Cin = x.shape
    out = matmul(reshape(x, (H * W, Cin)), w)
    if b is not None:
        out = add(out, b)
    return reshape(out, (H, W, w.shape[1]))


# ---------------------------------------------------------------------------
# quaternion product

def _quat_left(q):
    w, x, y, z = q
    return np.array([[w, -x, -y, -z],
                     [x, w, -z, y],
                     [y, z, w, -x],
                     [z, -y, x, w]])


def _quat_right(p):
    w, x, y, z = p
    return np.array([[w, -x, -y, -z],
                     [x, w, z, -y],
                     [y, -z, w, x],
                     [z, y, -x, w]])


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product of two (w, x, y, z) quaternions."""
    if a.shape != (4,) or b.shape != (4,):
        raise ShapeError("quat_mul", a.shape, b.shape)
    out_data = _quat_left(a.data) @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_quat_right(b.data).T @ g)
        if b.requires_grad:
            b._accum(_quat_left(a.data).T @ g)

    return _from_op(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# composites

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def mlp_forward(x: Tensor, layers) -> Tensor:
    """Alternating linear + relu; the final layer stays linear.

    layers is a sequence of (weight [Cin,Cout], bias [Cout]) pairs whose
    widths must chain.
    """
    h = x
    for i, (w, b) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise ShapeError("mlp", h.shape, w.shape,
                             detail=f"layer {i} width mismatch")
        h = linear(h, w, b)
        if i + 1 < len(layers):
            h = relu(h)
    return h


def l1_norm(x: Tensor) -> Tensor:
    return sum_reduce(absolute(x))


def l2_norm(x: Tensor) -> Tensor:
    return sqrt(sum_reduce(mul(x, x)))


# ---------------------------------------------------------------------------
# verification

def gradient_check(f, x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a tensor to a scalar tensor. Error per coordinate is
    |analytic - numeric| / max(1e-8, |numeric|).
    """
    x0 = x.data.copy()
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise AutodiffError(f"gradient_check needs a scalar function, got {y.shape}")
    if not np.isfinite(y.data).all():
        raise AutodiffError("gradient_check: function value is not finite")
    y.backward()
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - h
        fm = f(Tensor(bumped.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max())


def gradient_check_params(f, params: dict, h: float = 1e-6,
                          sample_frac: float = 1.0, seed: int = 0) -> float:
    """Finite-difference check of a scalar f() against grads in `params`.

    f takes no arguments and must re-read params[...].data on every call.
    sample_frac < 1 checks a deterministic random subset of coordinates.
    """
    for p in params.values():
        p.zero_grad()
    y = f()
    y.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        k = n if sample_frac >= 1.0 else max(1, int(round(n * sample_frac)))
        coords = np.arange(n) if k == n else np.sort(rng.choice(n, size=k, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
