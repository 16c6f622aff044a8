"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records an append-only list of nodes; each :class:`Value`
is a handle into the tape plus its stored primal (a float64 ndarray of any
shape, scalars included). `backward` walks the tape once in reverse and
accumulates exact vector-Jacobian products.

Conventions baked in here rather than left to callers:

* forward ops check their primal for NaN/Inf and raise
  :class:`NonFiniteError`, so a diverging loss fails loudly close to the op
  that produced it. Pure data movement, bounded maps, and plain arithmetic
  skip the per-op scan as an optimization: any non-finite value they could
  carry or create still propagates into the next checked op (exp, log, div,
  sqrt, reductions, matmul) before a result can be consumed;
* elementwise ``maximum``/``minimum`` break ties toward the first operand;
* ``sign`` and boolean conditions are constants on the tape (zero adjoint);
* constants are pruned: an op whose inputs all carry no gradient records
  no backward closure, so inference-only evaluation costs no graph memory.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str, data: np.ndarray):
        bad = int(np.size(data) - np.isfinite(data).sum())
        super().__init__(f"op '{op}' produced {bad} non-finite element(s)")
        self.op = op


class Value:
    """Handle into a Tape plus the stored primal array."""

    __slots__ = ("tape", "index", "data")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray):
        self.tape = tape
        self.index = index
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(#{self.index}, shape={self.data.shape})"

    # operator sugar; non-Value operands are treated as constants
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(self.tape, other)))

    def __rsub__(self, other):
        return add(_wrap(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __rtruediv__(self, other):
        return div(_wrap(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("parents", "vjps")

    def __init__(self, parents, vjps):
        self.parents = parents  # tape indices of differentiable inputs
        self.vjps = vjps  # one closure per parent: grad -> contribution


class Tape:
    """Append-only op recorder; topological by construction."""

    def __init__(self):
        self._nodes: list[_Node | None] = []
        self._grad_flags: list[bool] = []

    def __len__(self):
        return len(self._nodes)

    def _append(self, data: np.ndarray, node: _Node | None) -> Value:
        self._nodes.append(node)
        self._grad_flags.append(node is not None)
        return Value(self, len(self._nodes) - 1, data)

    def leaf(self, data) -> Value:
        """A differentiable input (gradients can be requested for it)."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf", arr)
        return self._append(arr, _Node((), ()))

    def constant(self, data) -> Value:
        """A non-differentiable input; backward never reaches past it."""
        return self._append(np.asarray(data, dtype=np.float64), None)

    def needs_grad(self, value: Value) -> bool:
        return self._grad_flags[value.index]

    def backward(self, loss: Value, wrt: list[Value]) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. the given values.

        Pure: repeated calls (without re-running the forward pass) return
        identical results. Values unreachable from the loss get zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if np.size(loss.data) != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
        for idx in range(loss.index, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self._nodes[idx]
            if node is None or not node.parents:
                grads[idx] = g  # keep leaf grads around for collection
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                acc = grads.get(parent)
                grads[parent] = contrib if acc is None else acc + contrib
        out = []
        for v in wrt:
            if v.tape is not self:
                raise ValueError("wrt value recorded on a different tape")
            out.append(grads.get(v.index, np.zeros_like(v.data)))
        return out


def _wrap(tape: Tape, x) -> Value:
    return x if isinstance(x, Value) else tape.constant(x)


def _record(tape: Tape, op: str, data: np.ndarray, parents, vjps, check: bool = True) -> Value:
    # single-pass check: any NaN/Inf makes the sum non-finite; ops that are
    # bounded or pure data movement skip it (their inputs were checked)
    if check and not np.isfinite(np.sum(data)):
        raise NonFiniteError(op, data)
    for p in parents:
        if p.tape is not tape:
            raise ValueError(f"op '{op}' mixes values from different tapes")
    live = [(p.index, f) for p, f in zip(parents, vjps) if tape.needs_grad(p)]
    if live:
        idxs, fns = zip(*live)
        return tape._append(data, _Node(idxs, fns))
    return tape._append(data, None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Value, b: Value) -> Value:
    data = a.data + b.data
    return _record(
        a.tape, "add", data, (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
        check=False,
    )


def neg(a: Value) -> Value:
    return _record(a.tape, "neg", -a.data, (a,), (lambda g: -g,), check=False)


def mul(a: Value, b: Value) -> Value:
    data = a.data * b.data
    return _record(
        a.tape, "mul", data, (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
        check=False,
    )


def div(a: Value, b: Value) -> Value:
    data = a.data / b.data
    return _record(
        a.tape, "div", data, (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def exp(a: Value) -> Value:
    data = np.exp(a.data)
    return _record(a.tape, "exp", data, (a,), (lambda g: g * data,))


def log(a: Value) -> Value:
    data = np.log(a.data)
    return _record(a.tape, "log", data, (a,), (lambda g: g / a.data,))


def sqrt(a: Value) -> Value:
    data = np.sqrt(a.data)
    return _record(a.tape, "sqrt", data, (a,), (lambda g: g * (0.5 / data),))


def square(a: Value) -> Value:
    data = a.data * a.data
    return _record(a.tape, "square", data, (a,), (lambda g: g * (2.0 * a.data),), check=False)


def tanh(a: Value) -> Value:
    data = np.tanh(a.data)
    return _record(a.tape, "tanh", data, (a,), (lambda g: g * (1.0 - data * data),), check=False)


def sin(a: Value) -> Value:
    data = np.sin(a.data)
    cos_x = np.cos(a.data)
    return _record(a.tape, "sin", data, (a,), (lambda g: g * cos_x,), check=False)


def cos(a: Value) -> Value:
    data = np.cos(a.data)
    sin_x = np.sin(a.data)
    return _record(a.tape, "cos", data, (a,), (lambda g: -g * sin_x,), check=False)


def sincos(a: Value) -> tuple[Value, Value]:
    """Sine and cosine in one op pair sharing both primals (cheap adjoints)."""
    s = np.sin(a.data)
    c = np.cos(a.data)
    v_sin = _record(a.tape, "sin", s, (a,), (lambda g: g * c,), check=False)
    v_cos = _record(a.tape, "cos", c, (a,), (lambda g: -g * s,), check=False)
    return v_sin, v_cos


def sigmoid(a: Value) -> Value:
    data = _sigmoid_np(a.data)
    return _record(a.tape, "sigmoid", data, (a,), (lambda g: g * data * (1.0 - data),), check=False)


def softplus(a: Value) -> Value:
    # one exp, one log1p; the sigmoid derivative falls out of the same exp
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.maximum(x, 0.0) + np.log1p(e)
    sig = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return _record(a.tape, "softplus", data, (a,), (lambda g: g * sig,), check=False)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: one ufunc pass, stable on both tails
    return 0.5 * np.tanh(0.5 * x) + 0.5


def maximum(a: Value, b: Value) -> Value:
    """Elementwise max; ties go to the first operand."""
    pick_a = a.data >= b.data
    data = np.where(pick_a, a.data, b.data)
    return _record(
        a.tape, "maximum", data, (a, b),
        (
            lambda g: _unbroadcast(g * pick_a, a.data.shape),
            lambda g: _unbroadcast(g * ~pick_a, b.data.shape),
        ),
        check=False,
    )


def minimum(a: Value, b: Value) -> Value:
    """Elementwise min; ties go to the first operand."""
    pick_a = a.data <= b.data
    data = np.where(pick_a, a.data, b.data)
    return _record(
        a.tape, "minimum", data, (a, b),
        (
            lambda g: _unbroadcast(g * pick_a, a.data.shape),
            lambda g: _unbroadcast(g * ~pick_a, b.data.shape),
        ),
        check=False,
    )


def stop_gradient(a: Value) -> Value:
    """Primal passes through; the adjoint is cut to zero."""
    return a.tape.constant(a.data)


def where(cond: np.ndarray, a: Value, b: Value) -> Value:
    """Select by a boolean array; the condition is a tape constant."""
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    return _record(
        a.tape, "where", data, (a, b),
        (
            lambda g: _unbroadcast(g * cond, a.data.shape),
            lambda g: _unbroadcast(g * ~cond, b.data.shape),
        ),
        check=False,
    )


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Value, axis=None, keepdims: bool = False) -> Value:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gg = np.asarray(g).reshape((1,) * a.data.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _record(a.tape, "sum", data, (a,), (vjp,))


def mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gg = np.asarray(g).reshape((1,) * a.data.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape) / n

    return _record(a.tape, "mean", data, (a,), (vjp,))


def _extreme_reduce(a: Value, axis: int, op_name: str, argfn) -> Value:
    idx = argfn(a.data, axis=axis)  # first extreme wins on ties
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return out

    return _record(a.tape, op_name, data, (a,), (vjp,), check=False)


def max_(a: Value, axis: int) -> Value:
    """Reduction max along an axis; subgradient to the first argmax."""
    return _extreme_reduce(a, axis, "max", np.argmax)


def min_(a: Value, axis: int) -> Value:
    """Reduction min along an axis; subgradient to the first argmin."""
    return _extreme_reduce(a, axis, "min", np.argmin)


def logsumexp(a: Value, axis: int = -1, keepdims: bool = False) -> Value:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = m + np.log(total)
    soft = shifted / total
    if not keepdims:
        data = data.squeeze(axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return _record(a.tape, "logsumexp", data, (a,), (vjp,))


def softmax(a: Value, axis: int = -1) -> Value:
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    data = shifted / shifted.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return data * (g - inner)

    return _record(a.tape, "softmax", data, (a,), (vjp,), check=False)


def cumprod(a: Value, axis: int = -1) -> Value:
    """Cumulative product; the VJP is zero-safe (no division by entries)."""
    data = np.cumprod(a.data, axis=axis)

    def vjp(g):
        x = np.moveaxis(a.data, axis, 0)
        gg = np.moveaxis(g, axis, 0)
        n = x.shape[0]
        # exclusive prefix products E_i = prod_{k<i} x_k
        excl = np.ones_like(x)
        if n > 1:
            excl[1:] = np.cumprod(x[:-1], axis=0)
        # suffix recursion S_i = g_i + x_{i+1} * S_{i+1}
        suff = np.empty_like(x)
        suff[n - 1] = gg[n - 1]
        for i in range(n - 2, -1, -1):
            suff[i] = gg[i] + x[i + 1] * suff[i + 1]
        return np.moveaxis(excl * suff, 0, axis)

    return _record(a.tape, "cumprod", data, (a,), (vjp,))


# ---------------------------------------------------------------------------
# shape and linear-algebra ops


def reshape(a: Value, shape) -> Value:
    data = a.data.reshape(shape)
    return _record(a.tape, "reshape", data, (a,), (lambda g: g.reshape(a.data.shape),), check=False)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis), type(None))) for k in parts)


def getitem(a: Value, key) -> Value:
    data = a.data[key]
    if _is_basic_key(key):
        # basic indexing never repeats elements: direct assignment is exact
        def vjp(g):
            out = np.zeros_like(a.data)
            out[key] = g
            return out

    else:

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, key, g)
            return out

    return _record(a.tape, "getitem", data, (a,), (vjp,), check=False)


def take(a: Value, indices: np.ndarray, axis: int = 0) -> Value:
    indices = np.asarray(indices)
    data = np.take(a.data, indices, axis=axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return out

    return _record(a.tape, "take", data, (a,), (vjp,), check=False)


def repeat_rows(a: Value, k: int) -> Value:
    """Repeat each leading-axis row k times; the VJP sums over repeat groups."""
    data = np.repeat(a.data, k, axis=0)
    n = a.data.shape[0]

    def vjp(g):
        return g.reshape((n, k) + a.data.shape[1:]).sum(axis=1)

    return _record(a.tape, "repeat_rows", data, (a,), (vjp,), check=False)


def scatter_rows(a: Value, indices: np.ndarray, length: int) -> Value:
    """Place rows of `a` at `indices` in a zero array of `length` rows."""
    indices = np.asarray(indices)
    data = np.zeros((length,) + a.data.shape[1:], dtype=np.float64)
    data[indices] = a.data
    return _record(a.tape, "scatter_rows", data, (a,), (lambda g: g[indices],), check=False)


def concatenate(values: list[Value], axis: int = -1) -> Value:
    tape = values[0].tape
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _record(tape, "concatenate", data, tuple(values), tuple(make_vjp(i) for i in range(len(values))), check=False)


def stack(values: list[Value], axis: int = 0) -> Value:
    tape = values[0].tape
    data = np.stack([v.data for v in values], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _record(tape, "stack", data, tuple(values), tuple(make_vjp(i) for i in range(len(values))), check=False)


def matmul(a: Value, b: Value) -> Value:
    """2-D matrix product (covers matvec via a trailing reshape)."""
    data = a.data @ b.data
    return _record(
        a.tape, "matmul", data, (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def einsum(spec: str, a: Value, b: Value) -> Value:
    """Two-operand einsum with no repeated index inside one operand.

    Backward contracts the output grad against the other operand, which is
    exact as long as every input index appears elsewhere in the spec.
    """
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    data = np.einsum(spec, a.data, b.data)
    return _record(
        a.tape, "einsum", data, (a, b),
        (
            lambda g: np.einsum(f"{out},{sb}->{sa}", g, b.data),
            lambda g: np.einsum(f"{out},{sa}->{sb}", g, a.data),
        ),
    )


# ---------------------------------------------------------------------------
# convenience compositions (no new adjoint logic)


def dot(a: Value, b: Value) -> Value:
    return sum_(mul(a, b))


def norm(a: Value, axis: int = -1) -> Value:
    return sqrt(sum_(square(a), axis=axis))


def sign_of(a: Value) -> np.ndarray:
    """Sign as a plain array: piecewise constant, zero adjoint."""
    return np.sign(a.data)


# ---------------------------------------------------------------------------
# gradient checking


class GradcheckReport:
    """Per-leaf relative errors between reverse mode and central differences."""

    def __init__(self, errors: dict[str, float], tol: float):
        self.errors = errors
        self.tol = tol

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"  {k}: {v:.3e}" for k, v in self.errors.items()]
        return f"GradcheckReport({status}, tol={self.tol:g})\n" + "\n".join(lines)


def gradcheck(
    build,
    arrays: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 16,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-6,
) -> GradcheckReport:
    """Compare reverse-mode gradients of a scalar function to central differences.

    `build(tape, leaves)` must run the forward pass on the given tape using
    `leaves` (name -> Value, mirroring `arrays`) and return a scalar Value.
    For each leaf, up to `max_entries` coordinates are probed with step `h`;
    the reported error is |ad - fd| / max(|ad|, |fd|, abs_floor).
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    loss = build(tape, leaves)
    grads = dict(zip(arrays.keys(), tape.backward(loss, [leaves[k] for k in arrays])))

    def run(perturbed):
        t2 = Tape()
        return float(build(t2, {k: t2.leaf(v) for k, v in perturbed.items()}).data)

    errors = {}
    for name, base in arrays.items():
        flat_n = base.size
        picks = np.arange(flat_n) if flat_n <= max_entries else rng.choice(flat_n, size=max_entries, replace=False)
        worst = 0.0
        for j in np.sort(picks):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name].flat[j] += h
            minus[name].flat[j] -= h
            fd = (run(plus) - run(minus)) / (2.0 * h)
            ad = grads[name].flat[j]
            err = abs(ad - fd) / max(abs(ad), abs(fd), abs_floor)
            worst = max(worst, err)
        errors[name] = worst
    return GradcheckReport(errors, tol)
