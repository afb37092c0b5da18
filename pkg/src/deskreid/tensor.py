"""Dense N-d tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run): each operation
records its input tensors plus a closure that maps the output gradient to
gradient contributions for the inputs.  Calling :meth:`Tensor.backward` on a
scalar output walks the recorded graph once, in reverse topological order,
accumulating gradients additively wherever a tensor feeds several consumers.

Broadcasting is deliberately restricted: two operands must have equal shapes,
or one of them must be a scalar or match the trailing dimensions of the other
(bias vectors, per-feature scales).  Anything else raises ``ShapeError``.

Every operation checks its output for NaN/Inf and raises ``NonFiniteError``
instead of letting bad values propagate silently.
"""

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class AutodiffError(RuntimeError):
    """Misuse of the autodiff graph, e.g. backward on a non-scalar."""


def _as_array(values):
    arr = np.asarray(values)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _ensure_finite(data, op_name):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op_name} produced non-finite values")


def _check_broadcast(sa, sb, op_name):
    """Allow equal shapes, scalars, and trailing-dimension matches only."""
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(
        f"{op_name}: shapes {sa} and {sb} are incompatible "
        "(broadcasting is limited to scalars and trailing dimensions)"
    )


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    reduced = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    return reduced


class Tensor:
    """A dense row-major float array plus an optional gradient buffer.

    ``data`` is treated as immutable once the tensor participates in a graph;
    only ``grad`` is mutated, and only during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_backward_ran")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, contribution):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution

    def backward(self):
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        Requires a scalar (single-element) output.  A second call on the same
        output is refused; rebuild the forward pass instead.
        """
        if self.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise AutodiffError("backward already ran on this output; rerun the forward pass first")
        self._backward_ran = True
        order = _topo_order(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar; all build graph nodes through the module functions.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None):
        return _sum(self, axis=axis)

    def mean(self, axis=None):
        return _mean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def graph_node(data, parents, backward, op_name):
    """Create an output tensor wired into the graph.

    The backward closure gets the output gradient and must call
    ``accumulate_grad`` on each requires-grad parent.  Layers outside this
    module use this hook to define fused operations (conv, pooling, losses).
    """
    _ensure_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_ran = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root):
    """Iterative postorder over the parent links; each node appears once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _binary(a, b, forward, grad_a, grad_b, op_name):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, op_name)
    data = forward(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(grad_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(grad_b(g, a.data, b.data), b.shape))

    return graph_node(data, (a, b), backward, op_name)


def add(a, b):
    return _binary(a, b, np.add,
                   lambda g, x, y: g,
                   lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda g, x, y: g,
                   lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x, "mul")


def div(a, b):
    def forward(x, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(x, y)

    return _binary(a, b, forward,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y), "div")


def neg(a):
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return graph_node(-a.data, (a,), backward, "neg")


def power(a, exponent):
    """Elementwise power with a fixed scalar exponent."""
    a = _wrap(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return graph_node(data, (a,), backward, "power")


def relu(a):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return graph_node(data, (a,), backward, "relu")


def exp(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return graph_node(data, (a,), backward, "exp")


def log(a):
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return graph_node(data, (a,), backward, "log")


def sqrt(a):
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / data)

    return graph_node(data, (a,), backward, "sqrt")


def _sum(a, axis=None):
    a = _wrap(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    data = a.data.sum(axis=axes)

    def backward(g):
        if a.requires_grad:
            expand = [1 if i in axes else extent for i, extent in enumerate(a.shape)]
            a.accumulate_grad(np.broadcast_to(g.reshape(expand), a.shape))

    return graph_node(data, (a,), backward, "sum")


def _mean(a, axis=None):
    a = _wrap(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = 1
        for ax in axis:
            count *= a.shape[ax]
    return mul(_sum(a, axis=axis), 1.0 / count)


def matmul(a, b):
    """Standard 2-d matrix product; dA = dC @ B^T, dB = A^T @ dC."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return graph_node(data, (a, b), backward, "matmul")


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-d tensor, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return graph_node(a.data.T, (a,), backward, "transpose")


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return graph_node(data, (a,), backward, "reshape")


UNARY_OPS = {
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
}

BINARY_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise operation by name."""
    if b is None:
        if op_kind not in UNARY_OPS:
            raise ValueError(f"unknown unary elementwise op {op_kind!r}")
        return UNARY_OPS[op_kind](a)
    if op_kind not in BINARY_OPS:
        raise ValueError(f"unknown binary elementwise op {op_kind!r}")
    return BINARY_OPS[op_kind](a, b)


def grad_check(fn, inputs, fd_epsilon=1e-5):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` takes one tensor per entry of ``inputs`` and must return a scalar.
    Returns the maximum over all input components of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    tensors = [Tensor(np.array(x.data if isinstance(x, Tensor) else x,
                               dtype=np.float64, copy=True), requires_grad=True)
               for x in inputs]
    out = fn(*tensors)
    if out.data.size != 1:
        raise AutodiffError(f"grad_check requires a scalar output, got shape {out.shape}")
    out.backward()

    def evaluate():
        # Fresh non-grad tensors sharing the (possibly perturbed) buffers.
        return float(fn(*[Tensor(t.data) for t in tensors]).data.reshape(()))

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + fd_epsilon
            upper = evaluate()
            flat[i] = original - fd_epsilon
            lower = evaluate()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * fd_epsilon)
            analytic_i = float(flat_grad[i])
            err = abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
