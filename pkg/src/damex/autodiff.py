"""Dense float64 matrices with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new `Tensor` holding its
value, its parents, and a closure that pushes upstream gradients into those
parents. `reverse_grad` walks the graph once in a fixed topological order, so
gradient accumulation is deterministic (bitwise reproducible) regardless of
how the forward pass was scheduled.

Values are always 2-D: scalars are 1x1, row vectors 1xN. numpy provides the
dense kernels; everything differentiable lives here.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EvaluationError, GraphError, ParameterError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# math.erf is the C library's erf: well below the 1e-10 absolute error this
# package needs (validated against a series oracle in the test suite).
_erf = np.vectorize(math.erf, otypes=[np.float64])


def normal_cdf(x, sigma: float):
    """CDF of N(0, sigma^2), elementwise on scalars or arrays."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    z = np.asarray(x, dtype=np.float64) / (sigma * _SQRT2)
    out = 0.5 * (1.0 + _erf(z))
    return float(out) if np.ndim(x) == 0 else out


def normal_pdf(x, sigma: float):
    """Density of N(0, sigma^2), elementwise."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    z = np.asarray(x, dtype=np.float64) / sigma
    out = np.exp(-0.5 * z * z) * (_INV_SQRT_2PI / sigma)
    return float(out) if np.ndim(x) == 0 else out


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce an upstream gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: tuple[int, int], b: tuple[int, int]) -> None:
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a} and {b} do not broadcast")


class Tensor:
    """A matrix node in the reverse-mode graph.

    `data` and `grad` always share a shape; `grad` starts at exactly zero, so
    a node that never participates in a backward sweep reports a zero
    gradient. Leaves are created with no parents.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = _as_matrix(data)
        self.grad = np.zeros_like(self.data)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        kind = "leaf" if not self._parents else "node"
        return f"Tensor({kind}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    # -- arithmetic ----------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_broadcast(self.shape, other.shape)

        def backward(out: "Tensor") -> None:
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad += _unbroadcast(out.grad, other.shape)

        return Tensor(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(out: "Tensor") -> None:
            self.grad -= out.grad

        return Tensor(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_broadcast(self.shape, other.shape)

        def backward(out: "Tensor") -> None:
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad -= _unbroadcast(out.grad, other.shape)

        return Tensor(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_broadcast(self.shape, other.shape)

        def backward(out: "Tensor") -> None:
            self.grad += _unbroadcast(out.grad * other.data, self.shape)
            other.grad += _unbroadcast(out.grad * self.data, other.shape)

        return Tensor(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_broadcast(self.shape, other.shape)
        value = self.data / other.data

        def backward(out: "Tensor") -> None:
            self.grad += _unbroadcast(out.grad / other.data, self.shape)
            other.grad -= _unbroadcast(out.grad * value / other.data, other.shape)

        return Tensor(value, (self, other), backward)

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul mismatch: {self.shape} by {other.shape}"
            )

        def backward(out: "Tensor") -> None:
            self.grad += out.grad @ other.data.T
            other.grad += self.data.T @ out.grad

        return Tensor(self.data @ other.data, (self, other), backward)

    def matmul(self, other) -> "Tensor":
        return self @ other

    def transpose(self) -> "Tensor":
        def backward(out: "Tensor") -> None:
            self.grad += out.grad.T

        return Tensor(self.data.T.copy(), (self,), backward)

    # -- reductions ----------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            value = self.data.sum().reshape(1, 1)
        else:
            value = self.data.sum(axis=axis, keepdims=True)

        def backward(out: "Tensor") -> None:
            self.grad += np.broadcast_to(out.grad, self.shape)

        return Tensor(value, (self,), backward)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- nonlinearities ------------------------------------------------

    def softmax_rows(self) -> "Tensor":
        """Row-wise softmax with max-subtraction for stability."""
        shifted = self.data - self.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)

        def backward(out: "Tensor") -> None:
            inner = (out.grad * p).sum(axis=1, keepdims=True)
            self.grad += (out.grad - inner) * p

        return Tensor(p, (self,), backward)

    def gelu(self) -> "Tensor":
        """x * Phi(x) with the exact (erf-based) Gaussian CDF."""
        x = self.data
        cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI

        def backward(out: "Tensor") -> None:
            self.grad += out.grad * (cdf + x * pdf)

        return Tensor(x * cdf, (self,), backward)

    def log_clamped(self, floor: float = 1e-12) -> "Tensor":
        """log(max(x, floor)); the gradient is zero on the clamped region."""
        clamped = np.maximum(self.data, floor)
        local = np.where(self.data > floor, 1.0 / clamped, 0.0)

        def backward(out: "Tensor") -> None:
            self.grad += out.grad * local

        return Tensor(np.log(clamped), (self,), backward)

    def normal_cdf(self, sigma: float) -> "Tensor":
        """Elementwise Phi(x) of N(0, sigma^2); derivative is the Gaussian pdf."""
        value = normal_cdf(self.data, sigma)
        local = normal_pdf(self.data, sigma)

        def backward(out: "Tensor") -> None:
            self.grad += out.grad * local

        return Tensor(value, (self,), backward)

    # -- indexing ------------------------------------------------------

    def gather_rows(self, index) -> "Tensor":
        """Select rows by integer index (rows may repeat)."""
        index = np.asarray(index, dtype=np.intp)

        def backward(out: "Tensor") -> None:
            np.add.at(self.grad, index, out.grad)

        return Tensor(self.data[index], (self,), backward)

    def gather_elements(self, rows, cols) -> "Tensor":
        """Pick data[rows[i], cols[i]] as an n x 1 column."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if rows.shape != cols.shape:
            raise ShapeError("row and column index lengths differ")

        def backward(out: "Tensor") -> None:
            np.add.at(self.grad, (rows, cols), out.grad[:, 0])

        return Tensor(self.data[rows, cols].reshape(-1, 1), (self,), backward)

    def scatter_rows(self, index, num_rows: int) -> "Tensor":
        """Place rows at the given (unique) indices of an otherwise-zero matrix."""
        index = np.asarray(index, dtype=np.intp)
        value = np.zeros((num_rows, self.shape[1]))
        value[index] = self.data

        def backward(out: "Tensor") -> None:
            self.grad += out.grad[index]

        return Tensor(value, (self,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def softmax(v: Tensor) -> Tensor:
    return v.softmax_rows()


def reverse_grad(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into `.grad` for every node under `root`.

    The root must be scalar (1x1). The sweep visits nodes in the reverse of a
    fixed depth-first topological order, so accumulation order is a pure
    function of graph structure.
    """
    if root.shape != (1, 1):
        raise GraphError(f"backward root must be 1x1, got {root.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad[...] += 1.0
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of `f` against central differences.

    `f` rebuilds its graph from the leaf tensors in `params` on every call.
    Returns the max relative error over all coordinates, with relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)

    root = f()
    if root.shape != (1, 1):
        raise GraphError(f"finite_diff_check needs a scalar function, got {root.shape}")
    if not np.isfinite(root.data).all():
        raise EvaluationError("function value is not finite")
    for p in params:
        p.zero_grad()
    reverse_grad(root)
    analytic = [p.grad.copy() for p in params]

    def probe() -> float:
        value = float(f().data[0, 0])
        if not math.isfinite(value):
            raise EvaluationError("function value is not finite")
        return value

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = probe()
            flat[i] = saved - eps
            f_minus = probe()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(flat_grad[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_grad[i] - numeric) / denom)
    return worst


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Convenience: materialize an iterable of parameter leaves."""
    return list(tensors)
