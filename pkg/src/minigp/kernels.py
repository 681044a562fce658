"""Composable covariance functions for Gaussian-process models.

A kernel is an immutable expression tree: leaves are base covariance
functions (squared-exponential, the Matern half-integer family, periodic,
linear), interior nodes rescale, add, or multiply children. Trees support
``k1 + k2`` and ``k1 * k2`` sugar. Base leaves have unit output scale;
amplitude is always expressed through an explicit :class:`Scale` node.

Hyperparameters are strictly positive and flatten to a log-space vector in
pre-order (node before children, left child first), which is the coordinate
system the optimizer works in.

Trees also serialize to a small s-expression language used on the command
line, e.g. ``(+ (scale 1.0 (rbf 0.5)) (scale 1.0 (periodic 1.0 2.0)))``.
Forms: ``(rbf L)``, ``(matern12 L)``, ``(matern32 L)``, ``(matern52 L)``,
``(periodic L P)``, ``(linear V)``, ``(scale S child)``, ``(+ a b)``,
``(* a b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, KernelParseError, NonFiniteError
from .linalg import as_matrix, matmul, pairwise_sqdist, tracked

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


def _positive(name, value):
    v = float(value)
    if not math.isfinite(v) or v <= 0.0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return v


@dataclass(frozen=True)
class Kernel:
    """Base class for kernel expression nodes. Instantiate the subclasses."""

    def __add__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        return Sum(self, other)

    def __mul__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        return Product(self, other)


@dataclass(frozen=True)
class RBF(Kernel):
    """Squared-exponential kernel exp(-r^2 / (2 l^2))."""

    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _positive("lengthscale", self.lengthscale))

    def _gram(self, x, y):
        p = pairwise_sqdist(x, y)
        p *= -0.5 / self.lengthscale**2
        return np.exp(p, out=p)

    def _diag(self, x):
        return tracked(np.ones(x.shape[0]))

    def _params(self):
        return (self.lengthscale,)

    def _rebuild(self, it):
        return RBF(next(it))

    def _slab_buffers(self):
        return 1

    def _sexpr(self):
        return f"(rbf {self.lengthscale!r})"


@dataclass(frozen=True)
class Matern12(Kernel):
    """Exponential kernel exp(-r / l), the nu=1/2 Matern."""

    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _positive("lengthscale", self.lengthscale))

    def _gram(self, x, y):
        p = pairwise_sqdist(x, y)
        np.sqrt(p, out=p)
        p *= -1.0 / self.lengthscale
        return np.exp(p, out=p)

    def _diag(self, x):
        return tracked(np.ones(x.shape[0]))

    def _params(self):
        return (self.lengthscale,)

    def _rebuild(self, it):
        return Matern12(next(it))

    def _slab_buffers(self):
        return 1

    def _sexpr(self):
        return f"(matern12 {self.lengthscale!r})"


@dataclass(frozen=True)
class Matern32(Kernel):
    """Matern nu=3/2: (1 + sqrt(3) r/l) exp(-sqrt(3) r/l)."""

    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _positive("lengthscale", self.lengthscale))

    def _gram(self, x, y):
        p = pairwise_sqdist(x, y)
        np.sqrt(p, out=p)
        p *= _SQRT3 / self.lengthscale
        # p now holds t = sqrt(3) r / l; result is (1 + t) exp(-t)
        e = tracked(np.empty_like(p))
        np.negative(p, out=e)
        np.exp(e, out=e)
        p += 1.0
        p *= e
        return p

    def _diag(self, x):
        return tracked(np.ones(x.shape[0]))

    def _params(self):
        return (self.lengthscale,)

    def _rebuild(self, it):
        return Matern32(next(it))

    def _slab_buffers(self):
        return 2

    def _sexpr(self):
        return f"(matern32 {self.lengthscale!r})"


@dataclass(frozen=True)
class Matern52(Kernel):
    """Matern nu=5/2: (1 + t + t^2/3) exp(-t) with t = sqrt(5) r / l."""

    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _positive("lengthscale", self.lengthscale))

    def _gram(self, x, y):
        p = pairwise_sqdist(x, y)
        p *= 5.0 / self.lengthscale**2
        # p holds t^2
        t = tracked(np.sqrt(p))
        p /= 3.0
        p += t
        p += 1.0
        np.negative(t, out=t)
        np.exp(t, out=t)
        p *= t
        return p

    def _diag(self, x):
        return tracked(np.ones(x.shape[0]))

    def _params(self):
        return (self.lengthscale,)

    def _rebuild(self, it):
        return Matern52(next(it))

    def _slab_buffers(self):
        return 2

    def _sexpr(self):
        return f"(matern52 {self.lengthscale!r})"


@dataclass(frozen=True)
class Periodic(Kernel):
    """exp(-2 sum_d sin^2(pi (x_d - y_d) / p) / l^2)."""

    lengthscale: float = 1.0
    period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "period", _positive("period", self.period))

    def _gram(self, x, y):
        same = y is x
        acc = tracked(np.zeros((x.shape[0], y.shape[0])))
        tmp = tracked(np.empty_like(acc))
        for d in range(x.shape[1]):
            np.subtract(x[:, d, None], y[None, :, d], out=tmp)
            tmp *= math.pi / self.period
            np.sin(tmp, out=tmp)
            np.square(tmp, out=tmp)
            acc += tmp
        if same:
            # force exact symmetry and an exactly-zero diagonal pre-exp
            np.add(acc, acc.T, out=tmp)
            tmp *= 0.5
            np.fill_diagonal(tmp, 0.0)
            acc = tmp
        acc *= -2.0 / self.lengthscale**2
        return np.exp(acc, out=acc)

    def _diag(self, x):
        return tracked(np.ones(x.shape[0]))

    def _params(self):
        return (self.lengthscale, self.period)

    def _rebuild(self, it):
        return Periodic(next(it), next(it))

    def _slab_buffers(self):
        return 2

    def _sexpr(self):
        return f"(periodic {self.lengthscale!r} {self.period!r})"


@dataclass(frozen=True)
class Linear(Kernel):
    """Dot-product kernel v * (x . y), no offset."""

    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variance", _positive("variance", self.variance))

    def _gram(self, x, y):
        same = y is x
        p = matmul(x, y, transpose_b=True)
        p *= self.variance
        if same:
            q = tracked(np.empty_like(p))
            np.add(p, p.T, out=q)
            q *= 0.5
            return q
        return p

    def _diag(self, x):
        d = np.einsum("ij,ij->i", x, x)
        d *= self.variance
        return tracked(d)

    def _params(self):
        return (self.variance,)

    def _rebuild(self, it):
        return Linear(next(it))

    def _slab_buffers(self):
        return 1

    def _sexpr(self):
        return f"(linear {self.variance!r})"


@dataclass(frozen=True)
class Scale(Kernel):
    """Output-scale wrapper s * child(x, y); s is a variance, not a sd."""

    outputscale: float
    child: Kernel

    def __post_init__(self):
        object.__setattr__(self, "outputscale", _positive("outputscale", self.outputscale))
        if not isinstance(self.child, Kernel):
            raise TypeError("Scale child must be a kernel")

    def _gram(self, x, y):
        p = self.child._gram(x, y)
        p *= self.outputscale
        return p

    def _diag(self, x):
        d = self.child._diag(x)
        d *= self.outputscale
        return d

    def _params(self):
        return (self.outputscale,) + self.child._params()

    def _rebuild(self, it):
        return Scale(next(it), self.child._rebuild(it))

    def _slab_buffers(self):
        return self.child._slab_buffers()

    def _sexpr(self):
        return f"(scale {self.outputscale!r} {self.child._sexpr()})"


@dataclass(frozen=True)
class Sum(Kernel):
    """Pointwise sum of two kernels."""

    left: Kernel
    right: Kernel

    def __post_init__(self):
        if not (isinstance(self.left, Kernel) and isinstance(self.right, Kernel)):
            raise TypeError("Sum children must be kernels")

    def _gram(self, x, y):
        p = self.left._gram(x, y)
        q = self.right._gram(x, y)
        p += q
        return p

    def _diag(self, x):
        d = self.left._diag(x)
        d += self.right._diag(x)
        return d

    def _params(self):
        return self.left._params() + self.right._params()

    def _rebuild(self, it):
        return Sum(self.left._rebuild(it), self.right._rebuild(it))

    def _slab_buffers(self):
        return max(self.left._slab_buffers(), 1 + self.right._slab_buffers())

    def _sexpr(self):
        return f"(+ {self.left._sexpr()} {self.right._sexpr()})"


@dataclass(frozen=True)
class Product(Kernel):
    """Pointwise product of two kernels."""

    left: Kernel
    right: Kernel

    def __post_init__(self):
        if not (isinstance(self.left, Kernel) and isinstance(self.right, Kernel)):
            raise TypeError("Product children must be kernels")

    def _gram(self, x, y):
        p = self.left._gram(x, y)
        q = self.right._gram(x, y)
        p *= q
        return p

    def _diag(self, x):
        d = self.left._diag(x)
        d *= self.right._diag(x)
        return d

    def _params(self):
        return self.left._params() + self.right._params()

    def _rebuild(self, it):
        return Product(self.left._rebuild(it), self.right._rebuild(it))

    def _slab_buffers(self):
        return max(self.left._slab_buffers(), 1 + self.right._slab_buffers())

    def _sexpr(self):
        return f"(* {self.left._sexpr()} {self.right._sexpr()})"


def kernel_eval(kernel, x, y=None):
    """Cross-covariance matrix k(x_i, y_j); pass y=None for the square Gram.

    The square case (y omitted, or y the same object as x) is returned
    exactly symmetric with the stationary-kernel diagonal exactly 1 per
    unit-scale leaf.
    """
    same = y is None or y is x
    xv = as_matrix(x, "X")
    yv = xv if same else as_matrix(y, "Y")
    if yv.shape[1] != xv.shape[1]:
        raise DimensionMismatchError(
            f"X has {xv.shape[1]} columns, Y has {yv.shape[1]}"
        )
    return kernel._gram(xv, yv)


def kernel_diag(kernel, x):
    """diag of kernel_eval(kernel, x, x), computed in O(N D)."""
    return kernel._diag(as_matrix(x, "X"))


def n_params(kernel):
    return len(kernel._params())


def flatten_params(kernel):
    """Hyperparameters as natural logs, pre-order (node before children)."""
    return tracked(np.log(np.array(kernel._params(), dtype=np.float64)))


def unflatten_params(kernel, values):
    """Rebuild the tree with hyperparameters exp(values), pre-order."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionMismatchError("parameter vector must be 1-d")
    if values.shape[0] != n_params(kernel):
        raise DimensionMismatchError(
            f"expected {n_params(kernel)} parameters, got {values.shape[0]}"
        )
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("parameter vector contains non-finite values")
    it = iter(np.exp(values).tolist())
    return kernel._rebuild(it)


def is_stationary(kernel):
    """True when every leaf depends on inputs only through differences."""
    if isinstance(kernel, (RBF, Matern12, Matern32, Matern52, Periodic)):
        return True
    if isinstance(kernel, Linear):
        return False
    if isinstance(kernel, Scale):
        return is_stationary(kernel.child)
    return is_stationary(kernel.left) and is_stationary(kernel.right)


def slab_buffer_count(kernel):
    """Peak number of simultaneously live row-slab buffers one block
    of Gram evaluation needs; blocked matvec divides its row budget by
    this so total slab memory stays bounded regardless of tree shape."""
    return kernel._slab_buffers()


_LEAF_FORMS = {
    "rbf": (RBF, 1),
    "matern12": (Matern12, 1),
    "matern32": (Matern32, 1),
    "matern52": (Matern52, 1),
    "periodic": (Periodic, 2),
    "linear": (Linear, 1),
}


def parse_kernel(text):
    """Parse the s-expression kernel language; see the module docstring."""
    if not isinstance(text, str):
        raise KernelParseError("kernel expression must be a string")
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    if not tokens:
        raise KernelParseError("empty kernel expression")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(tokens):
            raise KernelParseError("unexpected end of kernel expression")
        tok = tokens[pos]
        pos += 1
        return tok

    def number(head):
        tok = take()
        try:
            return float(tok)
        except ValueError:
            raise KernelParseError(
                f"expected a number in {head!r} form", token=tok
            ) from None

    def expr():
        tok = take()
        if tok != "(":
            raise KernelParseError("expected '('", token=tok)
        head = take()
        if head in _LEAF_FORMS:
            cls, arity = _LEAF_FORMS[head]
            args = [number(head) for _ in range(arity)]
            try:
                node = cls(*args)
            except ValueError as exc:
                raise KernelParseError(str(exc), token=head) from None
        elif head == "scale":
            s = number(head)
            child = expr()
            try:
                node = Scale(s, child)
            except ValueError as exc:
                raise KernelParseError(str(exc), token=head) from None
        elif head in ("+", "*"):
            left = expr()
            right = expr()
            node = Sum(left, right) if head == "+" else Product(left, right)
        else:
            raise KernelParseError(f"unknown kernel form {head!r}", token=head)
        closing = take()
        if closing != ")":
            raise KernelParseError("expected ')'", token=closing)
        return node

    node = expr()
    if pos != len(tokens):
        raise KernelParseError("trailing tokens after kernel expression", token=tokens[pos])
    return node


def format_kernel(kernel):
    """Canonical s-expression text; parse_kernel round-trips it exactly."""
    return kernel._sexpr()
