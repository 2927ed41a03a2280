"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the operation set the prompt-learning pipeline needs:
matrix products, elementwise arithmetic with numpy-style broadcasting,
ReLU, temperature softmax, cosine similarity, fused stable cross-entropy,
L2 row normalization, reductions, gather/concat/reshape plumbing, a plain
SGD step, and a central finite-difference gradient checker.

The graph is define-by-run: every op that touches a tensor requiring
gradients records its parents and a backward closure; ``Tensor.backward``
replays them in reverse topological order. Tensors whose ``requires_grad``
is False never get a gradient buffer.

Values are float32 by default. Full reductions accumulate in float64
before casting back, so sums are insensitive to summand order at float32
resolution. The gradient checker promotes its probe point to float64;
float32 forward noise would otherwise drown the 1e-4 comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A scalar argument is outside its documented range."""


class DegenerateVectorError(ValueError):
    """A vector that must have positive norm is (numerically) zero."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed tensor node in the autodiff graph.

    ``data`` is a C-contiguous float array (float32 unless explicitly
    promoted), ``grad`` is populated by :meth:`backward` only on tensors
    with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data outside the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def _accum(t: "Tensor", g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = g.astype(t.data.dtype, copy=True)
        else:
            t.grad = t.grad + g.astype(t.data.dtype, copy=False)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Walks the recorded graph in reverse topological order; gradient
        buffers appear only on tensors that require gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        out_data = self.data + other.data

        def backward(g: np.ndarray) -> None:
            Tensor._accum(self, _unbroadcast(g, self.data.shape))
            Tensor._accum(other, _unbroadcast(g, other.data.shape))

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            Tensor._accum(self, -g)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        out_data = self.data - other.data

        def backward(g: np.ndarray) -> None:
            Tensor._accum(self, _unbroadcast(g, self.data.shape))
            Tensor._accum(other, _unbroadcast(-g, other.data.shape))

        return self._make(out_data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other, self) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        a_data, b_data = self.data, other.data
        out_data = a_data * b_data

        def backward(g: np.ndarray) -> None:
            Tensor._accum(self, _unbroadcast(g * b_data, a_data.shape))
            Tensor._accum(other, _unbroadcast(g * a_data, b_data.shape))

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape plumbing --------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g: np.ndarray) -> None:
            Tensor._accum(self, g.reshape(in_shape))

        return self._make(out_data, (self,), backward)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis=axis)

    def relu(self) -> "Tensor":
        return relu(self)


def constant(data, dtype=None) -> Tensor:
    """A tensor outside the graph (no gradient ever flows into it)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- operations ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors.

    Backward: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    out_data = a_data @ b_data

    def backward(g: np.ndarray) -> None:
        Tensor._accum(a, g @ b_data.T)
        Tensor._accum(b, a_data.T @ g)

    return a._make(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {x.shape}")

    def backward(g: np.ndarray) -> None:
        Tensor._accum(x, np.ascontiguousarray(g.T))

    return x._make(np.ascontiguousarray(x.data.T), (x,), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    gate = x.data > 0

    def backward(g: np.ndarray) -> None:
        Tensor._accum(x, g * gate)

    return x._make(np.where(gate, x.data, 0), (x,), backward)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax along the last axis, stabilized by max-subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
        Tensor._accum(x, (y * (g - inner)) / temperature)

    return x._make(y, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors, in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data.astype(np.float64)))
    nb = float(np.linalg.norm(b.data.astype(np.float64)))
    if na <= 0 or nb <= 0:
        raise DegenerateVectorError("cosine_similarity of a zero-norm vector is undefined")
    dot = float(np.dot(a.data.astype(np.float64), b.data.astype(np.float64)))
    c = dot / (na * nb)
    out_data = np.asarray(c, dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        gs = float(g)
        Tensor._accum(a, (gs * (b.data / (na * nb) - a.data * (c / (na * na)))).astype(a.data.dtype))
        Tensor._accum(b, (gs * (a.data / (na * nb) - b.data * (c / (nb * nb)))).astype(b.data.dtype))

    return a._make(out_data, (a, b), backward)


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector.

    Fused with log-sum-exp stabilization, so saturated logits (e.g. 1000)
    neither overflow nor lose the gradient.
    """
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-D logit vector, got {logits.shape}")
    n = logits.data.shape[0]
    if not (0 <= target_index < n):
        raise ParameterError(f"target index {target_index} out of range for {n} logits")
    z = logits.data.astype(np.float64)
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    loss = lse - z[target_index]
    probs = np.exp(z - lse)

    def backward(g: np.ndarray) -> None:
        gz = probs.copy()
        gz[target_index] -= 1.0
        Tensor._accum(logits, (float(g) * gz).astype(logits.data.dtype))

    return logits._make(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale the last axis to unit L2 norm (rows of a matrix, or a vector)."""
    norms = np.linalg.norm(x.data.astype(np.float64), axis=-1, keepdims=True)
    if np.any(norms <= 0):
        raise DegenerateVectorError("cannot L2-normalize a zero-norm row")
    norms = norms.astype(x.data.dtype)
    y = x.data / norms

    def backward(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
        Tensor._accum(x, (g - y * inner) / norms)

    return x._make(y, (x,), backward)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum, accumulated in float64 and cast back to the input dtype."""
    out_data = x.data.sum(axis=axis, dtype=np.float64).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            Tensor._accum(x, np.broadcast_to(g, x.data.shape))
        else:
            Tensor._accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return x._make(out_data, (x,), backward)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out_data = (x.data.sum(axis=axis, dtype=np.float64) / n).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        scaled = g / n
        if axis is None:
            Tensor._accum(x, np.broadcast_to(scaled, x.data.shape))
        else:
            Tensor._accum(x, np.broadcast_to(np.expand_dims(scaled, axis), x.data.shape))

    return x._make(out_data, (x,), backward)


def extract_patches(x: Tensor, patch: int) -> Tensor:
    """Cut an H×W×C image into non-overlapping patches, flattened row-major.

    Output row k is the k-th patch in raster order, length patch*patch*C.
    Backward scatters gradients back through the exact inverse layout.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"extract_patches needs an H×W×C image, got shape {x.shape}")
    h, w, c = x.data.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}×{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    view = x.data.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    out_data = np.ascontiguousarray(view).reshape(gh * gw, patch * patch * c)

    def backward(g: np.ndarray) -> None:
        gx = g.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4)
        Tensor._accum(x, np.ascontiguousarray(gx).reshape(h, w, c))

    return x._make(out_data, (x,), backward)


def gather(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows (rank 2) or elements (rank 1) along axis 0."""
    idx = np.asarray(list(indices), dtype=np.intp)
    out_data = x.data[idx]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            Tensor._accum(x, gx)

    return x._make(out_data, (x,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack 1-D rows and rank-2 blocks into one matrix along axis 0."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    blocks = [p.data if p.data.ndim == 2 else p.data.reshape(1, -1) for p in parts]
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows got mismatched row widths {sorted(widths)}")
    out_data = np.concatenate(blocks, axis=0)
    counts = [b.shape[0] for b in blocks]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, rows in zip(parts, counts):
            piece = g[offset:offset + rows]
            Tensor._accum(p, piece if p.data.ndim == 2 else piece.reshape(p.data.shape))
            offset += rows

    return parts[0]._make(out_data, tuple(parts), backward)


# -- optimization --------------------------------------------------------


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    momentum: float = 0.0,
    velocities: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """In-place gradient-descent update p <- p - lr * g, in list order.

    Momentum is optional and off by default; pass the returned velocity
    buffers back in to carry state across steps. Entries with a None
    gradient are left untouched.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        if momentum > 0.0:
            velocities[i] = momentum * velocities[i] + g
            p.data -= (lr * velocities[i]).astype(p.data.dtype)
        else:
            p.data -= (lr * g).astype(p.data.dtype)
    return velocities


# -- verification ----------------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-3,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar function with central
    finite differences.

    The probe point is promoted to float64 for both sides of the
    comparison; the backward rules under test are the same code that runs
    in float32. Relative error uses denominator max(|a|, |b|, 1e-8) and
    the check passes iff the max over all coordinates is <= tol. Failure
    is reported in the result, never raised.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    base = base.astype(np.float64)

    x = Tensor(base, requires_grad=True, dtype=np.float64)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

    def eval_at(values: np.ndarray) -> float:
        return fn(Tensor(values, dtype=np.float64)).item()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        num_flat[i] = (
            eval_at((flat + bump).reshape(base.shape))
            - eval_at((flat - bump).reshape(base.shape))
        ) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckResult(passed=max_rel <= tol, max_rel_err=max_rel)
