"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every operation records its parents and a backward closure on a dynamically
built graph; `backward()` on a scalar walks the graph once in reverse
topological order. Graph edges exist only where gradients can flow, so
pure-inference passes retain no tape. Graph nodes are never mutated after
the forward pass. All arithmetic is 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import NumericError, ShapeError


class Tensor:
    """A dense float64 array plus optional gradient buffer.

    `requires_grad` marks trainable leaves; results of operations require
    grad iff any input does. Gradients accumulate additively into `grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[Tensor], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """View of this tensor that never propagates gradients."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Deterministic: the same graph walked twice (with grads cleared in
        between) produces bit-identical gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
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
                node._backward(node)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named module functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central finite differences."""

    max_relative_error: float
    per_element_errors: list[float]
    passed: bool


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], bwd: Callable[[Tensor], None]) -> Tensor:
    """Wrap an op result; graph edges attach only if a parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=bwd)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # own a copy: g may alias a buffer the caller reuses
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard transpose backward rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")

    def bwd(o: Tensor) -> None:
        _accum(a, o.grad @ b.data.T)
        _accum(b, a.data.T @ o.grad)

    return _make(a.data @ b.data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum, broadcasting allowed (used for bias rows)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from None

    def bwd(o: Tensor) -> None:
        _accum(a, _unbroadcast(o.grad, a.shape))
        _accum(b, _unbroadcast(o.grad, b.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply shapes incompatible: {a.shape} * {b.shape}") from None

    def bwd(o: Tensor) -> None:
        _accum(a, _unbroadcast(o.grad * b.data, a.shape))
        _accum(b, _unbroadcast(o.grad * a.data, b.shape))

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(o: Tensor) -> None:
        _accum(a, o.grad * c)

    return _make(a.data * c, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")

    def bwd(o: Tensor) -> None:
        _accum(a, o.grad.T)

    return _make(a.data.T.copy(), (a,), bwd)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_dim needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bwd(o: Tensor) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            _accum(p, o.grad[..., offset : offset + w])
            offset += w

    return _make(data, tuple(parts), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(o: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[start:stop] = o.grad
        _accum(a, g)

    return _make(a.data[start:stop].copy(), (a,), bwd)


def slice_last_dim(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(o: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[..., start:stop] = o.grad
        _accum(a, g)

    return _make(a.data[..., start:stop].copy(), (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row lookup (embedding fetch, CLS pooling); backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"gather_rows index out of range [0, {a.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}"
        )

    def bwd(o: Tensor) -> None:
        g = np.zeros_like(a.data)
        np.add.at(g, idx, o.grad)
        _accum(a, g)

    return _make(a.data[idx], (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(o: Tensor) -> None:
        _accum(a, np.full_like(a.data, float(o.grad)))

    return _make(a.data.sum(), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def bwd(o: Tensor) -> None:
        _accum(a, np.full_like(a.data, float(o.grad) / n))

    return _make(a.data.mean(), (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)

    def bwd(o: Tensor) -> None:
        _accum(a, K.gelu_bwd(a.data, o.grad))

    return _make(K.gelu_fwd(a.data), (a,), bwd)


def log(a: Tensor) -> Tensor:
    """Elementwise natural log; caller is responsible for positive inputs."""
    a = _as_tensor(a)

    def bwd(o: Tensor) -> None:
        _accum(a, o.grad / a.data)

    return _make(np.log(a.data), (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax (max-subtracted). Additive -inf masking is supported;
    NaN inputs are rejected."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    y = K.softmax_rows_fwd(x.data)

    def bwd(o: Tensor) -> None:
        _accum(x, K.softmax_rows_bwd(o.data, o.grad))

    return _make(y, (x,), bwd)


def masked_softmax_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax of x + mask for a constant additive {0, -inf} mask.

    Fused equivalent of add-then-softmax_rows: masked entries read exactly 0
    and never touch exp. The mask receives no gradient.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"masked_softmax_rows needs a 2-D tensor, got shape {x.shape}")
    if x.shape != mask.shape:
        raise ShapeError(f"masked_softmax_rows shapes differ: {x.shape} vs {mask.shape}")
    if np.isnan(x.data).any():
        raise NumericError("masked_softmax_rows received NaN input")
    y = K.masked_softmax_fwd(x.data, mask)

    def bwd(o: Tensor) -> None:
        _accum(x, K.softmax_rows_bwd(o.data, o.grad))

    return _make(y, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bwd(o: Tensor) -> None:
        g = (2.0 / n) * diff * float(o.grad)
        _accum(a, g)
        _accum(b, -g)

    return _make((diff * diff).mean(), (a, b), bwd)


def masked_sq_mean(a: Tensor, target: np.ndarray, mask01: np.ndarray) -> Tensor:
    """Mean of (a - target)^2 over the positions where mask01 is 1.

    Fused form of multiply/sub/sum chains on large attention maps; the
    target is a plain array and receives no gradient.
    """
    a = _as_tensor(a)
    if a.shape != target.shape or a.shape != mask01.shape:
        raise ShapeError(
            f"masked_sq_mean shapes differ: {a.shape}, {target.shape}, {mask01.shape}"
        )
    count = float(mask01.sum())
    if count == 0:
        raise ShapeError("masked_sq_mean needs at least one unmasked position")
    diff = (a.data - target) * mask01

    def bwd(o: Tensor) -> None:
        _accum(a, (2.0 / count) * diff * float(o.grad))

    return _make((diff * diff).sum() / count, (a,), bwd)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax probability of the true class per row."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got shape {logits.shape}")
    m, c = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (m,):
        raise ShapeError(f"cross_entropy needs {m} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label out of range [0, {c}): min {lab.min()}, max {lab.max()}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(m), lab]
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=1, keepdims=True)

    def bwd(o: Tensor) -> None:
        g = probs.copy()
        g[np.arange(m), lab] -= 1.0
        _accum(logits, g * (float(o.grad) / m))

    return _make(losses.mean(), (logits,), bwd)


def detach(x: Tensor) -> Tensor:
    """Alias for Tensor.detach: gradient flow stops here."""
    return _as_tensor(x).detach()


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate row-wise coordinate pairs by fixed angles (cos/sin per pair).

    The backward pass rotates the incoming gradient by the opposite angle.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] % 2:
        raise ShapeError(f"rope_rotate needs 2-D tensor with even width, got {x.shape}")

    def bwd(o: Tensor) -> None:
        _accum(x, K.rope_fwd(o.grad, cos, -sin))

    return _make(K.rope_fwd(x.data, cos, sin), (x,), bwd)


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a 2-D tensor, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(o: Tensor) -> None:
        g = o.grad
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, by_row: bool = False) -> Tensor:
    """Inverted dropout with an explicit generator (determinism per step).

    `by_row` drops whole rows (token dropout); otherwise single elements.
    """
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ShapeError(f"dropout rate must be < 1, got {rate}")
    if by_row:
        keep = (rng.random((x.shape[0], 1)) >= rate).astype(np.float64)
    else:
        keep = (rng.random(x.shape) >= rate).astype(np.float64)
    mask = keep / (1.0 - rate)

    def bwd(o: Tensor) -> None:
        _accum(x, o.grad * mask)

    return _make(x.data * mask, (x,), bwd)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare f's analytic gradient at x against central finite differences.

    Relative error per element is |a - n| / max(1e-8, |a| + |n|); the report
    passes iff the max relative error is within `tolerance`.
    """
    if eps <= 0:
        raise ShapeError(f"grad_check eps must be positive, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = (
        probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    )

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    errors = np.abs(a - numeric) / denom
    max_err = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(
        max_relative_error=max_err,
        per_element_errors=[float(e) for e in errors],
        passed=max_err <= tolerance,
    )
