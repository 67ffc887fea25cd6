"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to train a small decoder-only transformer on CPU:
numpy arrays underneath, a taped computation graph on top. Storage is
float32 by default; float64 exists so finite-difference gradient checks
can be tight.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a scalar (0-d tensor / Python number) against anything. Shape
expansion is an explicit op (``expand_leading``) so every gradient rule
stays obvious.

Randomness comes from numpy's Philox counter-based bit generator keyed by
an explicit 64-bit seed; gaussian draws use Box-Muller on Philox uniforms,
so fills are reproducible across platforms.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "ComputeGraph",
    "no_grad",
    "make_rng",
    "gaussian_array",
    "zeros",
    "full",
    "gaussian",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "tanh",
    "relu",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "rsqrt_meansq",
    "bce_with_logits",
    "elementwise",
    "matmul",
    "reshape",
    "permute",
    "expand_leading",
    "concat",
    "narrow",
    "gather_rows",
    "take_lastdim",
    "select_time",
    "tsum",
    "tmean",
    "dropout",
    "backward",
    "grad_check",
]


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, double backward, ...)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# RNG: Philox (counter-based) + Box-Muller gaussians
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Philox counter-based generator keyed by an explicit 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def gaussian_array(
    shape: Sequence[int],
    mean: float,
    std: float,
    rng: np.random.Generator,
    dtype=np.float32,
) -> np.ndarray:
    """Gaussian samples via Box-Muller on Philox uniforms.

    Pairs of uniforms map to pairs of normals; the trailing sample of an
    odd-sized request is discarded. The transform is elementary math on a
    platform-stable bitstream, so identical seeds give identical fills
    everywhere.
    """
    n = int(np.prod(shape)) if len(shape) else 1
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]: keeps log() finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
    return (mean + std * z).reshape(shape).astype(dtype)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense array plus the bookkeeping reverse-mode autodiff needs.

    ``requires_grad`` on a leaf marks it as a trainable parameter; leaves
    without it never receive a grad buffer. Results of recorded ops carry
    ``requires_grad=True`` whenever any input does, which is how gradient
    flow is tracked through intermediates (their transient grads live on
    the tape, not on the tensor).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_consumed")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        _parents: tuple = (),
        _grad_fn: Callable | None = None,
    ):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ValueError("tensor shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ValueError(f"tensor dimensions must be >= 1, got {dims}")
    return dims


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape), dtype=dtype), requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), value, dtype=dtype), requires_grad=requires_grad)


def gaussian(
    shape: Sequence[int],
    mean: float,
    std: float,
    seed: int | np.random.Generator,
    dtype=np.float32,
    requires_grad: bool = False,
) -> Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return Tensor(gaussian_array(_validate_shape(shape), mean, std, rng, dtype), requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    """Wrap raw data as a non-differentiable tensor."""
    arr = np.asarray(data)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Graph recording
# ---------------------------------------------------------------------------


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=parents, _grad_fn=grad_fn)
    return Tensor(out_data)


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Only equal shapes or scalar-vs-tensor; anything else is the caller's bug.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only equal-shape or scalar broadcasting is supported)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Collapse a broadcast gradient back down to a scalar operand's shape.
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if shape else np.asarray(grad.sum())


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_binary_shapes(a, b, "add")
    out = a.data + b.data

    def _bw(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, _reduce_to(g, b.shape))

    return _record(out, (a, b), _bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_binary_shapes(a, b, "sub")
    out = a.data - b.data

    def _bw(g, acc):
        acc(a, _reduce_to(g, a.shape))
        acc(b, _reduce_to(-g, b.shape))

    return _record(out, (a, b), _bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_binary_shapes(a, b, "mul")
    out = a.data * b.data

    def _bw(g, acc):
        acc(a, _reduce_to(g * b.data, a.shape))
        acc(b, _reduce_to(g * a.data, b.shape))

    return _record(out, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def _bw(g, acc):
        acc(a, g * a.data.dtype.type(c))

    return _record(out, (a,), _bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g, acc):
        acc(a, g * out)

    return _record(out, (a,), _bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out = np.log(a.data)

    def _bw(g, acc):
        acc(a, g / a.data)

    return _record(out, (a,), _bw)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_array(a.data)

    def _bw(g, acc):
        acc(a, g * s * (1.0 - s))

    return _record(s, (a,), _bw)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_array(a.data)
    out = a.data * s

    def _bw(g, acc):
        acc(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _record(out, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def _bw(g, acc):
        acc(a, g * (1.0 - t * t))

    return _record(t, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def _bw(g, acc):
        acc(a, g * (a.data > 0))

    return _record(out, (a,), _bw)


def softmax_lastdim(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g, acc):
        acc(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    return _record(s, (a,), _bw)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def _bw(g, acc):
        acc(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _record(out, (a,), _bw)


def rsqrt_meansq(a: Tensor, eps: float) -> Tensor:
    """1/sqrt(mean(x^2, lastdim) + eps), repeated along the last dim.

    Output shape equals the input shape so downstream multiplies stay
    within the equal-shape contract.
    """
    if eps <= 0:
        raise ValueError("rsqrt_meansq requires eps > 0")
    d = a.shape[-1]
    m = (a.data * a.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(m + a.data.dtype.type(eps))
    out = np.broadcast_to(r, a.shape).astype(a.data.dtype, copy=True)

    def _bw(g, acc):
        gs = g.sum(axis=-1, keepdims=True)
        acc(a, (-gs * a.data / d) * (r ** 3))

    return _record(out, (a,), _bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross entropy on raw logits, numerically stable.

    ``targets`` is a plain float array in [0, 1]; no gradient flows to it.
    """
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"bce_with_logits: targets shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def _bw(g, acc):
        acc(logits, g * (_sigmoid_array(z) - y))

    return _record(out, (logits,), _bw)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
    "exp": exp,
    "log": log,
    "silu": silu,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax_lastdim,
    "rsqrt_meansq": rsqrt_meansq,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of the named elementwise ops by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Matmul and structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: 2-d x 2-d, stacked x 2-d (weight application), and
    stacked x stacked with identical leading dims (attention). No
    cross-broadcasting of leading dims.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims differ, {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g, acc):
        if a.requires_grad or a._parents:
            acc(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, n = b.shape
                acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                acc(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def _bw(g, acc):
        acc(a, g.reshape(a.shape))

    return _record(out, (a,), _bw)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def _bw(g, acc):
        acc(a, np.transpose(g, inv))

    return _record(out, (a,), _bw)


def expand_leading(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Materialize copies of ``a`` along new leading dims; grad sums them."""
    leading = tuple(int(d) for d in leading)
    out = np.broadcast_to(a.data, leading + a.shape).astype(a.data.dtype, copy=True)
    n_lead = len(leading)

    def _bw(g, acc):
        acc(a, g.sum(axis=tuple(range(n_lead))))

    return _record(out, (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g, acc):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(t, g[tuple(idx)])

    return _record(out, tuple(tensors), _bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def _bw(g, acc):
        full_g = np.zeros_like(a.data)
        full_g[idx] = g
        acc(a, full_g)

    return _record(out, (a,), _bw)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); grad scatter-adds rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"gather_rows: id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def _bw(g, acc):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        acc(table, gt)

    return _record(out, (table,), _bw)


def take_lastdim(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row of a 2-d tensor: out[i] = a[i, idx[i]]."""
    if a.data.ndim != 2:
        raise ValueError("take_lastdim expects a 2-d tensor")
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx].copy()

    def _bw(g, acc):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        acc(a, ga)

    return _record(out, (a,), _bw)


def select_time(a: Tensor, positions: np.ndarray) -> Tensor:
    """Pick one time step per batch row of [B, T, D]: out[b] = a[b, positions[b]]."""
    if a.data.ndim != 3:
        raise ValueError("select_time expects a 3-d tensor")
    positions = np.asarray(positions)
    rows = np.arange(a.shape[0])
    out = a.data[rows, positions].copy()

    def _bw(g, acc):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, positions), g)
        acc(a, ga)

    return _record(out, (a,), _bw)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def _bw(g, acc):
        acc(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))

    return _record(out, (a,), _bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def _bw(g, acc):
        acc(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype, copy=True))

    return _record(out, (a,), _bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


class ComputeGraph:
    """The recorded operations reachable from one root, in topological order.

    Built lazily at backward time by walking parent links; the graph is
    acyclic by construction (every op creates a fresh output node).
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.precision = "double" if root.data.dtype == np.float64 else "single"
        self.nodes = self._topo(root)

    @staticmethod
    def _topo(root: Tensor) -> list[Tensor]:
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
        return order

    def run(self) -> dict[Tensor, np.ndarray]:
        """Propagate grads root-first; returns grads of requires_grad leaves.

        Each node is visited exactly once, in reverse topological order.
        Closures are released as they run, so a second backward through the
        same graph is impossible (and is reported as such).
        """
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}

        def acc(t: Tensor, g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            key = id(t)
            if key in grads:
                # Out-of-place: stored arrays may be shared between parents.
                grads[key] = grads[key] + g
            else:
                grads[key] = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g

        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is not None:
                node._grad_fn(g, acc)
                node._grad_fn = None
                node._parents = ()
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                leaf_grads[node] = g
        return leaf_grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` on every requires_grad leaf reachable from the
    loss (accumulating into existing buffers) and returns a map of those
    leaves to the grads contributed by this call. Leaves that do not reach
    the loss are untouched: their grad stays None, i.e. zero. Frozen
    leaves never get a buffer.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; run a fresh forward first")
    loss._consumed = True
    if not loss.requires_grad:
        return {}
    return ComputeGraph(loss).run()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float,
    coords: Iterable[tuple] | int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() grads and central differences.

    ``f`` must be scalar-valued and ``x`` double precision. ``coords``
    selects which coordinates to probe: None checks all of them, an int n
    samples n without replacement (needs ``rng``), an iterable gives the
    index tuples directly. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1).
    """
    if eps <= 0:
        raise ValueError("grad_check requires eps > 0")
    if x.data.dtype != np.float64:
        raise ValueError("grad_check must run in double precision")
    if not x.requires_grad:
        raise ValueError("grad_check target must have requires_grad=True")

    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check function must be scalar-valued")
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.zero_grad()

    all_idx = list(np.ndindex(*x.shape))
    if coords is None:
        probe = all_idx
    elif isinstance(coords, int):
        if rng is None:
            raise ValueError("sampling coordinates requires an rng")
        chosen = rng.choice(len(all_idx), size=min(coords, len(all_idx)), replace=False)
        probe = [all_idx[i] for i in chosen]
    else:
        probe = [tuple(c) for c in coords]

    max_err = 0.0
    with no_grad():
        for idx in probe:
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = f(x).item()
            x.data[idx] = orig - eps
            fm = f(x).item()
            x.data[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            max_err = max(max_err, err)
    return max_err
