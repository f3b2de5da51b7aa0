"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the operation vocabulary the model needs is provided. Every op records a
closure that maps the output adjoint back onto its inputs; ``Tensor.backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

SIGMA_FLOOR = 1e-4
_U_CLAMP = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a trace."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | float = 1.0) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior adjoints are not needed once propagated
                if node._parents:
                    node.grad = None

    # operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# primitives --------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g, y.shape))

    return _result(x.data + y.data, (x, y), bw)


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(-g, y.shape))

    return _result(x.data - y.data, (x, y), bw)


def mul(x, y) -> Tensor:
    """Elementwise product."""
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g * y.data, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g * x.data, y.shape))

    return _result(x.data * y.data, (x, y), bw)


elementwise_product = mul


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` has shape (out, in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine: input width {x.shape[-1]} does not match weight {W.shape}")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"affine: bias shape {b.shape} does not match weight {W.shape}")
        out = out + b.data
        parents.append(b)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            W._accumulate(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(out, parents, bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _result(out, (x,), bw)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    a = x.data
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def bw(g):
        x._accumulate(g * _sigmoid(a))

    return _result(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _result(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of a non-positive value")

    def bw(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _result(x.data * x.data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        p = np.exp(out)
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), bw)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    s = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def bw(g):
        x._accumulate(g[..., None] * np.exp(x.data - out[..., None]))

    return _result(out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accumulate(piece)

    return _result(out, xs, bw)


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accumulate(g[i])

    return _result(np.stack([x.data for x in xs]), xs, bw)


def take(x: Tensor, index) -> Tensor:
    """Numpy basic/advanced indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _result(x.data[index], (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(x.data.sum(axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# composites ----------------------------------------------------------------

GRU_WEIGHTS = ("W_r", "U_r", "b_r", "W_u", "U_u", "b_u", "W_h", "U_h", "b_h")


def gru_cell(x: Tensor, h: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """One step of a standard reset/update/candidate gated recurrent unit.

    ``x`` and ``h`` may be batched along leading axes.
    """
    if x.shape[-1] != h.shape[-1]:
        raise ValueError(f"gru_cell: input width {x.shape[-1]} != hidden width {h.shape[-1]}")
    w = weights
    r = sigmoid(affine(x, w["W_r"], w["b_r"]) + affine(h, w["U_r"]))
    u = sigmoid(affine(x, w["W_u"], w["b_u"]) + affine(h, w["U_u"]))
    cand = tanh(affine(x, w["W_h"], w["b_h"]) + affine(r * h, w["U_h"]))
    return (1.0 - u) * h + u * cand


def positive_sigma(raw: Tensor) -> Tensor:
    """softplus(raw) with the numerical floor used for every scale parameter."""
    return softplus(raw) + SIGMA_FLOOR


def gaussian_reparam(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    sigma = as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_reparam: sigma must be strictly positive")
    return as_tensor(mu) + sigma * as_tensor(eps)


def gumbel_noise(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_log_softmax(logits: Tensor, tau: float, u: np.ndarray) -> Tensor:
    """Log of a Gumbel-softmax relaxed sample; stays finite as ``tau`` shrinks."""
    if not tau > 0:
        raise ValueError("gumbel_softmax: tau must be positive")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("gumbel_softmax: uniform draws must lie in (0, 1)")
    return log_softmax((as_tensor(logits) + gumbel_noise(u)) * (1.0 / tau))


def gumbel_softmax(logits: Tensor, tau: float, u: np.ndarray) -> Tensor:
    return exp(gumbel_log_softmax(logits, tau, u))


# parameters ---------------------------------------------------------------


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class ParamStore:
    """Insertion-ordered collection of named trainable tensors.

    ``constants`` holds fixed, non-trainable scalars the model reads at run time;
    they are not written by ``save`` and are restored by whoever owns the config.
    """

    def __init__(self, seed: int = 0):
        self.rng_seed = seed
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self.constants: dict[str, float] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        values = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_weight(self, name: str, shape: tuple[int, int]) -> Tensor:
        a = glorot_bound(shape[1], shape[0])
        return self.add(name, self._rng.uniform(-a, a, size=shape))

    def add_zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self._params.values()]

    def num_entries(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self._params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k!r}: {self._params[k].shape} vs {np.shape(v)}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def save(self, directory: str | Path, config: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = []
        offset = 0
        chunks = []
        for name, p in self._params.items():
            manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "length": int(p.data.size)})
            offset += p.data.size
            chunks.append(p.data.ravel())
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        (directory / "params.json").write_text(json.dumps(manifest, indent=1) + "\n")
        (directory / "params.bin").write_bytes(flat.astype("<f8").tobytes())
        if config is not None:
            (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, seed: int = 0) -> "ParamStore":
        directory = Path(directory)
        manifest = json.loads((directory / "params.json").read_text())
        flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
        store = cls(seed)
        for entry in manifest:
            start, n = entry["offset"], entry["length"]
            if start + n > flat.size:
                raise ValueError(f"params.bin is truncated at {entry['name']!r}")
            store.add(entry["name"], flat[start:start + n].reshape(entry["shape"]))
        return store


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, step: float = 1e-3,
               names: Iterable[str] | None = None) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    The reference is the fourth-order five-point central difference, which keeps
    truncation error negligible at a step large enough to beat roundoff when the
    objective is large. Error per entry is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    store.zero_grad()
    out = f(store)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: objective is not finite")
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in store.items()}
    store.zero_grad()

    worst = 0.0
    with no_grad():
        for name in (names if names is not None else list(store)):
            p = store[name]
            flat = p.data.reshape(-1)
            g_ad = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * step
                    vals.append(f(store).item())
                flat[i] = orig
                if not all(math.isfinite(v) for v in vals):
                    raise FloatingPointError(f"grad_check: objective not finite near {name}[{i}]")
                f2, f1, fm1, fm2 = vals
                g_fd = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * step)
                err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
                worst = max(worst, err)
    return worst
