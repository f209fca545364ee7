"""A small reverse-mode engine over float64 numpy arrays.

Everything the network needs and nothing more: dense tensors, a handful of
ops, SiLU MLPs, Adam with decoupled weight decay, a cosine schedule, global
gradient clipping, a central-difference gradient checker and a flat binary
checkpoint format.  All computation is float64 and deterministic: ops are
pure numpy, backward walks an explicit topological order, and accumulation
order is fixed by graph construction order.

Non-smooth ops take a fixed subgradient (documented per op), so analytic
gradients match central differences everywhere except on the measure-zero tie
sets themselves.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffNode",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "rowwise_concat",
    "elem_pow",
    "silu",
    "sigmoid",
    "sum_rows",
    "mean_all",
    "gather_rows",
    "scatter_add_rows",
    "row_norm",
    "custom",
    "backward",
    "mse_loss",
    "mae_loss",
    "huber_loss",
    "bce_with_logits_loss",
    "Mlp",
    "ParamStore",
    "cosine_lr",
    "GradCheckReport",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class DiffNode:
    """One value in the computation graph.

    ``grad`` is allocated lazily during the backward sweep.  Leaves created
    with ``requires_grad=False`` (constants) terminate propagation.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["DiffNode", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        return f"DiffNode(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> DiffNode:
    return DiffNode(np.asarray(value, dtype=np.float64), requires_grad=False)


def _node(value, parents, backward) -> DiffNode:
    return DiffNode(np.asarray(value, dtype=np.float64), tuple(parents), backward)


def custom(
    value: np.ndarray,
    parents: Sequence[DiffNode],
    backward: Callable[[np.ndarray], None],
) -> DiffNode:
    """Escape hatch for ops with handwritten pullbacks (see the model's
    invariant evaluation).  ``backward`` receives the upstream gradient and
    must call ``add_grad`` on the parents itself."""
    return _node(value, parents, backward)


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    out_value = a.value @ b.value

    def bwd(g):
        if a.requires_grad:
            a.add_grad(g @ b.value.T)
        if b.requires_grad:
            b.add_grad(a.value.T @ g)

    return _node(out_value, (a, b), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # sum out added leading axes, then sum broadcast axes of size 1
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    out_value = a.value + b.value

    def bwd(g):
        if a.requires_grad:
            a.add_grad(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.add_grad(_unbroadcast(g, b.value.shape))

    return _node(out_value, (a, b), bwd)


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    out_value = a.value - b.value

    def bwd(g):
        if a.requires_grad:
            a.add_grad(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.add_grad(-_unbroadcast(g, b.value.shape))

    return _node(out_value, (a, b), bwd)


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    out_value = a.value * b.value

    def bwd(g):
        if a.requires_grad:
            a.add_grad(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b.add_grad(_unbroadcast(g * a.value, b.value.shape))

    return _node(out_value, (a, b), bwd)


def scale(a: DiffNode, factor) -> DiffNode:
    """Multiply by a non-differentiated constant (scalar or array)."""
    factor = np.asarray(factor, dtype=np.float64)

    def bwd(g):
        if a.requires_grad:
            a.add_grad(_unbroadcast(g * factor, a.value.shape))

    return _node(a.value * factor, (a,), bwd)


def rowwise_concat(nodes: Sequence[DiffNode]) -> DiffNode:
    """Concatenate (m, d_i) blocks along columns."""
    nodes = list(nodes)
    out_value = np.concatenate([n.value for n in nodes], axis=1)
    splits = np.cumsum([n.value.shape[1] for n in nodes])[:-1]

    def bwd(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=1)):
            if n.requires_grad:
                n.add_grad(piece)

    return _node(out_value, tuple(nodes), bwd)


def elem_pow(a: DiffNode, exponent: float) -> DiffNode:
    """Elementwise power with a constant exponent (values must keep the
    expression well-defined, e.g. positive for fractional exponents)."""
    out_value = a.value**exponent

    def bwd(g):
        if a.requires_grad:
            a.add_grad(g * exponent * a.value ** (exponent - 1.0))

    return _node(out_value, (a,), bwd)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # exponentiate only non-positive values so large |z| cannot overflow
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(a: DiffNode) -> DiffNode:
    s = _stable_sigmoid(a.value)
    out_value = a.value * s

    def bwd(g):
        if a.requires_grad:
            a.add_grad(g * (s * (1.0 + a.value * (1.0 - s))))

    return _node(out_value, (a,), bwd)


def sigmoid(a: DiffNode) -> DiffNode:
    s = _stable_sigmoid(a.value)

    def bwd(g):
        if a.requires_grad:
            a.add_grad(g * s * (1.0 - s))

    return _node(s, (a,), bwd)


def sum_rows(a: DiffNode) -> DiffNode:
    """Sum an (m, d) block over rows into (d,)."""
    out_value = a.value.sum(axis=0)

    def bwd(g):
        if a.requires_grad:
            a.add_grad(np.broadcast_to(g, a.value.shape).copy())

    return _node(out_value, (a,), bwd)


def mean_all(a: DiffNode) -> DiffNode:
    out_value = np.asarray(a.value.mean())

    def bwd(g):
        if a.requires_grad:
            a.add_grad(np.full_like(a.value, float(g) / a.value.size))

    return _node(out_value, (a,), bwd)


def gather_rows(a: DiffNode, idx: np.ndarray) -> DiffNode:
    idx = np.asarray(idx, dtype=np.int64)
    out_value = a.value[idx]

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            np.add.at(acc, idx, g)
            a.add_grad(acc)

    return _node(out_value, (a,), bwd)


def _segment_sum(rows: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    out = np.zeros((num_rows,) + rows.shape[1:], dtype=np.float64)
    if rows.shape[0] == 0:
        return out
    if idx.size > 1 and (np.diff(idx) >= 0).all():
        # sorted receivers: reduceat beats np.add.at by a wide margin
        starts = np.flatnonzero(np.r_[True, np.diff(idx) > 0])
        sums = np.add.reduceat(rows, starts, axis=0)
        out[idx[starts]] = sums
        return out
    np.add.at(out, idx, rows)
    return out


def scatter_add_rows(a: DiffNode, idx: np.ndarray, num_rows: int) -> DiffNode:
    """Accumulate rows of ``a`` into ``num_rows`` output slots: out[idx[p]] += a[p]."""
    idx = np.asarray(idx, dtype=np.int64)
    out_value = _segment_sum(a.value, idx, num_rows)

    def bwd(g):
        if a.requires_grad:
            a.add_grad(g[idx])

    return _node(out_value, (a,), bwd)


def row_norm(a: DiffNode) -> DiffNode:
    """Euclidean norm of each row: (m, n) -> (m, 1).  Subgradient 0 at rows of zeros."""
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))

    def bwd(g):
        if a.requires_grad:
            safe = np.where(norms > 0, norms, 1.0)
            a.add_grad(g * a.value / safe * (norms > 0))

    return _node(norms, (a,), bwd)


def backward(root: DiffNode) -> None:
    """Reverse sweep from a scalar.  Gradients accumulate into ``.grad``."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.value.shape}")
    topo: list[DiffNode] = []
    visited: set[int] = set()
    stack: list[tuple[DiffNode, int]] = [(root, 0)]
    while stack:
        node, child = stack[-1]
        if id(node) in visited and child == 0:
            stack.pop()
            continue
        if child < len(node.parents):
            stack[-1] = (node, child + 1)
            parent = node.parents[child]
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, 0))
        else:
            visited.add(id(node))
            topo.append(node)
            stack.pop()
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- losses ---------------------------------------------------------------------


def mse_loss(pred: DiffNode, target: np.ndarray) -> DiffNode:
    target = np.asarray(target, dtype=np.float64)
    err = pred.value - target
    out_value = np.asarray(np.mean(err * err))

    def bwd(g):
        if pred.requires_grad:
            pred.add_grad(float(g) * 2.0 * err / err.size)

    return _node(out_value, (pred,), bwd)


def mae_loss(pred: DiffNode, target: np.ndarray) -> DiffNode:
    """Mean absolute error; subgradient 0 at exact zero error."""
    target = np.asarray(target, dtype=np.float64)
    err = pred.value - target
    out_value = np.asarray(np.mean(np.abs(err)))

    def bwd(g):
        if pred.requires_grad:
            pred.add_grad(float(g) * np.sign(err) / err.size)

    return _node(out_value, (pred,), bwd)


def huber_loss(pred: DiffNode, target: np.ndarray, delta: float = 1.0) -> DiffNode:
    target = np.asarray(target, dtype=np.float64)
    err = pred.value - target
    absed = np.abs(err)
    quad = 0.5 * err * err
    lin = delta * (absed - 0.5 * delta)
    out_value = np.asarray(np.mean(np.where(absed <= delta, quad, lin)))

    def bwd(g):
        if pred.requires_grad:
            de = np.where(absed <= delta, err, delta * np.sign(err))
            pred.add_grad(float(g) * de / err.size)

    return _node(out_value, (pred,), bwd)


def bce_with_logits_loss(logits: DiffNode, targets: np.ndarray) -> DiffNode:
    """Binary cross-entropy on logits, numerically stable."""
    t = np.asarray(targets, dtype=np.float64)
    z = logits.value
    out_value = np.asarray(np.mean(np.logaddexp(0.0, z) - z * t))

    def bwd(g):
        if logits.requires_grad:
            s = _stable_sigmoid(z)
            logits.add_grad(float(g) * (s - t) / z.size)

    return _node(out_value, (logits,), bwd)


LOSSES = {
    "mse": mse_loss,
    "mae": mae_loss,
    "huber": huber_loss,
    "bce": bce_with_logits_loss,
}


# -- parameters, optimiser, schedule ---------------------------------------------


class CheckpointError(ValueError):
    """Malformed checkpoint file or mismatched shapes."""


class ParamStore:
    """Named float64 parameter tensors plus Adam state.

    Initialisation draws from a store-owned generator, so a fixed seed and a
    fixed creation order reproduce the parameters exactly.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, DiffNode] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def parameter(
        self, name: str, shape: tuple[int, ...], init: str = "glorot_uniform"
    ) -> DiffNode:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        if init == "glorot_uniform":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[1] if len(shape) > 1 else shape[0]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        node = DiffNode(value, requires_grad=True)
        self.params[name] = node
        self.adam_m[name] = np.zeros(shape)
        self.adam_v[name] = np.zeros(shape)
        return node

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for name in self.names():
            g = self.params[name].grad
            if g is not None:
                total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients by min(1, max_norm / ||g||).  Returns the factor."""
        norm = self.grad_global_norm()
        if norm == 0.0:
            return 1.0
        factor = min(1.0, max_norm / norm)
        if factor < 1.0:
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= factor
        return factor

    def adam_step(
        self,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        """Adam with decoupled weight decay; missing gradients count as zero."""
        self.step_count += 1
        b1, b2 = betas
        t = self.step_count
        for name in self.names():
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            m = self.adam_m[name]
            v = self.adam_v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            if weight_decay:
                p.value -= lr * weight_decay * p.value
            p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            if name not in self.params:
                raise CheckpointError(f"unknown parameter {name!r}")
            if self.params[name].value.shape != value.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: "
                    f"{self.params[name].value.shape} vs {value.shape}"
                )
            self.params[name].value = value.astype(np.float64).copy()


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` to 0 over ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# -- MLPs -------------------------------------------------------------------------


class Mlp:
    """Dense SiLU network: Linear layers of the given widths.

    SiLU follows every layer except (optionally) the last.  Weights are
    Glorot-uniform, biases zero.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_width: int,
        widths: Sequence[int],
        final_activation: bool = False,
    ):
        self.name = name
        self.final_activation = final_activation
        self.weights: list[DiffNode] = []
        self.biases: list[DiffNode] = []
        prev = in_width
        for i, width in enumerate(widths):
            self.weights.append(store.parameter(f"{name}/w{i}", (prev, width)))
            self.biases.append(store.parameter(f"{name}/b{i}", (width,), init="zeros"))
            prev = width

    def __call__(self, x: DiffNode) -> DiffNode:
        out = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = add(matmul(out, w), b)
            if i < last or self.final_activation:
                out = silu(out)
        return out


# -- gradient checking -------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_err: float
    num_coords: int
    worst_param: str
    tol: float

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, {self.num_coords} coords, worst {self.worst_param})"
        )


def finite_diff_check(
    fn: Callable[[], DiffNode],
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int = 8,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` must rebuild the graph from the store's parameters on every call and
    return a scalar.  Relative error uses a unit floor:
    ``|a - fd| / max(1, |a|, |fd|)``.
    """
    store.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in store.params.items()
    }

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ""
    count = 0
    for name in store.names():
        p = store.params[name]
        flat = p.value.reshape(-1)
        size = flat.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            up = float(fn().value)
            flat[c] = old - h
            down = float(fn().value)
            flat[c] = old
            fd = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[c])
            rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
            count += 1
            if rel > max_rel:
                max_rel = rel
                worst = name
    return GradCheckReport(max_rel <= tol, max_rel, count, worst, tol)


# -- checkpoints --------------------------------------------------------------------

_MAGIC = "etnn-checkpoint"


def save_checkpoint(
    store: ParamStore,
    path: str | os.PathLike,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Flat binary of named float64 tensors behind a one-line JSON header.

    Saves parameters, Adam moments, the step counter and any extra arrays
    (e.g. normaliser statistics).  Written atomically.
    """
    extras = extras or {}
    entries: list[tuple[str, np.ndarray]] = []
    for name in store.names():
        entries.append((f"param/{name}", store.params[name].value))
    for name in store.names():
        entries.append((f"adam_m/{name}", store.adam_m[name]))
        entries.append((f"adam_v/{name}", store.adam_v[name]))
    for name in sorted(extras):
        entries.append((f"extra/{name}", np.asarray(extras[name], dtype=np.float64)))
    header = {
        "format": _MAGIC,
        "version": 1,
        "step": store.step_count,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(
    store: ParamStore, path: str | os.PathLike
) -> dict[str, np.ndarray]:
    """Restore parameters, moments and step counter; returns the extras."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        if header.get("format") != _MAGIC:
            raise CheckpointError("not a checkpoint file")
        blob = fh.read()
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = blob[offset : offset + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointError("checkpoint truncated")
        tensors[meta["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n_bytes
    if offset != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")

    extras: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            store.load_values({rest: arr})
        elif kind in ("adam_m", "adam_v"):
            if rest not in store.params:
                raise CheckpointError(f"moment for unknown parameter {rest!r}")
            moments = store.adam_m if kind == "adam_m" else store.adam_v
            if moments[rest].shape != arr.shape:
                raise CheckpointError(f"moment shape mismatch for {rest!r}")
            moments[rest] = arr
        elif kind == "extra":
            extras[rest] = arr
        else:
            raise CheckpointError(f"unknown tensor kind {kind!r}")
    store.step_count = int(header.get("step", 0))
    return extras
