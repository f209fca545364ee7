"""Geometric invariants attached to neighborhood pairs.

Each component maps two position sets ``X`` (receiver members) and ``Y``
(sender members) to a scalar that is unchanged by rotations, reflections and
translations applied to both sets, and by permutations within each set:

- ``dist:<agg>``: ``agg`` over all pairwise Euclidean distances
  (sum, mean, max, min).
- ``centroid:<agg>``: distance between the per-set aggregates (mean, sum).
- ``hausdorff`` / ``hausdorff:xy`` / ``hausdorff:yx``: symmetric and directed
  Hausdorff distances.
- ``hull:<which>``: convex hull volume of X (``x``), of Y (``y``), or the
  absolute difference (``diff``).  Dimensions 2 and 3 only; degenerate point
  sets have volume 0.

A spec is an ordered component list with an optional ``+norm`` suffix that
turns on running standardisation of the resulting columns (see
:class:`RunningNormalizer`).

Every component also has a subgradient with respect to the positions so the
whole stack stays differentiable when positions are updated between layers.
Ties in max/min selections resolve to the first attaining index in row-major
order; kinks (coincident points, zero-volume hulls, equal volumes in
``hull:diff``) take subgradient zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "InvariantError",
    "UnsupportedDimension",
    "InvariantSpec",
    "parse_invariant_spec",
    "format_invariant_spec",
    "pairwise_distances",
    "dist_agg",
    "centroid_dist",
    "hausdorff",
    "hull_volume",
    "component_value",
    "entry_invariants",
    "RunningNormalizer",
]

DIST_AGGS = ("sum", "mean", "max", "min")
CENTROID_AGGS = ("mean", "sum")
HAUSDORFF_MODES = ("sym", "xy", "yx")
HULL_WHICH = ("x", "y", "diff")


class InvariantError(ValueError):
    """Bad invariant spec or inputs."""


class UnsupportedDimension(InvariantError):
    """Hull volumes exist here only for 2-D and 3-D positions."""


@dataclass(frozen=True)
class InvariantSpec:
    """Ordered components, e.g. ``(("dist","sum"), ("hausdorff","sym"))``."""

    components: tuple[tuple[str, str], ...]
    normalize: bool = False

    @property
    def arity(self) -> int:
        return len(self.components)

    @property
    def wants_hull(self) -> bool:
        return any(kind == "hull" for kind, _ in self.components)


def parse_invariant_spec(text: str) -> InvariantSpec:
    """Parse ``dist:sum,centroid:mean,hausdorff,hull:x`` with optional ``+norm``.

    An empty string means "no geometric features" (arity 0): message passing
    then degrades to plain feature-only messages.
    """
    body = text.strip()
    normalize = False
    if body.endswith("+norm"):
        normalize = True
        body = body[: -len("+norm")].rstrip(",").strip()
    components: list[tuple[str, str]] = []
    if body:
        for part in (p.strip() for p in body.split(",")):
            if not part:
                raise InvariantError(f"empty component in {text!r}")
            kind, _, arg = part.partition(":")
            if kind == "dist":
                arg = arg or "sum"
                if arg not in DIST_AGGS:
                    raise InvariantError(f"dist aggregator {arg!r} not in {DIST_AGGS}")
            elif kind == "centroid":
                arg = arg or "mean"
                if arg not in CENTROID_AGGS:
                    raise InvariantError(
                        f"centroid aggregator {arg!r} not in {CENTROID_AGGS}"
                    )
            elif kind == "hausdorff":
                arg = arg or "sym"
                if arg not in HAUSDORFF_MODES:
                    raise InvariantError(
                        f"hausdorff mode {arg!r} not in {HAUSDORFF_MODES}"
                    )
            elif kind == "hull":
                if arg not in HULL_WHICH:
                    raise InvariantError(f"hull side {arg!r} not in {HULL_WHICH}")
            else:
                raise InvariantError(f"unknown invariant component {part!r}")
            components.append((kind, arg))
    return InvariantSpec(tuple(components), normalize)


def format_invariant_spec(spec: InvariantSpec) -> str:
    parts = []
    for kind, arg in spec.components:
        if kind == "hausdorff" and arg == "sym":
            parts.append("hausdorff")
        else:
            parts.append(f"{kind}:{arg}")
    text = ",".join(parts)
    return text + "+norm" if spec.normalize else text


# -- scalar components --------------------------------------------------------


def pairwise_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def dist_agg(X: np.ndarray, Y: np.ndarray, agg: str = "sum") -> float:
    D = pairwise_distances(X, Y)
    if agg == "sum":
        return float(D.sum())
    if agg == "mean":
        return float(D.mean())
    if agg == "max":
        return float(D.max())
    if agg == "min":
        return float(D.min())
    raise InvariantError(f"unknown aggregator {agg!r}")


def centroid_dist(X: np.ndarray, Y: np.ndarray, agg: str = "mean") -> float:
    if agg == "mean":
        c = X.mean(axis=0) - Y.mean(axis=0)
    elif agg == "sum":
        c = X.sum(axis=0) - Y.sum(axis=0)
    else:
        raise InvariantError(f"unknown aggregator {agg!r}")
    return float(np.sqrt(np.sum(c * c)))


def hausdorff(X: np.ndarray, Y: np.ndarray, mode: str = "sym") -> float:
    D = pairwise_distances(X, Y)
    if mode == "xy":
        return float(D.min(axis=1).max())
    if mode == "yx":
        return float(D.min(axis=0).max())
    if mode == "sym":
        return float(max(D.min(axis=1).max(), D.min(axis=0).max()))
    raise InvariantError(f"unknown hausdorff mode {mode!r}")


# -- convex hulls --------------------------------------------------------------


def _hull_indices_2d(P: np.ndarray) -> list[int]:
    """Monotone chain; strict turns only, so collinear boundary points drop out.

    Returns indices into P in counter-clockwise order (empty if degenerate).
    """
    order = np.lexsort((P[:, 1], P[:, 0]))
    # collapse exactly coincident points, keeping the first occurrence
    uniq: list[int] = []
    seen = set()
    for i in order:
        key = (P[i, 0], P[i, 1])
        if key not in seen:
            seen.add(key)
            uniq.append(int(i))
    if len(uniq) < 3:
        return []

    def cross(o, a, b):
        return (P[a, 0] - P[o, 0]) * (P[b, 1] - P[o, 1]) - (
            P[a, 1] - P[o, 1]
        ) * (P[b, 0] - P[o, 0])

    lower: list[int] = []
    for i in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], i) <= 0:
            lower.pop()
        lower.append(i)
    upper: list[int] = []
    for i in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], i) <= 0:
            upper.pop()
        upper.append(i)
    hull = lower[:-1] + upper[:-1]
    return hull if len(hull) >= 3 else []


def _hull_area_2d_with_grad(P: np.ndarray) -> tuple[float, np.ndarray]:
    grad = np.zeros_like(P)
    hull = _hull_indices_2d(P)
    if not hull:
        return 0.0, grad
    xs = P[hull, 0]
    ys = P[hull, 1]
    area = 0.5 * float(
        np.dot(xs, np.roll(ys, -1)) - np.dot(np.roll(xs, -1), ys)
    )
    # CCW ordering makes the shoelace sum positive already
    for k, idx in enumerate(hull):
        nxt = hull[(k + 1) % len(hull)]
        prv = hull[k - 1]
        grad[idx, 0] = 0.5 * (P[nxt, 1] - P[prv, 1])
        grad[idx, 1] = 0.5 * (P[prv, 0] - P[nxt, 0])
    return abs(area), grad if area >= 0 else -grad


def _hull_volume_3d_with_grad(P: np.ndarray) -> tuple[float, np.ndarray]:
    """Supporting-plane enumeration: exact enough at small sizes, no libs.

    For every non-collinear triple, test whether all points lie on one side of
    its plane; each distinct supporting plane contributes a facet.  Facets are
    fan-triangulated with outward orientation and summed as signed tetrahedra
    from the origin (the surface is closed, so the sum is the volume).
    """
    grad = np.zeros_like(P)
    n = P.shape[0]
    if n < 4:
        return 0.0, grad
    scale = float(np.abs(P).max()) or 1.0
    tol = 1e-9 * scale * scale
    centroid = P.mean(axis=0)

    seen_faces: set[frozenset] = set()
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                normal = np.cross(P[j] - P[i], P[k] - P[i])
                norm = np.linalg.norm(normal)
                if norm <= tol:
                    continue
                normal = normal / norm
                offsets = (P - P[i]) @ normal
                if offsets.max() > tol and offsets.min() < -tol:
                    continue  # not a supporting plane
                face = frozenset(np.flatnonzero(np.abs(offsets) <= tol).tolist())
                if len(face) < 3 or face in seen_faces:
                    continue
                seen_faces.add(face)
                if float((P[i] - centroid) @ normal) < 0:
                    normal = -normal
                # order the coplanar points into a convex polygon
                face_idx = np.asarray(sorted(face))
                u = P[j] - P[i]
                u = u / np.linalg.norm(u)
                v = np.cross(normal, u)
                flat = np.stack(
                    [(P[face_idx] - P[i]) @ u, (P[face_idx] - P[i]) @ v], axis=1
                )
                ring_local = _hull_indices_2d(flat)
                if not ring_local:
                    continue
                ring = [int(face_idx[r]) for r in ring_local]
                # make the ring counter-clockwise when viewed from outside
                a0, a1, a2 = P[ring[0]], P[ring[1]], P[ring[2]]
                if float(np.cross(a1 - a0, a2 - a0) @ normal) < 0:
                    ring.reverse()
                for t in range(1, len(ring) - 1):
                    p0, p1, p2 = ring[0], ring[t], ring[t + 1]
                    a, b, c = P[p0], P[p1], P[p2]
                    total += float(np.dot(a, np.cross(b, c))) / 6.0
                    grad[p0] += np.cross(b, c) / 6.0
                    grad[p1] += np.cross(c, a) / 6.0
                    grad[p2] += np.cross(a, b) / 6.0
    if total < 0:  # orientation convention should prevent this, but stay safe
        total, grad = -total, -grad
    return total, grad


def hull_volume(P: np.ndarray) -> float:
    """Convex hull area (2-D) or volume (3-D).  Degenerate inputs give 0."""
    value, _ = hull_volume_with_grad(P)
    return value


def hull_volume_with_grad(P: np.ndarray) -> tuple[float, np.ndarray]:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise InvariantError(f"positions must be (m, dim), got {P.shape}")
    if P.shape[1] == 2:
        return _hull_area_2d_with_grad(P)
    if P.shape[1] == 3:
        return _hull_volume_3d_with_grad(P)
    raise UnsupportedDimension(
        f"hull volumes are defined for 2-D and 3-D, got {P.shape[1]}-D"
    )


# -- per-component value + gradient -------------------------------------------


def _unit(diff: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(diff)
    return diff / norm if norm > 0 else np.zeros_like(diff)


def component_value(X: np.ndarray, Y: np.ndarray, comp: tuple[str, str]) -> float:
    kind, arg = comp
    if kind == "dist":
        return dist_agg(X, Y, arg)
    if kind == "centroid":
        return centroid_dist(X, Y, arg)
    if kind == "hausdorff":
        return hausdorff(X, Y, arg)
    if kind == "hull":
        if arg == "x":
            return hull_volume(X)
        if arg == "y":
            return hull_volume(Y)
        return abs(hull_volume(X) - hull_volume(Y))
    raise InvariantError(f"unknown component {comp!r}")


def _component_value_grad(
    X: np.ndarray, Y: np.ndarray, comp: tuple[str, str]
) -> tuple[float, np.ndarray, np.ndarray]:
    kind, arg = comp
    gX = np.zeros_like(X)
    gY = np.zeros_like(Y)
    if kind == "dist":
        D = pairwise_distances(X, Y)
        if arg in ("sum", "mean"):
            w = 1.0 if arg == "sum" else 1.0 / D.size
            for i in range(X.shape[0]):
                for j in range(Y.shape[0]):
                    u = _unit(X[i] - Y[j]) * w
                    gX[i] += u
                    gY[j] -= u
            value = float(D.sum()) * w
        else:
            flat = np.argmax(D) if arg == "max" else np.argmin(D)
            i, j = np.unravel_index(flat, D.shape)
            u = _unit(X[i] - Y[j])
            gX[i] += u
            gY[j] -= u
            value = float(D[i, j])
        return value, gX, gY
    if kind == "centroid":
        if arg == "mean":
            c = X.mean(axis=0) - Y.mean(axis=0)
            wx, wy = 1.0 / X.shape[0], 1.0 / Y.shape[0]
        else:
            c = X.sum(axis=0) - Y.sum(axis=0)
            wx = wy = 1.0
        value = float(np.linalg.norm(c))
        u = _unit(c)
        gX[:] = u * wx
        gY[:] = -u * wy
        return value, gX, gY
    if kind == "hausdorff":
        D = pairwise_distances(X, Y)

        def directed(dmat, rows_are_x):
            mins = dmat.min(axis=1)
            i = int(np.argmax(mins))
            j = int(np.argmin(dmat[i]))
            return float(dmat[i, j]), (i, j) if rows_are_x else (j, i)

        if arg == "xy":
            value, (i, j) = directed(D, True)
        elif arg == "yx":
            value, (i, j) = directed(D.T, False)
        else:
            v_xy, sel_xy = directed(D, True)
            v_yx, sel_yx = directed(D.T, False)
            value, (i, j) = (v_xy, sel_xy) if v_xy >= v_yx else (v_yx, sel_yx)
        u = _unit(X[i] - Y[j])
        gX[i] += u
        gY[j] -= u
        return value, gX, gY
    if kind == "hull":
        if arg == "x":
            value, gX = hull_volume_with_grad(X)
            return value, gX, gY
        if arg == "y":
            value, gY = hull_volume_with_grad(Y)
            return value, gX, gY
        vx, gx = hull_volume_with_grad(X)
        vy, gy = hull_volume_with_grad(Y)
        sign = float(np.sign(vx - vy))
        return abs(vx - vy), sign * gx, -sign * gy
    raise InvariantError(f"unknown component {comp!r}")


# -- entry-level evaluation ----------------------------------------------------


def entry_invariants(
    positions: np.ndarray,
    members: Sequence[np.ndarray],
    pairs: np.ndarray,
    spec: InvariantSpec,
) -> np.ndarray:
    """Evaluate all components for each (receiver, sender) pair: (P, arity).

    ``members[cid]`` are the node indices of cell ``cid``.  A vectorised path
    handles entries whose receiver cells share one size and sender cells share
    another (the common case after a lift); anything else falls back to a
    per-pair loop.
    """
    P = pairs.shape[0]
    out = np.zeros((P, spec.arity))
    if P == 0 or spec.arity == 0:
        return out
    recv_sizes = {members[int(c)].size for c in pairs[:, 0]}
    send_sizes = {members[int(c)].size for c in pairs[:, 1]}
    if len(recv_sizes) == 1 and len(send_sizes) == 1 and not spec.wants_hull:
        ix = np.stack([members[int(c)] for c in pairs[:, 0]])
        iy = np.stack([members[int(c)] for c in pairs[:, 1]])
        X = positions[ix]  # (P, sx, n)
        Y = positions[iy]  # (P, sy, n)
        diff = X[:, :, None, :] - Y[:, None, :, :]
        D = np.sqrt(np.sum(diff * diff, axis=-1))  # (P, sx, sy)
        for col, (kind, arg) in enumerate(spec.components):
            if kind == "dist":
                if arg == "sum":
                    out[:, col] = D.sum(axis=(1, 2))
                elif arg == "mean":
                    out[:, col] = D.mean(axis=(1, 2))
                elif arg == "max":
                    out[:, col] = D.max(axis=(1, 2))
                else:
                    out[:, col] = D.min(axis=(1, 2))
            elif kind == "centroid":
                if arg == "mean":
                    c = X.mean(axis=1) - Y.mean(axis=1)
                else:
                    c = X.sum(axis=1) - Y.sum(axis=1)
                out[:, col] = np.sqrt(np.sum(c * c, axis=-1))
            elif kind == "hausdorff":
                d_xy = D.min(axis=2).max(axis=1)
                d_yx = D.min(axis=1).max(axis=1)
                if arg == "xy":
                    out[:, col] = d_xy
                elif arg == "yx":
                    out[:, col] = d_yx
                else:
                    out[:, col] = np.maximum(d_xy, d_yx)
        return out
    for p in range(P):
        X = positions[members[int(pairs[p, 0])]]
        Y = positions[members[int(pairs[p, 1])]]
        for col, comp in enumerate(spec.components):
            out[p, col] = component_value(X, Y, comp)
    return out


def entry_invariants_with_grad(
    positions: np.ndarray,
    members: Sequence[np.ndarray],
    pairs: np.ndarray,
    spec: InvariantSpec,
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Like :func:`entry_invariants`, also returning a pullback.

    The pullback maps an upstream (P, arity) gradient to a gradient on
    ``positions``.  Used when positions themselves carry gradients (layers
    after a position update).
    """
    P = pairs.shape[0]
    values = np.zeros((P, spec.arity))
    grads: list[list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]] = []
    for p in range(P):
        mx = members[int(pairs[p, 0])]
        my = members[int(pairs[p, 1])]
        X = positions[mx]
        Y = positions[my]
        row = []
        for col, comp in enumerate(spec.components):
            value, gX, gY = _component_value_grad(X, Y, comp)
            values[p, col] = value
            row.append((mx, gX, my, gY))
        grads.append(row)

    def pullback(upstream: np.ndarray) -> np.ndarray:
        out = np.zeros_like(positions)
        for p in range(P):
            for col in range(spec.arity):
                w = upstream[p, col]
                if w == 0.0:
                    continue
                mx, gX, my, gY = grads[p][col]
                np.add.at(out, mx, w * gX)
                np.add.at(out, my, w * gY)
        return out

    return values, pullback


# -- running standardisation ---------------------------------------------------


class RunningNormalizer:
    """Batch standardisation with running statistics and no learnable parameters.

    Statistics are kept per (receiver rank, component).  In training mode,
    columns are standardised by the current batch's mean and (biased) variance
    and the running statistics move by ``momentum`` toward the batch values; in
    eval mode the running statistics are used directly.  Fresh ranks start at
    mean 0, variance 1.
    """

    def __init__(self, arity: int, momentum: float = 0.1, eps: float = 1e-5):
        self.arity = arity
        self.momentum = momentum
        self.eps = eps
        self.mean: dict[int, np.ndarray] = {}
        self.var: dict[int, np.ndarray] = {}

    def _ensure(self, rank: int) -> None:
        if rank not in self.mean:
            self.mean[rank] = np.zeros(self.arity)
            self.var[rank] = np.ones(self.arity)

    def current(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        self._ensure(rank)
        return self.mean[rank].copy(), self.var[rank].copy()

    def update(self, rank: int, batch: np.ndarray) -> None:
        if batch.shape[0] == 0:
            return
        self._ensure(rank)
        m = self.momentum
        self.mean[rank] = (1 - m) * self.mean[rank] + m * batch.mean(axis=0)
        self.var[rank] = (1 - m) * self.var[rank] + m * batch.var(axis=0)

    def apply(self, rank: int, values: np.ndarray, training: bool) -> np.ndarray:
        if values.shape[0] == 0:
            return values
        if training:
            mean = values.mean(axis=0)
            var = values.var(axis=0)
            self.update(rank, values)
        else:
            mean, var = self.current(rank)
        return (values - mean) / np.sqrt(var + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for rank in sorted(self.mean):
            out[f"rank{rank}/mean"] = self.mean[rank].copy()
            out[f"rank{rank}/var"] = self.var[rank].copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.mean.clear()
        self.var.clear()
        for key, value in state.items():
            rank_text, _, which = key.partition("/")
            rank = int(rank_text.removeprefix("rank"))
            target = self.mean if which == "mean" else self.var
            target[rank] = np.asarray(value, dtype=np.float64).copy()
