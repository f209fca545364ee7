"""Neighborhood functions over a combinatorial complex.

Every neighborhood function is materialised as a directed pair list: an array
of ``(receiver, sender)`` cell ids meaning "sender is in the receiver's
neighborhood".  Supported kinds:

- ``inc_up`` / ``inc_down``: containment with a rank gap of ``hop`` (default 1).
  ``y`` is an up-incidence sender for ``x`` iff ``x`` is strictly contained in
  ``y`` and ``rank(y) = rank(x) + hop``; down is the mirror image.
- ``adj_up`` / ``adj_down``: same-rank cells sharing a strictly larger
  (resp. smaller) cell exactly one rank away.
- ``adj_max``: same-rank cells both strictly contained in some cell of maximal
  rank, whatever their own rank.
- ``spatial_adj`` / ``spatial_inc_up`` / ``spatial_inc_down``: same-rank or
  rank +/-1 pairs whose geometric footprints intersect.  Footprints are point
  sets, polylines or polygons; all sidedness tests run in exact rational
  arithmetic so adjacency never depends on a tolerance.  Footprints are closed
  sets: touching counts as intersecting.
- ``graph_adj``: plain graph adjacency between singletons, built from an edge
  list rather than from cells (for models that keep the original wiring
  without lifting edges into cells).

Pair lists are deduplicated, free of self-pairs, and sorted by
``(receiver, sender)``; entries are ordered by (spec position, receiver rank,
sender rank).  That ordering is part of the contract: downstream message
passing and its parameter naming rely on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from etnn.complexes import CombinatorialComplex

__all__ = [
    "NeighborhoodError",
    "UnknownSpec",
    "UnsupportedGeometry",
    "DegenerateFootprint",
    "MissingFootprint",
    "NeighborhoodSpec",
    "NeighborhoodEntry",
    "NeighborhoodCollection",
    "parse_neighborhood_spec",
    "format_neighborhood_spec",
    "parse_neighborhood_list",
    "incidence_pairs",
    "adjacency_pairs",
    "max_adjacency_pairs",
    "spatial_pairs",
    "graph_adjacency_entry",
    "schema_blocks",
    "entry_key",
    "assemble",
    "Footprint",
    "point_footprints",
    "footprints_intersect",
]

INCIDENCE_KINDS = ("inc_up", "inc_down")
ADJACENCY_KINDS = ("adj_up", "adj_down", "adj_max")
SPATIAL_KINDS = ("spatial_adj", "spatial_inc_up", "spatial_inc_down")
ALL_KINDS = INCIDENCE_KINDS + ADJACENCY_KINDS + SPATIAL_KINDS + ("graph_adj",)


class NeighborhoodError(ValueError):
    """Base class for neighborhood construction failures."""


class UnknownSpec(NeighborhoodError):
    """A spec string does not match the grammar."""


class UnsupportedGeometry(NeighborhoodError):
    """A footprint kind is not available in this spatial dimension."""


class DegenerateFootprint(NeighborhoodError):
    """A footprint has too few coordinates to denote its kind."""


class MissingFootprint(NeighborhoodError):
    """A spatial spec was requested without a footprint for some cell."""


@dataclass(frozen=True)
class NeighborhoodSpec:
    """One neighborhood function: kind, hop (incidences only), receiver-rank filter.

    ``rank_filter`` of ``None`` means "all receiver ranks".
    """

    kind: str
    hop: int = 1
    rank_filter: int | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise UnknownSpec(f"unknown neighborhood kind {self.kind!r}")
        if self.hop < 1:
            raise UnknownSpec(f"hop must be >= 1, got {self.hop}")
        if self.hop != 1 and self.kind not in INCIDENCE_KINDS:
            raise UnknownSpec(f"{self.kind} does not take a hop")


def parse_neighborhood_spec(text: str) -> NeighborhoodSpec:
    """Parse ``kind[:hop][@rank=<k|all>]``, e.g. ``inc_up:2@rank=0``."""
    body = text.strip()
    rank_filter: int | None = None
    if "@" in body:
        body, _, suffix = body.partition("@")
        if not suffix.startswith("rank="):
            raise UnknownSpec(f"bad suffix in {text!r}; expected @rank=<k|all>")
        value = suffix[len("rank=") :]
        if value != "all":
            try:
                rank_filter = int(value)
            except ValueError:
                raise UnknownSpec(f"bad rank filter in {text!r}") from None
            if rank_filter < 0:
                raise UnknownSpec(f"rank filter must be >= 0 in {text!r}")
    hop = 1
    if ":" in body:
        body, _, hop_text = body.partition(":")
        try:
            hop = int(hop_text)
        except ValueError:
            raise UnknownSpec(f"bad hop in {text!r}") from None
    if body == "graph_adj":
        # graph_adj needs an edge list, which the grammar cannot carry.
        raise UnknownSpec("graph_adj is built programmatically, not parsed")
    return NeighborhoodSpec(kind=body, hop=hop, rank_filter=rank_filter)


def format_neighborhood_spec(spec: NeighborhoodSpec) -> str:
    text = spec.kind
    if spec.kind in INCIDENCE_KINDS and spec.hop != 1:
        text += f":{spec.hop}"
    if spec.rank_filter is not None:
        text += f"@rank={spec.rank_filter}"
    return text


def parse_neighborhood_list(text: str | Sequence[str]) -> tuple[NeighborhoodSpec, ...]:
    """Parse a comma-separated spec list (or a sequence of spec strings)."""
    if isinstance(text, str):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
    else:
        parts = list(text)
    if not parts:
        raise UnknownSpec("empty neighborhood list")
    return tuple(parse_neighborhood_spec(p) for p in parts)


@dataclass(frozen=True)
class NeighborhoodEntry:
    """Materialised pairs of one spec for one (receiver rank, sender rank) block."""

    spec: NeighborhoodSpec
    receiver_rank: int
    sender_rank: int
    pairs: np.ndarray  # (P, 2) int64, [receiver, sender], sorted, deduplicated

    @property
    def key(self) -> str:
        """Stable identifier; message parameters are named after it."""
        return (
            f"{format_neighborhood_spec(self.spec)}"
            f"|r{self.receiver_rank}<-r{self.sender_rank}"
        )

    @property
    def num_pairs(self) -> int:
        return int(self.pairs.shape[0])

    def __repr__(self) -> str:
        return f"NeighborhoodEntry({self.key}, pairs={self.num_pairs})"


@dataclass(frozen=True)
class NeighborhoodCollection:
    """An ordered tuple of entries, one per (spec, rank block)."""

    entries: tuple[NeighborhoodEntry, ...]

    @property
    def total_pairs(self) -> int:
        return sum(e.num_pairs for e in self.entries)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(e.key for e in self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def _finalize_pairs(pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    uniq = sorted(set(pairs))
    if not uniq:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(uniq, dtype=np.int64)


def _node_index(cc: CombinatorialComplex, rank: int) -> dict[int, list[int]]:
    index: dict[int, list[int]] = {}
    for cid in cc.cells_of_rank(rank):
        for v in cc.cells[cid].nodes:
            index.setdefault(int(v), []).append(int(cid))
    return index


def _receiver_ranks(cc: CombinatorialComplex, rank_filter: int | None) -> list[int]:
    if rank_filter is None:
        return list(cc.ranks())
    return [rank_filter] if rank_filter in cc.ranks() else []


def incidence_pairs(
    cc: CombinatorialComplex,
    direction: str,
    hop: int = 1,
    rank_filter: int | None = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Strict-containment pairs with a rank gap of ``hop``.

    Returns ``(receiver_rank, sender_rank, pairs)`` triples for every receiver
    rank where the sender rank exists in the complex.
    """
    if direction not in ("up", "down"):
        raise NeighborhoodError(f"direction must be 'up' or 'down', got {direction!r}")
    out = []
    sets = [frozenset(c.nodes) for c in cc.cells]
    for r in _receiver_ranks(cc, rank_filter):
        s = r + hop if direction == "up" else r - hop
        if s not in cc.ranks():
            continue
        sender_index = _node_index(cc, s)
        pairs: list[tuple[int, int]] = []
        for x in cc.cells_of_rank(r):
            x = int(x)
            x_nodes = cc.cells[x].nodes
            if direction == "up":
                # x < y: every superset of x contains x's first node.
                candidates = sender_index.get(x_nodes[0], ())
                pairs.extend(
                    (x, y) for y in candidates if sets[x] < sets[y]
                )
            else:
                # y < x: collect senders touching any node of x, test containment.
                candidates = set()
                for v in x_nodes:
                    candidates.update(sender_index.get(int(v), ()))
                pairs.extend(
                    (x, y) for y in sorted(candidates) if sets[y] < sets[x]
                )
        out.append((r, s, _finalize_pairs(pairs)))
    return out


def adjacency_pairs(
    cc: CombinatorialComplex,
    direction: str,
    rank_filter: int | None = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Same-rank pairs sharing a witness cell one rank up (or down).

    ``x`` and ``y`` of rank ``r`` are up-adjacent iff some cell ``z`` of rank
    ``r + 1`` strictly contains both; down-adjacency mirrors this with a shared
    strictly-contained cell of rank ``r - 1``.
    """
    if direction not in ("up", "down"):
        raise NeighborhoodError(f"direction must be 'up' or 'down', got {direction!r}")
    out = []
    sets = [frozenset(c.nodes) for c in cc.cells]
    for r in _receiver_ranks(cc, rank_filter):
        w = r + 1 if direction == "up" else r - 1
        if w not in cc.ranks():
            continue
        pairs: list[tuple[int, int]] = []
        if direction == "up":
            member_index = _node_index(cc, r)
            for z in cc.cells_of_rank(w):
                z = int(z)
                inside = set()
                for v in cc.cells[z].nodes:
                    inside.update(member_index.get(int(v), ()))
                group = sorted(x for x in inside if sets[x] < sets[z])
                pairs.extend((a, b) for a in group for b in group if a != b)
        else:
            super_index = _node_index(cc, r)
            for z in cc.cells_of_rank(w):
                z = int(z)
                candidates = super_index.get(cc.cells[z].nodes[0], ())
                group = sorted(x for x in candidates if sets[z] < sets[x])
                pairs.extend((a, b) for a in group for b in group if a != b)
        out.append((r, r, _finalize_pairs(pairs)))
    return out


def max_adjacency_pairs(
    cc: CombinatorialComplex,
    rank_filter: int | None = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Same-rank pairs both strictly contained in a maximal-rank cell."""
    top = cc.dimension()
    sets = [frozenset(c.nodes) for c in cc.cells]
    grouped: dict[int, list[tuple[int, int]]] = {}
    wanted = set(_receiver_ranks(cc, rank_filter))
    for z in cc.cells_of_rank(top):
        z = int(z)
        inside: dict[int, list[int]] = {}
        for x, x_set in enumerate(sets):
            if x != z and x_set < sets[z]:
                r = cc.cells[x].rank
                if r in wanted:
                    inside.setdefault(r, []).append(x)
        for r, group in inside.items():
            grouped.setdefault(r, []).extend(
                (a, b) for a in group for b in group if a != b
            )
    return [(r, r, _finalize_pairs(grouped[r])) for r in sorted(grouped)]


def graph_adjacency_entry(
    num_nodes: int,
    edges: Iterable[tuple[int, int]],
    rank: int = 0,
) -> NeighborhoodEntry:
    """Adjacency between singleton cells taken from a graph's edge list.

    Relies on the canonical cell ordering (singleton id == node id).
    """
    pairs = []
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            continue
        if not (0 <= a < num_nodes and 0 <= b < num_nodes):
            raise NeighborhoodError(f"edge ({a}, {b}) outside [0, {num_nodes})")
        pairs.append((a, b))
        pairs.append((b, a))
    return NeighborhoodEntry(
        spec=NeighborhoodSpec(kind="graph_adj"),
        receiver_rank=rank,
        sender_rank=rank,
        pairs=_finalize_pairs(pairs),
    )


# -- spatial footprints -------------------------------------------------------


@dataclass(frozen=True)
class Footprint:
    """Geometric extent of a cell: ``points``, ``polyline`` or ``polygon``.

    ``coords`` is an (m, n) array.  Polylines connect consecutive rows;
    polygons are simple rings (closure row implicit).  Polylines and polygons
    require n == 2; point sets work in any dimension.
    """

    kind: str
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2:
            raise DegenerateFootprint(f"coords must be 2-D, got shape {coords.shape}")
        object.__setattr__(self, "coords", coords)
        if self.kind not in ("points", "polyline", "polygon"):
            raise UnsupportedGeometry(f"unknown footprint kind {self.kind!r}")
        minimum = {"points": 1, "polyline": 2, "polygon": 3}[self.kind]
        if coords.shape[0] < minimum:
            raise DegenerateFootprint(
                f"{self.kind} footprint needs >= {minimum} coordinates, "
                f"got {coords.shape[0]}"
            )
        if self.kind in ("polyline", "polygon") and coords.shape[1] != 2:
            raise UnsupportedGeometry(
                f"{self.kind} footprints are only supported in 2 dimensions"
            )


def point_footprints(cc: CombinatorialComplex) -> dict[int, Footprint]:
    """Default representation: each cell's footprint is its member positions."""
    return {
        i: Footprint("points", cc.positions[cc.members(i)])
        for i in range(cc.num_cells)
    }


def _frac(row: np.ndarray) -> tuple[Fraction, Fraction]:
    # Fraction(float) is exact, so all sign tests below are exact.
    return (Fraction(float(row[0])), Fraction(float(row[1])))


def _orient(a, b, c) -> int:
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (cross > 0) - (cross < 0)


def _within(lo, hi, v) -> bool:
    return min(lo, hi) <= v <= max(lo, hi)


def _on_segment(p, a, b) -> bool:
    return (
        _orient(a, b, p) == 0
        and _within(a[0], b[0], p[0])
        and _within(a[1], b[1], p[1])
    )


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    # Collinear / endpoint-touching cases; closed segments, so touching counts.
    if d1 == 0 and _within(q1[0], q2[0], p1[0]) and _within(q1[1], q2[1], p1[1]):
        return True
    if d2 == 0 and _within(q1[0], q2[0], p2[0]) and _within(q1[1], q2[1], p2[1]):
        return True
    if d3 == 0 and _within(p1[0], p2[0], q1[0]) and _within(p1[1], p2[1], q1[1]):
        return True
    if d4 == 0 and _within(p1[0], p2[0], q2[0]) and _within(p1[1], p2[1], q2[1]):
        return True
    return False


def _point_in_polygon(p, ring) -> bool:
    m = len(ring)
    for i in range(m):
        if _on_segment(p, ring[i], ring[(i + 1) % m]):
            return True
    inside = False
    for i in range(m):
        a, b = ring[i], ring[(i + 1) % m]
        # Half-open rule on y avoids double-counting vertex crossings.
        if (a[1] > p[1]) != (b[1] > p[1]):
            x_int = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < x_int:
                inside = not inside
    return inside


def _segments_of(fp: Footprint) -> list[tuple]:
    rows = [_frac(r) for r in fp.coords]
    if fp.kind == "polyline":
        return [(rows[i], rows[i + 1]) for i in range(len(rows) - 1)]
    return [(rows[i], rows[(i + 1) % len(rows)]) for i in range(len(rows))]


def footprints_intersect(a: Footprint, b: Footprint) -> bool:
    """Closed-set intersection test in exact rational arithmetic."""
    if a.kind != "points" or b.kind != "points":
        if a.coords.shape[1] != b.coords.shape[1]:
            raise UnsupportedGeometry(
                "footprints live in different dimensions "
                f"({a.coords.shape[1]} vs {b.coords.shape[1]})"
            )
    if a.kind == "points" and b.kind == "points":
        if a.coords.shape[1] != b.coords.shape[1]:
            raise UnsupportedGeometry(
                "point footprints live in different dimensions"
            )
        seen = {tuple(Fraction(float(v)) for v in row) for row in a.coords}
        return any(
            tuple(Fraction(float(v)) for v in row) in seen for row in b.coords
        )

    # Everything below is planar.
    if "points" in (a.kind, b.kind):
        pts, other = (a, b) if a.kind == "points" else (b, a)
        rows = [_frac(r) for r in pts.coords]
        if other.kind == "polyline":
            segs = _segments_of(other)
            return any(_on_segment(p, s0, s1) for p in rows for s0, s1 in segs)
        ring = [_frac(r) for r in other.coords]
        return any(_point_in_polygon(p, ring) for p in rows)

    segs_a = _segments_of(a)
    segs_b = _segments_of(b)
    if any(
        _segments_intersect(p1, p2, q1, q2)
        for p1, p2 in segs_a
        for q1, q2 in segs_b
    ):
        return True
    # No boundary crossing: one shape may still sit entirely inside a polygon.
    if a.kind == "polygon":
        ring_a = [_frac(r) for r in a.coords]
        if _point_in_polygon(_frac(b.coords[0]), ring_a):
            return True
    if b.kind == "polygon":
        ring_b = [_frac(r) for r in b.coords]
        if _point_in_polygon(_frac(a.coords[0]), ring_b):
            return True
    return False


def spatial_pairs(
    cc: CombinatorialComplex,
    kind: str,
    footprints: Mapping[int, Footprint],
    rank_filter: int | None = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Footprint-intersection pairs: same rank (``spatial_adj``) or rank +/-1."""
    if kind not in SPATIAL_KINDS:
        raise NeighborhoodError(f"not a spatial kind: {kind!r}")

    def fp(cid: int) -> Footprint:
        try:
            return footprints[cid]
        except KeyError:
            raise MissingFootprint(f"no footprint for cell {cid}") from None

    out = []
    for r in _receiver_ranks(cc, rank_filter):
        if kind == "spatial_adj":
            s = r
        elif kind == "spatial_inc_up":
            s = r + 1
        else:
            s = r - 1
        if s not in cc.ranks():
            continue
        receivers = [int(x) for x in cc.cells_of_rank(r)]
        senders = [int(y) for y in cc.cells_of_rank(s)]
        pairs = [
            (x, y)
            for x in receivers
            for y in senders
            if x != y and footprints_intersect(fp(x), fp(y))
        ]
        out.append((r, s, _finalize_pairs(pairs)))
    return out


# -- assembly -----------------------------------------------------------------


def schema_blocks(
    spec: NeighborhoodSpec, ranks: Sequence[int]
) -> tuple[tuple[int, int], ...]:
    """All (receiver rank, sender rank) blocks a spec can produce over ``ranks``.

    This is the structural superset used to allocate per-block parameters: for
    any complex whose ranks are a subset of ``ranks``, the blocks emitted by
    :func:`assemble` for ``spec`` are contained in this list.  (``adj_max``
    blocks depend on which ranks have contained cells, so its list here covers
    every candidate rank.)
    """
    rank_set = set(int(r) for r in ranks)
    if spec.kind == "graph_adj":
        # programmatic entries live at the singleton rank unless filtered
        r = 0 if spec.rank_filter is None else spec.rank_filter
        return ((r, r),) if r in rank_set else ()
    if spec.rank_filter is None:
        receivers = sorted(rank_set)
    else:
        receivers = [spec.rank_filter] if spec.rank_filter in rank_set else []
    out: list[tuple[int, int]] = []
    for r in receivers:
        if spec.kind == "inc_up":
            if r + spec.hop in rank_set:
                out.append((r, r + spec.hop))
        elif spec.kind == "inc_down":
            if r - spec.hop in rank_set:
                out.append((r, r - spec.hop))
        elif spec.kind == "adj_up":
            if r + 1 in rank_set:
                out.append((r, r))
        elif spec.kind == "adj_down":
            if r - 1 in rank_set:
                out.append((r, r))
        elif spec.kind in ("adj_max", "spatial_adj"):
            out.append((r, r))
        elif spec.kind == "spatial_inc_up":
            if r + 1 in rank_set:
                out.append((r, r + 1))
        elif spec.kind == "spatial_inc_down":
            if r - 1 in rank_set:
                out.append((r, r - 1))
        else:
            raise UnknownSpec(f"unknown kind {spec.kind!r}")
    return tuple(out)


def entry_key(spec: NeighborhoodSpec, receiver_rank: int, sender_rank: int) -> str:
    """The key :class:`NeighborhoodEntry` would carry for this block."""
    return f"{format_neighborhood_spec(spec)}|r{receiver_rank}<-r{sender_rank}"


def assemble(
    cc: CombinatorialComplex,
    specs: Sequence[NeighborhoodSpec] | Sequence[str] | str,
    footprints: Mapping[int, Footprint] | None = None,
) -> NeighborhoodCollection:
    """Materialise a spec list against a complex, in spec order.

    Spatial specs need ``footprints``; pass :func:`point_footprints` output for
    the default member-position representation.  An entry is emitted for every
    (receiver rank, sender rank) block whose ranks exist, even when it has no
    pairs, so the block layout depends only on the ranks present.
    """
    if isinstance(specs, str) or (specs and isinstance(specs[0], str)):
        spec_tuple = parse_neighborhood_list(specs)  # type: ignore[arg-type]
    else:
        spec_tuple = tuple(specs)  # type: ignore[arg-type]
    if not spec_tuple:
        raise UnknownSpec("empty neighborhood list")

    entries: list[NeighborhoodEntry] = []
    for spec in spec_tuple:
        if spec.kind in INCIDENCE_KINDS:
            blocks = incidence_pairs(
                cc,
                "up" if spec.kind == "inc_up" else "down",
                hop=spec.hop,
                rank_filter=spec.rank_filter,
            )
        elif spec.kind in ("adj_up", "adj_down"):
            blocks = adjacency_pairs(
                cc,
                "up" if spec.kind == "adj_up" else "down",
                rank_filter=spec.rank_filter,
            )
        elif spec.kind == "adj_max":
            blocks = max_adjacency_pairs(cc, rank_filter=spec.rank_filter)
        elif spec.kind in SPATIAL_KINDS:
            if footprints is None:
                raise MissingFootprint(
                    f"{spec.kind} requires footprints; none were supplied"
                )
            blocks = spatial_pairs(cc, spec.kind, footprints, spec.rank_filter)
        else:
            raise UnknownSpec(
                f"{spec.kind} cannot be assembled from a complex alone"
            )
        entries.extend(
            NeighborhoodEntry(spec, r, s, pairs)
            for r, s, pairs in sorted(blocks, key=lambda b: (b[0], b[1]))
        )
    return NeighborhoodCollection(tuple(entries))
