"""Combinatorial complexes: node subsets with ranks, features and positions.

A combinatorial complex here is a finite node set ``{0..num_nodes-1}`` together
with a collection of cells.  Each cell is a non-empty node subset carrying an
integer rank, a feature vector and provenance tags.  Two axioms are enforced:

1. every singleton ``{s}`` is a cell of rank 0 (missing ones are auto-inserted),
2. rank is order-preserving under strict containment: ``x < y`` implies
   ``rank(x) <= rank(y)``.

Cell identity is the node set itself; a node set may appear at most once and
therefore carries exactly one rank.  Within a complex, cell ids are stable:
singletons occupy ids ``0..num_nodes-1`` (id equals the node), every other cell
follows in insertion order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Cell",
    "CombinatorialComplex",
    "ComplexError",
    "DuplicateCell",
    "RankViolation",
    "DimensionMismatch",
    "OutOfRangeNode",
    "InvalidPermutation",
    "EmptyCell",
    "SchemaError",
    "TAG_ORDER",
    "tag_sort_key",
    "build_complex",
    "relabel",
    "complex_to_json",
    "complex_from_json",
    "save_complex",
    "load_complex",
]


class ComplexError(ValueError):
    """Base class for complex construction and validation failures."""


class DuplicateCell(ComplexError):
    """Two cells share the same node set."""


class RankViolation(ComplexError):
    """Ranks are not order-preserving under containment, or a singleton rank is not 0."""


class DimensionMismatch(ComplexError):
    """Positions / velocities / features have inconsistent shapes."""


class OutOfRangeNode(ComplexError):
    """A cell references a node id outside ``[0, num_nodes)``."""


class InvalidPermutation(ComplexError):
    """A relabeling is not a bijection on the node set."""


class EmptyCell(ComplexError):
    """A cell has no nodes."""


class SchemaError(ComplexError):
    """A serialized complex does not match the interchange schema."""


# Canonical ordering for provenance tags.  When two sources annotate the same
# node set at the same rank (e.g. a bond that is also a two-atom functional
# group) the merged cell lists its tags and concatenates its features in this
# order.  Unknown tags sort after the known ones, alphabetically.
TAG_ORDER = (
    "node",
    "atom",
    "edge",
    "bond",
    "hyperedge",
    "clique",
    "path",
    "ring",
    "functional_group",
    "virtual",
)

_TAG_INDEX = {t: i for i, t in enumerate(TAG_ORDER)}


def tag_sort_key(tag: str) -> tuple[int, str]:
    return (_TAG_INDEX.get(tag, len(TAG_ORDER)), tag)


_EMPTY_FEATURES = np.zeros(0, dtype=np.float64)
_EMPTY_FEATURES.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Cell:
    """A ranked node subset.

    ``nodes`` is strictly increasing, ``features`` is a read-only 1-D float64
    array (possibly empty), ``tags`` records which lifters produced the cell.
    """

    nodes: tuple[int, ...]
    rank: int
    features: np.ndarray = field(default_factory=lambda: _EMPTY_FEATURES)
    tags: tuple[str, ...] = ()

    def __repr__(self) -> str:  # keep test failures readable
        return f"Cell(nodes={self.nodes}, rank={self.rank}, tags={self.tags})"


def make_cell(
    nodes: Iterable[int],
    rank: int,
    features: Sequence[float] | np.ndarray | None = None,
    tags: Iterable[str] = (),
) -> Cell:
    """Normalize raw cell data: sorted unique nodes, float64 features."""
    node_tuple = tuple(sorted(set(int(v) for v in nodes)))
    if not node_tuple:
        raise EmptyCell("cell has no nodes")
    if features is None:
        feats = _EMPTY_FEATURES
    else:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 1:
            raise DimensionMismatch(
                f"cell features must be 1-D, got shape {feats.shape}"
            )
        feats = feats.copy()
        feats.setflags(write=False)
    return Cell(node_tuple, int(rank), feats, tuple(tags))


class CombinatorialComplex:
    """Immutable complex: positions, optional velocities, and ranked cells.

    Construct through :func:`build_complex`; the constructor itself assumes
    already-validated input.
    """

    __slots__ = (
        "positions",
        "velocities",
        "cells",
        "target_level",
        "target_values",
        "_cell_index",
        "_by_rank",
        "_members",
    )

    def __init__(
        self,
        positions: np.ndarray,
        velocities: np.ndarray | None,
        cells: tuple[Cell, ...],
        target_level: str | None = None,
        target_values: np.ndarray | None = None,
    ):
        self.positions = positions
        self.velocities = velocities
        self.cells = cells
        self.target_level = target_level
        self.target_values = target_values
        self._cell_index = {c.nodes: i for i, c in enumerate(cells)}
        by_rank: dict[int, list[int]] = {}
        for i, c in enumerate(cells):
            by_rank.setdefault(c.rank, []).append(i)
        self._by_rank = {
            r: np.asarray(ids, dtype=np.int64) for r, ids in by_rank.items()
        }
        self._members = tuple(np.asarray(c.nodes, dtype=np.int64) for c in cells)

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def spatial_dim(self) -> int:
        return self.positions.shape[1]

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    def dimension(self) -> int:
        """Largest rank present (0 for a bare node set)."""
        return max(self._by_rank)

    def ranks(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_rank))

    def cells_of_rank(self, rank: int) -> np.ndarray:
        """Cell ids of the given rank, in insertion order.  Empty if absent."""
        return self._by_rank.get(rank, np.zeros(0, dtype=np.int64))

    def cell_id(self, nodes: Iterable[int]) -> int:
        key = tuple(sorted(set(int(v) for v in nodes)))
        try:
            return self._cell_index[key]
        except KeyError:
            raise KeyError(f"no cell with node set {key}") from None

    def has_cell(self, nodes: Iterable[int]) -> bool:
        return tuple(sorted(set(int(v) for v in nodes))) in self._cell_index

    def members(self, cell_id: int) -> np.ndarray:
        """Member node ids of a cell as an int64 array."""
        return self._members[cell_id]

    def __repr__(self) -> str:
        counts = ", ".join(f"{r}: {len(self._by_rank[r])}" for r in self.ranks())
        return (
            f"CombinatorialComplex(nodes={self.num_nodes}, dim={self.dimension()}, "
            f"cells_by_rank={{{counts}}})"
        )


def _validate_rank_order(cells: Sequence[Cell]) -> None:
    # O(|X|^2) pairwise subset scan; fine at desk scale, skippable for bulk builds.
    sets = [frozenset(c.nodes) for c in cells]
    for i, si in enumerate(sets):
        ri = cells[i].rank
        for j, sj in enumerate(sets):
            if i == j:
                continue
            if si < sj and ri > cells[j].rank:
                raise RankViolation(
                    f"cell {cells[i].nodes} (rank {ri}) is contained in "
                    f"{cells[j].nodes} (rank {cells[j].rank})"
                )


def build_complex(
    positions: Sequence[Sequence[float]] | np.ndarray,
    cells: Iterable[Cell | tuple],
    velocities: Sequence[Sequence[float]] | np.ndarray | None = None,
    target_level: str | None = None,
    target_values: Sequence[float] | np.ndarray | None = None,
    check_rank_order: bool = True,
) -> CombinatorialComplex:
    """Validate and assemble a combinatorial complex.

    ``cells`` may mix :class:`Cell` records and ``(nodes, rank)`` /
    ``(nodes, rank, features)`` / ``(nodes, rank, features, tags)`` tuples.
    Missing singletons are inserted with empty features and the tag ``node``.
    Singletons end up at ids ``0..num_nodes-1`` (id equals node id); all other
    cells keep their input order after the singleton block.

    ``check_rank_order=False`` skips the quadratic containment/rank scan.  Only
    use it when the cells come from a construction that guarantees the axiom
    (lifts do); a complex built unchecked from bad data will misbehave later.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] < 1:
        raise DimensionMismatch(f"positions must be (num_nodes, dim), got {pos.shape}")
    num_nodes = pos.shape[0]
    if num_nodes == 0:
        raise ComplexError("a complex needs at least one node")
    pos = pos.copy()
    pos.setflags(write=False)

    vel = None
    if velocities is not None:
        vel = np.asarray(velocities, dtype=np.float64)
        if vel.shape != pos.shape:
            raise DimensionMismatch(
                f"velocities shape {vel.shape} != positions shape {pos.shape}"
            )
        vel = vel.copy()
        vel.setflags(write=False)

    normalized: list[Cell] = []
    for raw in cells:
        if isinstance(raw, Cell):
            c = make_cell(raw.nodes, raw.rank, raw.features, raw.tags)
        else:
            c = make_cell(*raw)
        normalized.append(c)

    singleton_slots: list[Cell | None] = [None] * num_nodes
    higher: list[Cell] = []
    seen: dict[tuple[int, ...], Cell] = {}
    for c in normalized:
        if c.nodes[-1] >= num_nodes or c.nodes[0] < 0:
            raise OutOfRangeNode(
                f"cell {c.nodes} references nodes outside [0, {num_nodes})"
            )
        if c.nodes in seen:
            raise DuplicateCell(f"node set {c.nodes} appears more than once")
        seen[c.nodes] = c
        if len(c.nodes) == 1:
            if c.rank != 0:
                raise RankViolation(f"singleton {c.nodes} must have rank 0, got {c.rank}")
            singleton_slots[c.nodes[0]] = c
        else:
            if c.rank < 1:
                raise RankViolation(
                    f"cell {c.nodes} has {len(c.nodes)} nodes but rank {c.rank}; "
                    "rank 0 is reserved for singletons"
                )
            higher.append(c)

    for node in range(num_nodes):
        if singleton_slots[node] is None:
            singleton_slots[node] = Cell((node,), 0, _EMPTY_FEATURES, ("node",))

    ordered = tuple(singleton_slots) + tuple(higher)  # type: ignore[arg-type]
    if check_rank_order:
        _validate_rank_order(higher)  # singletons cannot violate the axiom

    tvals = None
    if target_values is not None:
        tvals = np.atleast_1d(np.asarray(target_values, dtype=np.float64)).copy()
        tvals.setflags(write=False)
        if target_level is None:
            target_level = "complex"
    if target_level is not None and target_level not in ("complex", "node"):
        raise SchemaError(f"target level must be 'complex' or 'node', got {target_level!r}")
    if target_level == "node" and tvals is not None and tvals.shape[0] != num_nodes:
        raise DimensionMismatch(
            f"node-level target has {tvals.shape[0]} values for {num_nodes} nodes"
        )

    return CombinatorialComplex(pos, vel, ordered, target_level, tvals)


def relabel(cc: CombinatorialComplex, perm: Sequence[int]) -> CombinatorialComplex:
    """Apply a node permutation: node ``i`` becomes ``perm[i]``.

    Positions, velocities and node-level targets move with their nodes; cell
    node sets are rewritten and re-sorted; ranks, features and tags are
    untouched.  The canonical cell ordering is re-established, so singleton
    ``{perm[i]}`` sits at id ``perm[i]``.
    """
    p = np.asarray(perm, dtype=np.int64)
    n = cc.num_nodes
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise InvalidPermutation(f"perm must be a bijection on 0..{n - 1}")

    new_pos = np.empty_like(cc.positions)
    new_pos[p] = cc.positions
    new_vel = None
    if cc.velocities is not None:
        new_vel = np.empty_like(cc.velocities)
        new_vel[p] = cc.velocities
    new_targets = cc.target_values
    if cc.target_level == "node" and cc.target_values is not None:
        new_targets = np.empty_like(cc.target_values)
        new_targets[p] = cc.target_values

    new_cells = [
        Cell(tuple(sorted(int(p[v]) for v in c.nodes)), c.rank, c.features, c.tags)
        for c in cc.cells
    ]
    # Validity is permutation-invariant; skip the quadratic re-check.
    return build_complex(
        new_pos,
        new_cells,
        velocities=new_vel,
        target_level=cc.target_level,
        target_values=new_targets,
        check_rank_order=False,
    )


# -- JSON interchange ---------------------------------------------------------

_TOP_KEYS = {"spatial_dim", "num_nodes", "positions", "velocities", "cells", "target"}
_CELL_KEYS = {"nodes", "rank", "features", "tags"}
_TARGET_KEYS = {"level", "values"}


def complex_to_json(cc: CombinatorialComplex) -> str:
    """Serialize to the interchange schema.  Deterministic output."""
    doc: dict = {
        "spatial_dim": cc.spatial_dim,
        "num_nodes": cc.num_nodes,
        "positions": cc.positions.tolist(),
        "cells": [
            {
                "nodes": list(c.nodes),
                "rank": c.rank,
                "features": c.features.tolist(),
                "tags": list(c.tags),
            }
            for c in cc.cells
        ],
    }
    if cc.velocities is not None:
        doc["velocities"] = cc.velocities.tolist()
    if cc.target_level is not None and cc.target_values is not None:
        doc["target"] = {"level": cc.target_level, "values": cc.target_values.tolist()}
    return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1)


def complex_from_json(text: str) -> CombinatorialComplex:
    """Parse the interchange schema.  Unknown keys are rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"unknown keys {sorted(unknown)}")
    for key in ("spatial_dim", "num_nodes", "positions", "cells"):
        if key not in doc:
            raise SchemaError(f"missing required key {key!r}")

    positions = np.asarray(doc["positions"], dtype=np.float64)
    if positions.ndim != 2:
        raise SchemaError("positions must be a list of coordinate rows")
    if positions.shape[0] != doc["num_nodes"]:
        raise SchemaError(
            f"num_nodes is {doc['num_nodes']} but positions has {positions.shape[0]} rows"
        )
    if positions.shape[1] != doc["spatial_dim"]:
        raise SchemaError(
            f"spatial_dim is {doc['spatial_dim']} but positions are "
            f"{positions.shape[1]}-dimensional"
        )

    cells = []
    for entry in doc["cells"]:
        if not isinstance(entry, dict):
            raise SchemaError("each cell must be an object")
        bad = set(entry) - _CELL_KEYS
        if bad:
            raise SchemaError(f"unknown cell keys {sorted(bad)}")
        if "nodes" not in entry or "rank" not in entry:
            raise SchemaError("cells need 'nodes' and 'rank'")
        cells.append(
            make_cell(
                entry["nodes"],
                entry["rank"],
                entry.get("features"),
                entry.get("tags", ()),
            )
        )

    target_level = None
    target_values = None
    if "target" in doc:
        target = doc["target"]
        if not isinstance(target, dict) or set(target) - _TARGET_KEYS:
            raise SchemaError("target must be an object with 'level' and 'values'")
        target_level = target.get("level")
        target_values = target.get("values")

    return build_complex(
        positions,
        cells,
        velocities=doc.get("velocities"),
        target_level=target_level,
        target_values=target_values,
    )


def save_complex(cc: CombinatorialComplex, path: str | os.PathLike) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(complex_to_json(cc))
        fh.write("\n")
    os.replace(tmp, path)


def load_complex(path: str | os.PathLike) -> CombinatorialComplex:
    with open(path, "r", encoding="utf-8") as fh:
        return complex_from_json(fh.read())
