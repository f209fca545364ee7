"""Constructions that turn graphs and annotations into combinatorial complexes.

Covers the standard lifts (nodes-only, edges-as-cells, clique, chordless
cycle, hypergraph, molecular annotations, virtual cell), the synthetic chain
pairs and handcrafted cell families used by the expressiveness benchmarks,
and the reduction of a complex plus a neighborhood collection to its
geometric Hasse graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import networkx as nx
import numpy as np

from .complexes import (
    Cell,
    CombinatorialComplex,
    SchemaError,
    build_complex,
    make_cell,
    tag_sort_key,
)
from .neighborhoods import (
    NeighborhoodCollection,
    assemble,
    graph_adjacency_entry,
)

__all__ = [
    "LiftError",
    "UnsupportedVariant",
    "TooManyCells",
    "RecipeError",
    "GeometricGraph",
    "make_graph",
    "ball_graph",
    "graph_to_json",
    "graph_from_json",
    "graph_lift",
    "clique_lift",
    "cycle_lift",
    "hypergraph_lift",
    "molecular_lift",
    "add_virtual_cell",
    "k_chain_graphs",
    "k_chain_pair",
    "graph_baseline",
    "EXPRESSIVITY_VARIANTS",
    "expressivity_lift",
    "HasseGraph",
    "hasse_graph",
    "LiftRecipe",
    "parse_recipe",
    "apply_recipe",
]

MAX_CYCLE_LEN = 12
MAX_CYCLE_COUNT = 100_000


class LiftError(ValueError):
    pass


class UnsupportedVariant(LiftError):
    pass


class TooManyCells(LiftError):
    pass


class RecipeError(LiftError):
    pass


@dataclass(frozen=True)
class GeometricGraph:
    """Undirected graph with node positions and optional node features."""

    positions: np.ndarray  # (n, d)
    edges: np.ndarray  # (E, 2) int64, each row sorted, no duplicates
    node_features: np.ndarray | None = None  # (n, F)

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def spatial_dim(self) -> int:
        return self.positions.shape[1]


def make_graph(positions, edges, node_features=None) -> GeometricGraph:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise LiftError(f"positions must be (n, d), got shape {positions.shape}")
    n = positions.shape[0]
    edge_rows = []
    seen = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            raise LiftError(f"self edge on node {u}")
        if not (0 <= u < n and 0 <= v < n):
            raise LiftError(f"edge ({u}, {v}) out of range for {n} nodes")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise LiftError(f"duplicate edge {key}")
        seen.add(key)
        edge_rows.append(key)
    edge_arr = np.array(sorted(edge_rows), dtype=np.int64).reshape(-1, 2)
    if node_features is not None:
        node_features = np.asarray(node_features, dtype=np.float64)
        if node_features.ndim != 2 or node_features.shape[0] != n:
            raise LiftError("node_features must be (num_nodes, F)")
        node_features.setflags(write=False)
    positions.setflags(write=False)
    edge_arr.setflags(write=False)
    return GeometricGraph(positions, edge_arr, node_features)


def ball_graph(positions, radius: float) -> GeometricGraph:
    """Connect every pair of points within ``radius`` (inclusive).

    Clique-lifting the result approximates a Vietoris-Rips complex at small
    scale; it is an approximation, not an exact filtration.
    """
    positions = np.asarray(positions, dtype=np.float64)
    diffs = positions[:, None, :] - positions[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=2))
    n = positions.shape[0]
    edges = [
        (i, j) for i in range(n) for j in range(i + 1, n) if dists[i, j] <= radius
    ]
    return make_graph(positions, edges)


def _nx_graph(g: GeometricGraph) -> nx.Graph:
    out = nx.Graph()
    out.add_nodes_from(range(g.num_nodes))
    out.add_edges_from(map(tuple, g.edges))
    return out


def graph_to_json(g: GeometricGraph) -> dict:
    doc = {
        "spatial_dim": g.spatial_dim,
        "num_nodes": g.num_nodes,
        "positions": g.positions.tolist(),
        "edges": g.edges.tolist(),
    }
    if g.node_features is not None:
        doc["node_features"] = g.node_features.tolist()
    return doc


def graph_from_json(doc: dict) -> GeometricGraph:
    required = {"spatial_dim", "num_nodes", "positions", "edges"}
    allowed = required | {"node_features", "rings", "functional_groups", "edge_features"}
    if not isinstance(doc, dict):
        raise SchemaError("graph document must be a JSON object")
    missing = required - doc.keys()
    if missing:
        raise SchemaError(f"graph document missing keys: {sorted(missing)}")
    unknown = doc.keys() - allowed
    if unknown:
        raise SchemaError(f"graph document has unknown keys: {sorted(unknown)}")
    g = make_graph(doc["positions"], doc["edges"], doc.get("node_features"))
    if g.num_nodes != doc["num_nodes"] or g.spatial_dim != doc["spatial_dim"]:
        raise SchemaError("declared num_nodes/spatial_dim disagree with positions")
    return g


# -- basic lifts -------------------------------------------------------------------


def _node_cells(g: GeometricGraph) -> list[Cell]:
    cells = []
    for i in range(g.num_nodes):
        feats = None if g.node_features is None else g.node_features[i]
        cells.append(make_cell((i,), 0, feats, tags=("node",)))
    return cells


def graph_lift(
    g: GeometricGraph,
    include_edges: bool = False,
    edge_features=None,
) -> CombinatorialComplex:
    """Singletons at rank 0; optionally each edge as a rank-1 cell."""
    cells = _node_cells(g)
    if include_edges:
        if edge_features is not None:
            edge_features = np.asarray(edge_features, dtype=np.float64)
            if edge_features.shape[0] != g.edges.shape[0]:
                raise LiftError("edge_features length must match edge count")
        for idx, (u, v) in enumerate(g.edges):
            feats = None if edge_features is None else edge_features[idx]
            cells.append(make_cell((u, v), 1, feats, tags=("edge",)))
    return build_complex(g.positions, cells)


def clique_lift(g: GeometricGraph, max_dim: int) -> CombinatorialComplex:
    """Every clique of size <= max_dim + 1 becomes a cell of rank size - 1."""
    if max_dim < 1:
        raise LiftError(f"max_dim must be >= 1, got {max_dim}")
    cells = _node_cells(g)
    for clique in nx.enumerate_all_cliques(_nx_graph(g)):
        size = len(clique)
        if size > max_dim + 1:
            break  # enumeration is ordered by size
        if size == 1:
            continue
        tag = "edge" if size == 2 else "clique"
        cells.append(make_cell(tuple(clique), size - 1, tags=(tag,)))
    return build_complex(g.positions, cells)


def cycle_lift(g: GeometricGraph, max_len: int) -> CombinatorialComplex:
    """Nodes, edges, and each chordless cycle of length <= max_len as rank 2."""
    if not 3 <= max_len <= MAX_CYCLE_LEN:
        raise LiftError(f"max_len must be in [3, {MAX_CYCLE_LEN}], got {max_len}")
    cells = _node_cells(g)
    for u, v in g.edges:
        cells.append(make_cell((u, v), 1, tags=("edge",)))
    count = 0
    for cycle in nx.chordless_cycles(_nx_graph(g), length_bound=max_len):
        count += 1
        if count > MAX_CYCLE_COUNT:
            raise TooManyCells(f"more than {MAX_CYCLE_COUNT} chordless cycles")
        cells.append(make_cell(tuple(cycle), 2, tags=("ring",)))
    return build_complex(g.positions, cells)


def hypergraph_lift(
    positions,
    hyperedges: Sequence[Sequence[int]],
    node_features=None,
    hyperedge_features=None,
) -> CombinatorialComplex:
    """Singletons at rank 0, every hyperedge at rank 1.

    A singleton hyperedge duplicates a node cell; it is merged into it
    (tagged) instead of failing.
    """
    positions = np.asarray(positions, dtype=np.float64)
    g = make_graph(positions, [], node_features)
    node_cells = {c.nodes[0]: c for c in _node_cells(g)}
    if hyperedge_features is not None:
        hyperedge_features = np.asarray(hyperedge_features, dtype=np.float64)
        if hyperedge_features.shape[0] != len(hyperedges):
            raise LiftError("hyperedge_features length must match hyperedge count")
    higher = []
    for idx, he in enumerate(hyperedges):
        nodes = tuple(sorted(set(int(v) for v in he)))
        feats = None if hyperedge_features is None else hyperedge_features[idx]
        if len(nodes) == 1:
            node = node_cells[nodes[0]]
            node_cells[nodes[0]] = Cell(
                node.nodes,
                0,
                node.features,
                tuple(sorted(set(node.tags) | {"hyperedge"}, key=tag_sort_key)),
            )
        else:
            higher.append(make_cell(nodes, 1, feats, tags=("hyperedge",)))
    cells = [node_cells[i] for i in range(positions.shape[0])] + higher
    return build_complex(positions, cells)


def _merge_feature_blocks(
    groups: list[tuple[tuple[int, ...], str, np.ndarray]],
    widths: dict[str, int],
    rank: int,
) -> list[Cell]:
    """Combine annotation groups sharing a node set into single cells.

    Per-rank features use a fixed block layout (one block per tag, ordered by
    tag precedence) so that all cells of the rank share a feature width even
    when only some carry a given annotation.
    """
    tags_in_rank = sorted(widths, key=tag_sort_key)
    by_nodes: dict[tuple[int, ...], dict[str, np.ndarray]] = {}
    for nodes, tag, feats in groups:
        slot = by_nodes.setdefault(nodes, {})
        if tag in slot:
            raise LiftError(f"duplicate {tag} annotation on nodes {nodes}")
        slot[tag] = feats
    cells = []
    for nodes in sorted(by_nodes):
        slot = by_nodes[nodes]
        blocks = [
            slot.get(tag, np.zeros(widths[tag], dtype=np.float64))
            for tag in tags_in_rank
        ]
        feats = np.concatenate(blocks) if blocks else None
        cells.append(make_cell(nodes, rank, feats, tags=tuple(sorted(slot, key=tag_sort_key))))
    return cells


def molecular_lift(
    positions,
    bonds: Sequence[Sequence[int]],
    rings: Sequence[Sequence[int]] = (),
    functional_groups: Sequence[Sequence[int]] = (),
    *,
    atom_features=None,
    bond_features=None,
    ring_features=None,
    group_features=None,
) -> CombinatorialComplex:
    """Molecule as a complex: atoms rank 0; bonds and 2-atom groups rank 1;
    rings and larger groups rank 2.

    Annotations are taken as given (no chemistry detection).  A 2-atom group
    coinciding with a bond merges into one rank-1 cell carrying both tags;
    rank-1 and rank-2 features use fixed per-tag blocks (zeros where an
    annotation is absent) so each rank keeps a uniform feature width.
    """
    positions = np.asarray(positions, dtype=np.float64)
    g = make_graph(positions, bonds, atom_features)

    def _rows(features, count, what):
        if features is None:
            return [np.zeros(0, dtype=np.float64)] * count, 0
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != count:
            raise LiftError(f"{what} features must be ({count}, F)")
        return list(features), features.shape[1]

    bond_rows, bond_width = _rows(bond_features, len(g.edges), "bond")
    ring_rows, ring_width = _rows(ring_features, len(rings), "ring")
    group_rows, group_width = _rows(group_features, len(functional_groups), "group")

    rank1: list[tuple[tuple[int, ...], str, np.ndarray]] = []
    rank2: list[tuple[tuple[int, ...], str, np.ndarray]] = []
    for (u, v), feats in zip(g.edges, bond_rows):
        rank1.append(((int(u), int(v)), "bond", feats))
    for ring, feats in zip(rings, ring_rows):
        nodes = tuple(sorted(set(int(v) for v in ring)))
        if len(nodes) < 3:
            raise LiftError(f"ring must have at least 3 atoms, got {nodes}")
        rank2.append((nodes, "ring", feats))
    for grp, feats in zip(functional_groups, group_rows):
        nodes = tuple(sorted(set(int(v) for v in grp)))
        if len(nodes) < 2:
            raise LiftError(f"functional group needs at least 2 atoms, got {nodes}")
        target = rank1 if len(nodes) == 2 else rank2
        target.append((nodes, "functional_group", feats))

    cells = _node_cells(g)
    has_2_groups = any(len(n) == 2 for n, t, _ in rank1 if t == "functional_group")
    w1 = {"bond": bond_width}
    if has_2_groups:
        w1["functional_group"] = group_width
    cells += _merge_feature_blocks(rank1, w1, rank=1)
    w2 = {}
    if any(t == "ring" for _, t, _ in rank2):
        w2["ring"] = ring_width
    if any(t == "functional_group" for _, t, _ in rank2):
        w2["functional_group"] = group_width
    cells += _merge_feature_blocks(rank2, w2, rank=2)
    return build_complex(positions, cells)


def add_virtual_cell(
    cc: CombinatorialComplex, rank: int | None = None, features=None
) -> CombinatorialComplex:
    """Append one cell containing every node, tagged "virtual".

    The model excludes it from readout and from ordinary message exchange; it
    exists to induce max-adjacency wiring.  Default rank is dimension + 1, the
    smallest always-valid choice for a non-trivial complex.
    """
    if rank is None:
        rank = cc.dimension() + 1
    cells = list(cc.cells)
    cells.append(make_cell(tuple(range(cc.num_nodes)), rank, features, tags=("virtual",)))
    return build_complex(
        cc.positions,
        cells,
        velocities=cc.velocities,
        target_level=cc.target_level,
        target_values=cc.target_values,
    )


# -- synthetic chain benchmarks ------------------------------------------------------


def k_chain_graphs(k: int, spatial_dim: int = 2) -> tuple[GeometricGraph, GeometricGraph]:
    """A pair of path graphs with k collinear interior nodes, distinguished
    only by the orientation of one end node.

    Interior node i sits at (i, 0); the ends sit at (0, 1) and (k+1, +-1),
    with the sign flipped in the second graph.  Node features are constant 1,
    so all information lives in the geometry.  The pair is (floor(k/2)+1)-hop
    distinct.
    """
    if k < 1:
        raise LiftError(f"k must be >= 1, got {k}")
    if spatial_dim < 2:
        raise LiftError("chain graphs need spatial_dim >= 2")

    def build(end_sign: float) -> GeometricGraph:
        pos = np.zeros((k + 2, spatial_dim))
        pos[0, 0], pos[0, 1] = 0.0, 1.0
        for i in range(1, k + 1):
            pos[i, 0] = float(i)
        pos[k + 1, 0], pos[k + 1, 1] = float(k + 1), end_sign
        edges = [(i, i + 1) for i in range(k + 1)]
        return make_graph(pos, edges, np.ones((k + 2, 1)))

    return build(1.0), build(-1.0)


def k_chain_pair(
    k: int, spatial_dim: int = 2
) -> tuple[CombinatorialComplex, CombinatorialComplex]:
    """The chain pair as node-only complexes (connectivity stays in the
    neighborhood collection, not in cells)."""
    g_a, g_b = k_chain_graphs(k, spatial_dim)
    return graph_lift(g_a), graph_lift(g_b)


def _path_order(g: GeometricGraph) -> list[int]:
    adj: dict[int, list[int]] = {i: [] for i in range(g.num_nodes)}
    for u, v in g.edges:
        adj[int(u)].append(int(v))
        adj[int(v)].append(int(u))
    ends = sorted(i for i, nbrs in adj.items() if len(nbrs) == 1)
    if len(ends) != 2 or any(len(nbrs) > 2 for nbrs in adj.values()):
        raise LiftError("graph is not a simple path")
    order = [ends[0]]
    prev = -1
    while len(order) < g.num_nodes:
        nxt = [w for w in adj[order[-1]] if w != prev]
        if not nxt:
            raise LiftError("graph is not a connected path")
        prev = order[-1]
        order.append(nxt[0])
    return order


EXPRESSIVITY_VARIANTS = ("1a", "2a", "3a", "1b", "2b", "3b", "4b")

_A_SPECS = "inc_up, inc_down"
_B_SPECS = "adj_up, adj_down, inc_up, inc_down"


def _three_node_paths(g: GeometricGraph) -> list[tuple[int, ...]]:
    adj: dict[int, list[int]] = {i: [] for i in range(g.num_nodes)}
    for u, v in g.edges:
        adj[int(u)].append(int(v))
        adj[int(v)].append(int(u))
    found = set()
    for mid, nbrs in adj.items():
        for i in range(len(nbrs)):
            for j in range(i + 1, len(nbrs)):
                found.add(tuple(sorted((nbrs[i], mid, nbrs[j]))))
    return sorted(found)


def expressivity_lift(
    g: GeometricGraph, variant: str
) -> tuple[CombinatorialComplex, NeighborhoodCollection]:
    """Handcrafted cell families probing how lifting affects separation power.

    a-variants keep node connectivity as a programmatic adjacency (edges are
    not cells) plus up/down incidences; they require a path graph:
      1a: one 1-cell over all nodes.
      2a: two overlapping equal-size 1-cells, each dropping one path end.
      3a: two disjoint 1-cells of different sizes.
    b-variants wire up/down incidences plus up/down adjacencies:
      1b: nodes and edges.
      2b: nodes plus one all-node 1-cell.
      3b: nodes, edges, and an all-node 2-cell.
      4b: nodes, edges, and every 3-node simple path as a 2-cell.
    """
    if variant not in EXPRESSIVITY_VARIANTS:
        raise UnsupportedVariant(
            f"variant must be one of {EXPRESSIVITY_VARIANTS}, got {variant!r}"
        )
    n = g.num_nodes
    if variant.endswith("a"):
        order = _path_order(g)
        cells = _node_cells(g)
        if variant == "1a":
            cells.append(make_cell(tuple(range(n)), 1, tags=("path",)))
        elif variant == "2a":
            if n < 3:
                raise LiftError("2a needs at least 3 nodes")
            cells.append(make_cell(tuple(order[: n - 1]), 1, tags=("path",)))
            cells.append(make_cell(tuple(order[1:]), 1, tags=("path",)))
        else:  # 3a
            if n < 4:
                raise LiftError("3a needs at least 4 nodes")
            cells.append(make_cell(tuple(order[:2]), 1, tags=("path",)))
            cells.append(make_cell(tuple(order[2:]), 1, tags=("path",)))
        cc = build_complex(g.positions, cells)
        entries = [graph_adjacency_entry(n, g.edges)]
        entries += list(assemble(cc, _A_SPECS).entries)
        return cc, NeighborhoodCollection(tuple(entries))

    if variant == "1b":
        cc = graph_lift(g, include_edges=True)
    elif variant == "2b":
        cells = _node_cells(g)
        cells.append(make_cell(tuple(range(n)), 1, tags=("path",)))
        cc = build_complex(g.positions, cells)
    elif variant == "3b":
        # the all-node 2-cell is an ordinary cell here, not a "virtual" one:
        # it sends and receives like any other
        cells = _node_cells(g)
        for u, v in g.edges:
            cells.append(make_cell((u, v), 1, tags=("edge",)))
        cells.append(make_cell(tuple(range(n)), 2, tags=("hyperedge",)))
        cc = build_complex(g.positions, cells)
    else:  # 4b
        cells = _node_cells(g)
        for u, v in g.edges:
            cells.append(make_cell((u, v), 1, tags=("edge",)))
        for path in _three_node_paths(g):
            cells.append(make_cell(path, 2, tags=("path",)))
        cc = build_complex(g.positions, cells)
    return cc, assemble(cc, _B_SPECS)


def graph_baseline(
    g: GeometricGraph,
) -> tuple[CombinatorialComplex, NeighborhoodCollection]:
    """Node-only complex wired with the plain graph adjacency (the un-lifted
    reference point for the chain benchmarks)."""
    cc = graph_lift(g)
    entry = graph_adjacency_entry(g.num_nodes, g.edges)
    return cc, NeighborhoodCollection((entry,))


# -- Hasse reduction -----------------------------------------------------------------


@dataclass(frozen=True)
class HasseGraph:
    """A complex flattened to a directed geometric graph: one node per cell.

    Node i corresponds to cell i of the source complex.  ``edges`` holds one
    (receiver, sender) row per neighborhood pair, so a pair contributed by two
    different neighborhood functions appears twice: message passing on this
    graph then matches message passing on the complex message-for-message.
    """

    positions: np.ndarray  # (num_cells, d)
    edges: np.ndarray  # (P, 2) int64 rows of (receiver, sender)
    cell_ranks: np.ndarray  # (num_cells,) int64
    member_lists: tuple[tuple[int, ...], ...]
    aggregator: str

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]


def aggregate_positions(
    positions: np.ndarray, members: Sequence[Sequence[int]], aggregator: str
) -> np.ndarray:
    if aggregator not in ("mean", "sum"):
        raise LiftError(f"aggregator must be 'mean' or 'sum', got {aggregator!r}")
    out = np.zeros((len(members), positions.shape[1]))
    for i, nodes in enumerate(members):
        block = positions[list(nodes)]
        out[i] = block.mean(axis=0) if aggregator == "mean" else block.sum(axis=0)
    return out


def hasse_graph(
    cc: CombinatorialComplex,
    collection: NeighborhoodCollection,
    aggregator: str = "mean",
) -> HasseGraph:
    members = tuple(cell.nodes for cell in cc.cells)
    positions = aggregate_positions(cc.positions, members, aggregator)
    if collection.total_pairs:
        edges = np.concatenate(
            [e.pairs for e in collection.entries if e.pairs.shape[0]], axis=0
        )
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    ranks = np.array([cell.rank for cell in cc.cells], dtype=np.int64)
    return HasseGraph(positions, edges, ranks, members, aggregator)


# -- recipes (CLI surface) -----------------------------------------------------------


@dataclass(frozen=True)
class LiftRecipe:
    """Parsed `component+component` recipe string.

    Grammar: one base of ``graph`` (optionally with ``edges``), ``clique:<d>``,
    ``cycle:<l>`` or ``molecular``, optionally followed by ``virtual`` or
    ``virtual:<rank>``.
    """

    base: str
    include_edges: bool = False
    max_dim: int | None = None
    max_len: int | None = None
    virtual_rank: int | str | None = None  # int, "auto", or None


def parse_recipe(text: str) -> LiftRecipe:
    parts = [p.strip() for p in text.split("+")]
    if any(not p for p in parts):
        raise RecipeError(f"empty component in recipe {text!r}")
    base = None
    include_edges = False
    max_dim = max_len = None
    virtual: int | str | None = None

    def set_base(name):
        nonlocal base
        if base is not None:
            raise RecipeError(f"recipe {text!r} has more than one base lift")
        base = name

    for part in parts:
        head, _, arg = part.partition(":")
        if head == "graph":
            set_base("graph")
        elif head == "edges":
            include_edges = True
        elif head == "clique":
            set_base("clique")
            try:
                max_dim = int(arg)
            except ValueError:
                raise RecipeError(f"clique needs an integer max dim, got {part!r}")
        elif head == "cycle":
            set_base("cycle")
            try:
                max_len = int(arg)
            except ValueError:
                raise RecipeError(f"cycle needs an integer max length, got {part!r}")
        elif head == "molecular":
            set_base("molecular")
        elif head == "virtual":
            virtual = int(arg) if arg else "auto"
        else:
            raise RecipeError(f"unknown recipe component {part!r}")
    if base is None:
        raise RecipeError(f"recipe {text!r} has no base lift")
    if include_edges and base != "graph":
        raise RecipeError("'edges' only combines with the 'graph' base")
    return LiftRecipe(base, include_edges, max_dim, max_len, virtual)


def apply_recipe(doc: dict, recipe: LiftRecipe | str) -> CombinatorialComplex:
    """Lift a graph JSON document (see ``graph_from_json``); molecular recipes
    read `rings` / `functional_groups` arrays from the same document."""
    if isinstance(recipe, str):
        recipe = parse_recipe(recipe)
    g = graph_from_json(doc)
    if recipe.base == "graph":
        cc = graph_lift(
            g,
            include_edges=recipe.include_edges,
            edge_features=doc.get("edge_features"),
        )
    elif recipe.base == "clique":
        cc = clique_lift(g, recipe.max_dim)
    elif recipe.base == "cycle":
        cc = cycle_lift(g, recipe.max_len)
    else:
        cc = molecular_lift(
            g.positions,
            g.edges,
            rings=doc.get("rings", ()),
            functional_groups=doc.get("functional_groups", ()),
            atom_features=g.node_features,
        )
    if recipe.virtual_rank is not None:
        rank = None if recipe.virtual_rank == "auto" else recipe.virtual_rank
        cc = add_virtual_cell(cc, rank=rank)
    return cc
