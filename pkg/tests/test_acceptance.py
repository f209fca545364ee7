"""Acceptance suite: one end-to-end check per contracted behaviour.

Each test prints a single ``[i/9] PASS ...`` verdict line with the measured
numbers next to the threshold they are held to.  Run with ``pytest
tests/test_acceptance.py -s`` to watch the lines appear; without ``-s``
pytest still shows the line for any failing check.  Every test seeds its own
generator, so the suite is deterministic and order-independent.
"""

import time

import numpy as np
import pytest

from etnn.bench import (
    equivariance_suite,
    gradient_suite,
    hasse_equivalence,
    kchain_experiment,
    molecular_convergence,
    prop3_case,
    runtime_scaling,
)
from etnn.invariants import (
    CENTROID_AGGS,
    DIST_AGGS,
    HAUSDORFF_MODES,
    HULL_WHICH,
    component_value,
    hausdorff,
    hull_volume,
)
from tests.conftest import random_complex, random_orthogonal
from tests.test_neighborhoods import materialised_pairs, oracle_pairs

SEED = 20260814


def _verdict(index: int, ok: bool, text: str) -> None:
    line = f"[{index}/9] {'PASS' if ok else 'FAIL'} {text}"
    print(line)
    assert ok, line


def test_equivariance_randomized_trials():
    report = equivariance_suite(trials=100, tol=1e-5, seed=SEED)
    ok = report.passed and report.failures == 0 and report.elapsed_seconds < 60.0
    _verdict(
        1,
        ok,
        "equivariance: 100 trials, max err "
        f"pred {report.max_prediction_err:.1e} / pos {report.max_position_err:.1e}"
        f" / vel {report.max_velocity_err:.1e} vs tol 1e-05, "
        f"leak control {report.negative_control_err:.1e}, "
        f"{report.elapsed_seconds:.1f}s < 60s",
    )


def test_restricted_mode_matches_flat_network_on_hasse_graph():
    report = hasse_equivalence(trials=50, tol=1e-9, max_cells=30, seed=SEED)
    ok = report.passed and report.elapsed_seconds < 60.0
    _verdict(
        2,
        ok,
        f"hasse equivalence: 50 complexes, max dev {report.max_deviation:.1e}"
        f" vs tol 1e-09, control dev {report.negative_control_deviation:.1e}, "
        f"{report.elapsed_seconds:.1f}s < 60s",
    )


def test_chain_pair_expressiveness_grid():
    t0 = time.perf_counter()
    reports = kchain_experiment(
        k=4,
        variants=("graph-only", "1a", "3a"),
        layer_counts=(1, 2),
        widths=(32, 64),
        seeds=5,
        epochs=1000,
    )
    elapsed = time.perf_counter() - t0
    by_variant = {r.variant: r for r in reports}
    parts = []
    ok = elapsed <= 600.0
    for width in (32, 64):
        lifted = by_variant["1a"].mean_accuracy(1, width)
        flat1 = by_variant["graph-only"].mean_accuracy(1, width)
        flat2 = by_variant["graph-only"].mean_accuracy(2, width)
        blind = by_variant["3a"].mean_accuracy(1, width)
        deep = by_variant["3a"].mean_accuracy(2, width)
        ok = ok and lifted >= 0.95 and flat1 <= 0.65 and flat2 <= 0.65
        ok = ok and blind <= 0.65 and deep >= 0.75
        parts.append(
            f"w{width}: 1a@1 {lifted:.2f}>=0.95, graph@1 {flat1:.2f}<=0.65, "
            f"graph@2 {flat2:.2f}<=0.65, 3a@1 {blind:.2f}<=0.65, "
            f"3a@2 {deep:.2f}>=0.75"
        )
    _verdict(3, ok, f"k=4 chains, 5 seeds: {'; '.join(parts)} ({elapsed:.0f}s <= 600s)")


def test_upper_adjacency_only_lift_stays_blind():
    report = prop3_case(
        k=4, depths=(1, 2, 3), seeds=3, width=32, epochs=500, threshold=0.65
    )
    ok = report.disconnected and report.passed
    accs = ", ".join(
        f"depth {d} {a:.2f}<=0.65"
        for d, a in zip(report.depths, report.mean_accuracies)
    )
    _verdict(
        4,
        ok,
        f"disjoint-cell lift: hasse disconnected={report.disconnected}, {accs} "
        f"({report.elapsed_seconds:.0f}s)",
    )


def test_gradients_match_finite_differences():
    report = gradient_suite(configs=10, tol=1e-4, h=1e-5, seed=SEED)
    ok = report.passed and report.elapsed_seconds < 120.0
    _verdict(
        5,
        ok,
        f"gradients: 10 configs, max rel err {report.max_rel_err:.1e} vs tol "
        f"1e-04 at h=1e-05, {report.elapsed_seconds:.1f}s < 120s",
    )


def test_neighborhoods_match_set_oracle():
    kinds = [
        ("inc_up", "inc_up", 1),
        ("inc_up:2", "inc_up", 2),
        ("inc_down", "inc_down", 1),
        ("inc_down:2", "inc_down", 2),
        ("adj_up", "adj_up", 1),
        ("adj_down", "adj_down", 1),
        ("adj_max", "adj_max", 1),
    ]
    rng = np.random.default_rng(SEED)
    total_pairs = 0
    largest = 0
    for trial in range(100):
        cc = random_complex(rng, max_nodes=16)
        assert cc.num_cells <= 50
        largest = max(largest, cc.num_cells)
        for spec_text, kind, hop in kinds:
            want = oracle_pairs(cc, kind, hop)
            assert materialised_pairs(cc, spec_text) == want, (trial, spec_text)
            total_pairs += len(want)
    _verdict(
        6,
        True,
        f"neighborhoods: 100 complexes (largest {largest} cells), 7 kinds, "
        f"{total_pairs} oracle pairs matched exactly",
    )


def test_invariant_value_oracles():
    rng = np.random.default_rng(SEED)

    # Hausdorff: the max/min selection agrees bitwise on a shared distance
    # matrix, and stays within float-summation noise of a per-pair norm loop.
    worst_enum = 0.0
    for trial in range(150):
        X = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(2, 5))))
        Y = rng.normal(size=(int(rng.integers(1, 9)), X.shape[1]))
        D = np.sqrt(((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1))
        d_xy = float(D.min(axis=1).max())
        d_yx = float(D.min(axis=0).max())
        assert hausdorff(X, Y, "xy") == d_xy
        assert hausdorff(X, Y, "yx") == d_yx
        assert hausdorff(X, Y, "sym") == max(d_xy, d_yx)
        enum = max(min(float(np.linalg.norm(x - y)) for y in Y) for x in X)
        worst_enum = max(worst_enum, abs(hausdorff(X, Y, "xy") - enum))
    assert worst_enum <= 1e-12

    # Hull volume against Monte-Carlo rejection with an independent
    # point-in-hull test.  A million samples puts the sampling noise well
    # under the one percent budget.
    from scipy.spatial import Delaunay

    worst_hull = 0.0
    for dim in (2, 3):
        for trial in range(10):
            P = rng.normal(size=(int(rng.integers(dim + 2, 13)), dim))
            tri = Delaunay(P)
            lo, hi = P.min(axis=0), P.max(axis=0)
            samples = rng.uniform(lo, hi, size=(1_000_000, dim))
            frac = float(np.mean(tri.find_simplex(samples) >= 0))
            estimate = float(np.prod(hi - lo)) * frac
            rel = abs(hull_volume(P) - estimate) / estimate
            worst_hull = max(worst_hull, rel)
    assert worst_hull <= 0.01

    # Every component is stable under rotations, reflections and shifts.
    # Sum-of-positions centroids only commute with translation for equal
    # cell sizes, so that component is checked on matched sizes.
    components = (
        [("dist", a) for a in DIST_AGGS]
        + [("centroid", a) for a in CENTROID_AGGS]
        + [("hausdorff", m) for m in HAUSDORFF_MODES]
        + [("hull", w) for w in HULL_WHICH]
    )
    worst_stab = 0.0
    for dim in (2, 3):
        for trial in range(20):
            X = rng.normal(size=(int(rng.integers(1, 7)), dim))
            Y = rng.normal(size=(int(rng.integers(1, 7)), dim))
            O = random_orthogonal(rng, dim, reflect=bool(trial % 2))
            b = rng.normal(size=dim)
            for comp in components:
                if comp == ("centroid", "sum") and X.shape[0] != Y.shape[0]:
                    continue
                if comp[0] == "hull" and min(X.shape[0], Y.shape[0]) < 3:
                    continue
                before = component_value(X, Y, comp)
                after = component_value(X @ O.T + b, Y @ O.T + b, comp)
                rel = abs(after - before) / max(1.0, abs(before))
                worst_stab = max(worst_stab, rel)
    assert worst_stab <= 1e-9

    _verdict(
        7,
        True,
        f"invariants: hausdorff exact (enum gap {worst_enum:.1e}), hull MC "
        f"worst {worst_hull:.2%} <= 1%, stability {worst_stab:.1e} <= 1e-09",
    )


def test_forward_runtime_scaling():
    sparse = runtime_scaling(regime="sparse", seed=SEED)
    dense = runtime_scaling(regime="dense", seed=SEED)
    elapsed = sparse.elapsed_seconds + dense.elapsed_seconds
    ok = (
        0.8 <= sparse.slope <= 1.3
        and 1.6 <= dense.slope <= 2.4
        and elapsed <= 300.0
    )
    _verdict(
        8,
        ok,
        f"scaling: bounded-degree slope {sparse.slope:.2f} in [0.8, 1.3] over "
        f"1e2..1e4 cells, complete-adjacency slope {dense.slope:.2f} near 2, "
        f"{elapsed:.0f}s <= 300s",
    )


def test_molecular_regression_converges():
    report = molecular_convergence(samples=20, epochs=200, seed=SEED)
    ok = report.passed and report.deterministic and report.loss_ratio < 0.1
    _verdict(
        9,
        ok,
        f"molecular regression: loss {report.first_epoch_loss:.4f} -> "
        f"{report.best_loss:.4f} (ratio {report.loss_ratio:.4f} < 0.1) in "
        f"{report.epochs} epochs, deterministic={report.deterministic}, "
        f"{report.elapsed_seconds:.0f}s",
    )
