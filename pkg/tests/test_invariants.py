import numpy as np
import pytest

from etnn.invariants import (
    InvariantError,
    RunningNormalizer,
    UnsupportedDimension,
    centroid_dist,
    component_value,
    dist_agg,
    entry_invariants,
    entry_invariants_with_grad,
    format_invariant_spec,
    hausdorff,
    hull_volume,
    parse_invariant_spec,
    pairwise_distances,
)
from etnn.invariants import _component_value_grad
from tests.conftest import random_orthogonal

ALL_COMPONENTS = parse_invariant_spec(
    "dist:sum,dist:mean,dist:max,dist:min,"
    "centroid:mean,centroid:sum,"
    "hausdorff,hausdorff:xy,hausdorff:yx,"
    "hull:x,hull:y,hull:diff"
)


# -- hand-computed values ------------------------------------------------------


def test_dist_agg_hand_values():
    X = np.array([[0.0, 0.0]])
    Y = np.array([[3.0, 4.0], [0.0, 1.0]])
    assert dist_agg(X, Y, "sum") == pytest.approx(6.0)
    assert dist_agg(X, Y, "mean") == pytest.approx(3.0)
    assert dist_agg(X, Y, "max") == pytest.approx(5.0)
    assert dist_agg(X, Y, "min") == pytest.approx(1.0)


def test_centroid_dist_hand_values():
    X = np.array([[0.0, 0.0], [2.0, 0.0]])
    Y = np.array([[1.0, 3.0], [1.0, 5.0]])
    assert centroid_dist(X, Y, "mean") == pytest.approx(4.0)  # (1,0) vs (1,4)
    assert centroid_dist(X, Y, "sum") == pytest.approx(8.0)  # (2,0) vs (2,8)


def test_hausdorff_hand_values():
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    Y = np.array([[0.0, 1.0], [5.0, 0.0]])
    # directed X->Y: from (0,0): min(1, 5); from (1,0): min(sqrt(2), 4) -> max = sqrt(2)
    assert hausdorff(X, Y, "xy") == pytest.approx(np.sqrt(2.0))
    # directed Y->X: from (0,1): 1; from (5,0): 4 -> max = 4
    assert hausdorff(X, Y, "yx") == pytest.approx(4.0)
    assert hausdorff(X, Y, "sym") == pytest.approx(4.0)


def test_hausdorff_matches_enumeration_oracle(rng):
    for trial in range(40):
        X = rng.normal(size=(rng.integers(1, 7), 3))
        Y = rng.normal(size=(rng.integers(1, 7), 3))
        direct = max(
            min(float(np.linalg.norm(x - y)) for y in Y) for x in X
        )
        assert hausdorff(X, Y, "xy") == pytest.approx(direct, abs=1e-12)
        other = max(
            min(float(np.linalg.norm(x - y)) for x in X) for y in Y
        )
        assert hausdorff(X, Y, "sym") == pytest.approx(max(direct, other), abs=1e-12)


def test_hull_hand_values():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert hull_volume(square) == pytest.approx(1.0)
    with_interior = np.vstack([square, [[0.5, 0.5], [0.25, 0.75]]])
    assert hull_volume(with_interior) == pytest.approx(1.0)
    triangle = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    assert hull_volume(triangle) == pytest.approx(2.0)
    cube = np.array(
        [
            [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
            [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1],
        ],
        dtype=np.float64,
    )
    assert hull_volume(cube) == pytest.approx(1.0)
    tetra = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64
    )
    assert hull_volume(tetra) == pytest.approx(1.0 / 6.0)


def test_hull_degenerate_is_zero():
    collinear = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    assert hull_volume(collinear) == 0.0
    coplanar = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.3, 0.4, 0.0]],
        dtype=np.float64,
    )
    assert hull_volume(coplanar) == 0.0
    assert hull_volume(np.array([[1.0, 2.0]])) == 0.0


def test_hull_rejects_other_dimensions():
    with pytest.raises(UnsupportedDimension):
        hull_volume(np.zeros((5, 4)))
    with pytest.raises(UnsupportedDimension):
        hull_volume(np.zeros((5, 1)))


def test_hull_matches_monte_carlo_oracle(rng):
    # rejection sampling against an independent in-hull test (scipy Delaunay)
    from scipy.spatial import Delaunay

    for dim in (2, 3):
        for trial in range(4):
            P = rng.normal(size=(rng.integers(dim + 2, 10), dim))
            tri = Delaunay(P)
            lo, hi = P.min(axis=0), P.max(axis=0)
            box = float(np.prod(hi - lo))
            samples = rng.uniform(lo, hi, size=(200_000, dim))
            frac = float(np.mean(tri.find_simplex(samples) >= 0))
            estimate = box * frac
            assert hull_volume(P) == pytest.approx(estimate, rel=0.03)


# -- invariance properties -----------------------------------------------------


def test_components_are_euclidean_invariant(rng):
    for dim in (2, 3):
        for trial in range(10):
            X = rng.normal(size=(int(rng.integers(1, 6)), dim))
            Y = rng.normal(size=(int(rng.integers(1, 6)), dim))
            O = random_orthogonal(rng, dim, reflect=bool(trial % 2))
            b = rng.normal(size=dim)
            for comp in ALL_COMPONENTS.components:
                if comp[0] == "hull" and (X.shape[0] < 3 or Y.shape[0] < 3):
                    continue
                if comp == ("centroid", "sum") and X.shape[0] != Y.shape[0]:
                    continue  # sum-aggregated centroids shift with translation
                before = component_value(X, Y, comp)
                after = component_value(X @ O.T + b, Y @ O.T + b, comp)
                assert abs(after - before) <= 1e-9 * max(1.0, abs(before))


def test_centroid_sum_invariance_caveat(rng):
    # rotation-invariant always; translation-invariant only for equal sizes
    X = rng.normal(size=(3, 3))
    Y = rng.normal(size=(5, 3))
    O = random_orthogonal(rng, 3)
    before = centroid_dist(X, Y, "sum")
    assert centroid_dist(X @ O.T, Y @ O.T, "sum") == pytest.approx(before)
    shifted = centroid_dist(X + 1.0, Y + 1.0, "sum")
    assert abs(shifted - before) > 1e-6  # moves: |X| != |Y|


def test_components_are_permutation_invariant(rng):
    X = rng.normal(size=(5, 3))
    Y = rng.normal(size=(4, 3))
    pX = rng.permutation(5)
    pY = rng.permutation(4)
    for comp in ALL_COMPONENTS.components:
        assert component_value(X[pX], Y[pY], comp) == pytest.approx(
            component_value(X, Y, comp), abs=1e-12
        )


# -- gradients -----------------------------------------------------------------


def test_component_gradients_match_central_differences(rng):
    h = 1e-6
    for dim in (2, 3):
        for trial in range(3):
            X = rng.normal(size=(4, dim))
            Y = rng.normal(size=(5, dim))
            for comp in ALL_COMPONENTS.components:
                value, gX, gY = _component_value_grad(X, Y, comp)
                assert value == pytest.approx(component_value(X, Y, comp), abs=1e-12)
                for arr, grad in ((X, gX), (Y, gY)):
                    flat = arr.ravel()
                    gflat = grad.ravel()
                    for idx in range(flat.size):
                        old = flat[idx]
                        flat[idx] = old + h
                        up = component_value(X, Y, comp)
                        flat[idx] = old - h
                        down = component_value(X, Y, comp)
                        flat[idx] = old
                        fd = (up - down) / (2 * h)
                        assert gflat[idx] == pytest.approx(fd, abs=5e-6), comp


def test_entry_pullback_accumulates(rng):
    positions = rng.normal(size=(6, 2))
    members = [np.array(m) for m in ([0, 1], [2, 3, 4], [4, 5], [0, 5])]
    pairs = np.array([[0, 1], [2, 3], [0, 3]])
    spec = parse_invariant_spec("dist:sum,hausdorff")
    values, pullback = entry_invariants_with_grad(positions, members, pairs, spec)
    assert values.shape == (3, 2)
    upstream = rng.normal(size=values.shape)
    grad = pullback(upstream)
    assert grad.shape == positions.shape
    # compare against scalar finite difference of sum(upstream * values)
    h = 1e-6
    for idx in np.ndindex(positions.shape):
        old = positions[idx]
        positions[idx] = old + h
        up = (upstream * entry_invariants(positions, members, pairs, spec)).sum()
        positions[idx] = old - h
        down = (upstream * entry_invariants(positions, members, pairs, spec)).sum()
        positions[idx] = old
        assert grad[idx] == pytest.approx((up - down) / (2 * h), abs=5e-6)


# -- entry evaluation ----------------------------------------------------------


def test_vectorised_entries_match_per_pair_loop(rng):
    positions = rng.normal(size=(8, 3))
    members = [np.array([i]) for i in range(8)]
    members += [np.array([0, 1, 2]), np.array([3, 4, 5]), np.array([5, 6, 7])]
    pairs = np.array([[0, 8], [1, 9], [2, 10], [7, 8]])
    spec = parse_invariant_spec("dist:sum,dist:min,centroid:mean,hausdorff:yx")
    fast = entry_invariants(positions, members, pairs, spec)
    slow = np.array(
        [
            [
                component_value(
                    positions[members[int(r)]], positions[members[int(s)]], comp
                )
                for comp in spec.components
            ]
            for r, s in pairs
        ]
    )
    assert np.allclose(fast, slow, atol=1e-12)


def test_mixed_sizes_take_the_loop_path(rng):
    positions = rng.normal(size=(6, 2))
    members = [np.array([0]), np.array([1, 2]), np.array([3, 4, 5])]
    pairs = np.array([[0, 1], [0, 2]])
    spec = parse_invariant_spec("dist:sum")
    values = entry_invariants(positions, members, pairs, spec)
    assert values[0, 0] == pytest.approx(
        dist_agg(positions[[0]], positions[[1, 2]], "sum")
    )
    assert values[1, 0] == pytest.approx(
        dist_agg(positions[[0]], positions[[3, 4, 5]], "sum")
    )


def test_empty_pairs_and_empty_spec(rng):
    positions = rng.normal(size=(4, 2))
    members = [np.array([i]) for i in range(4)]
    spec = parse_invariant_spec("dist:sum")
    assert entry_invariants(positions, members, np.zeros((0, 2), int), spec).shape == (0, 1)
    empty = parse_invariant_spec("")
    assert empty.arity == 0
    out = entry_invariants(positions, members, np.array([[0, 1]]), empty)
    assert out.shape == (1, 0)


# -- spec grammar --------------------------------------------------------------


def test_invariant_spec_roundtrip():
    for text in (
        "dist:sum",
        "dist:sum,centroid:mean,hausdorff",
        "hull:x,hull:diff",
        "dist:max,hausdorff:yx+norm",
    ):
        spec = parse_invariant_spec(text)
        assert format_invariant_spec(spec) == text
    assert parse_invariant_spec("hausdorff").components == (("hausdorff", "sym"),)
    assert parse_invariant_spec("dist").components == (("dist", "sum"),)
    assert parse_invariant_spec("dist:sum+norm").normalize


@pytest.mark.parametrize(
    "bad", ["dist:product", "centroid:max", "hausdorff:zz", "hull", "hull:z", "volume", "dist,,hull:x"]
)
def test_invariant_spec_rejects(bad):
    with pytest.raises(InvariantError):
        parse_invariant_spec(bad)


# -- running normaliser --------------------------------------------------------


def test_normalizer_matches_ema_oracle(rng):
    norm = RunningNormalizer(arity=2, momentum=0.1, eps=1e-5)
    mean, var = np.zeros(2), np.ones(2)
    for step in range(5):
        batch = rng.normal(loc=3.0, scale=2.0, size=(16, 2))
        out = norm.apply(0, batch, training=True)
        want = (batch - batch.mean(axis=0)) / np.sqrt(batch.var(axis=0) + 1e-5)
        assert np.allclose(out, want)
        mean = 0.9 * mean + 0.1 * batch.mean(axis=0)
        var = 0.9 * var + 0.1 * batch.var(axis=0)
        assert np.allclose(norm.mean[0], mean)
        assert np.allclose(norm.var[0], var)
    eval_batch = rng.normal(size=(8, 2))
    out = norm.apply(0, eval_batch, training=False)
    assert np.allclose(out, (eval_batch - mean) / np.sqrt(var + 1e-5))


def test_normalizer_keys_ranks_separately(rng):
    norm = RunningNormalizer(arity=1)
    norm.apply(0, np.full((4, 1), 10.0), training=True)
    assert np.allclose(norm.mean[0], [1.0])  # 0.9*0 + 0.1*10
    mean1, var1 = norm.current(1)
    assert np.allclose(mean1, [0.0]) and np.allclose(var1, [1.0])


def test_normalizer_state_roundtrip(rng):
    norm = RunningNormalizer(arity=3)
    norm.apply(0, rng.normal(size=(5, 3)), training=True)
    norm.apply(2, rng.normal(size=(7, 3)), training=True)
    clone = RunningNormalizer(arity=3)
    clone.load_state(norm.state())
    for rank in (0, 2):
        assert np.allclose(clone.mean[rank], norm.mean[rank])
        assert np.allclose(clone.var[rank], norm.var[rank])


def test_normalizer_eval_before_training_is_identityish():
    norm = RunningNormalizer(arity=1, eps=0.0)
    values = np.array([[5.0], [7.0]])
    assert np.allclose(norm.apply(0, values, training=False), values)


def test_pairwise_distance_shape(rng):
    X = rng.normal(size=(3, 5))
    Y = rng.normal(size=(4, 5))
    D = pairwise_distances(X, Y)
    assert D.shape == (3, 4)
    assert D[1, 2] == pytest.approx(np.linalg.norm(X[1] - Y[2]))
