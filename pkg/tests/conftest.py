"""Shared helpers: seeded random complexes used across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from etnn.complexes import CombinatorialComplex, build_complex, make_cell


def random_complex(
    rng: np.random.Generator,
    max_nodes: int = 10,
    max_dim: int = 3,
    spatial_dim: int = 3,
    feature_width: int = 0,
    velocities: bool = False,
) -> CombinatorialComplex:
    """A random complex satisfying the axioms by construction.

    Rank is a nondecreasing function of cell size (with a random plateau
    width), so any family of random subsets is automatically rank-monotone
    while same-rank nesting still shows up.  Subsets are drawn both fresh and
    by growing earlier ones, which makes containment chains common.
    """
    n = int(rng.integers(2, max_nodes + 1))
    positions = rng.normal(size=(n, spatial_dim))
    vel = rng.normal(size=(n, spatial_dim)) if velocities else None
    dim = int(rng.integers(1, max_dim + 1))
    plateau = int(rng.integers(1, 3))  # sizes per rank step

    def rank_of(size: int) -> int:
        return min(dim, (size - 2) // plateau + 1)

    def feats():
        return rng.normal(size=feature_width) if feature_width else None

    cells = []
    seen: set[tuple[int, ...]] = set()

    def add(nodes: tuple[int, ...]):
        if len(nodes) < 2 or nodes in seen:
            return
        seen.add(nodes)
        cells.append(make_cell(nodes, rank_of(len(nodes)), feats(), ("lift",)))

    for _ in range(int(rng.integers(2, n + 3))):
        size = int(rng.integers(2, min(n, 4) + 1))
        add(tuple(sorted(rng.choice(n, size=size, replace=False).tolist())))
    for _ in range(int(rng.integers(0, n))):
        if not cells:
            break
        base = cells[int(rng.integers(0, len(cells)))]
        grown = set(base.nodes)
        grown.update(rng.choice(n, size=int(rng.integers(1, 3)), replace=False).tolist())
        add(tuple(sorted(grown)))

    explicit_singletons = []
    if feature_width:
        explicit_singletons = [
            make_cell((i,), 0, feats(), ("node",)) for i in range(n)
        ]
    return build_complex(positions, explicit_singletons + cells, velocities=vel)


def random_orthogonal(
    rng: np.random.Generator, n: int, reflect: bool = False
) -> np.ndarray:
    """Haar-ish random orthogonal matrix via QR with sign fixing."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    if reflect != (np.linalg.det(q) < 0):
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
