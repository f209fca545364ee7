"""Desk-scale verification harness.

Four families of checks, each returning a small report object with a
``table()`` method for delimited output:

* ``equivariance_suite``: randomized trials of the symmetry contract
  (invariant outputs, positions through O x + b, velocities through O),
  with a coordinate-leak negative control that must fail.
* ``hasse_equivalence``: restricted-mode forward vs an independent flat
  equivariant graph network on the augmented Hasse graph.
* ``kchain_experiment`` / ``prop3_case``: chain-pair classification grids
  probing how lifting changes separation power, plus the fixed
  disconnected-wiring negative case.
* ``runtime_scaling`` / ``molecular_convergence``: forward-cost slope on
  sparse and dense complexes, and a small regression task that must train.

Grid cells are independent and seeded individually, so reports are
reproducible at any thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import networkx as nx
import numpy as np

from .complexes import CombinatorialComplex, build_complex, make_cell
from .lifts import (
    expressivity_lift,
    graph_baseline,
    hasse_graph,
    k_chain_graphs,
    molecular_lift,
)
from .model import (
    MODES,
    ComplexSchema,
    EtnnConfig,
    EtnnModel,
    hasse_egnn_forward,
    infer_schema,
    init_model,
)
from .neighborhoods import (
    NeighborhoodCollection,
    assemble,
    graph_adjacency_entry,
    parse_neighborhood_list,
)
from .training import TrainConfig, evaluate, train

__all__ = [
    "BenchError",
    "EquivarianceReport",
    "GradientReport",
    "HasseReport",
    "ExpressivityReport",
    "Prop3Report",
    "ScalingReport",
    "ConvergenceReport",
    "random_model_complex",
    "bounded_degree_complex",
    "complete_adjacency_complex",
    "synthetic_molecules",
    "equivariance_suite",
    "gradient_suite",
    "hasse_equivalence",
    "kchain_experiment",
    "prop3_case",
    "runtime_scaling",
    "molecular_convergence",
    "KCHAIN_VARIANTS",
]


class BenchError(ValueError):
    """Bad harness arguments."""


_FULL_WIRING = parse_neighborhood_list("adj_up, adj_down, inc_up, inc_down")
_SPARSE_WIRING = parse_neighborhood_list("adj_up, inc_up, inc_down")

KCHAIN_VARIANTS = ("graph-only", "1a", "2a", "3a")


# -- complex generators ----------------------------------------------------------------


def _random_orthogonal(rng: np.random.Generator, n: int, reflect: bool) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    if reflect != (np.linalg.det(q) < 0):
        q[:, 0] = -q[:, 0]
    return q


def random_model_complex(
    rng: np.random.Generator,
    max_cells: int = 25,
    spatial_dim: int = 3,
    max_rank: int = 3,
    feature_width: int = 3,
    velocities: bool = False,
) -> tuple[CombinatorialComplex, NeighborhoodCollection]:
    """Random wired complex with at most ``max_cells`` cells.

    Rank is a nondecreasing function of cell size, so any family of random
    subsets satisfies the rank axiom by construction while same-rank nesting
    still occurs.  Every cell carries ``feature_width`` random features.
    """
    n = int(rng.integers(3, 8))
    positions = rng.normal(size=(n, spatial_dim))
    vel = rng.normal(size=(n, spatial_dim)) if velocities else None
    plateau = int(rng.integers(1, 3))

    def rank_of(size: int) -> int:
        return min(max_rank, (size - 2) // plateau + 1)

    cells = [
        make_cell((i,), 0, rng.normal(size=feature_width), ("node",)) for i in range(n)
    ]
    seen: set[tuple[int, ...]] = set()
    # one guaranteed rank-1 cell: draws whose higher cells all have size >= 3
    # can skip rank 1 entirely, leaving every wiring kind without a single pair
    edge = tuple(sorted(rng.choice(n, size=2, replace=False).tolist()))
    seen.add(edge)
    cells.append(make_cell(edge, 1, rng.normal(size=feature_width), ("lift",)))
    budget = min(max_cells - n, int(rng.integers(2, n + 4)))
    attempts = 0
    while len(seen) < budget and attempts < 10 * budget:
        attempts += 1
        size = int(rng.integers(2, min(n, 5) + 1))
        nodes = tuple(sorted(rng.choice(n, size=size, replace=False).tolist()))
        if nodes in seen:
            continue
        seen.add(nodes)
        cells.append(
            make_cell(nodes, rank_of(size), rng.normal(size=feature_width), ("lift",))
        )
    cc = build_complex(positions, cells, velocities=vel)
    return cc, assemble(cc, _FULL_WIRING)


def bounded_degree_complex(
    num_cells: int,
) -> tuple[CombinatorialComplex, NeighborhoodCollection]:
    """Path complex with edge 1-cells: 2n-1 cells, every degree at most 2.

    Pair count grows linearly with the cell count, which is the sparse
    regime of the scaling measurement.
    """
    if num_cells < 3:
        raise BenchError(f"need at least 3 cells, got {num_cells}")
    n = (num_cells + 1) // 2
    positions = np.stack([np.arange(n, dtype=np.float64), np.zeros(n)], axis=1)
    cells = [make_cell((i,), 0, np.ones(1), ("node",)) for i in range(n)]
    cells += [make_cell((i, i + 1), 1, np.ones(1), ("edge",)) for i in range(n - 1)]
    cc = build_complex(positions, cells, check_rank_order=False)
    return cc, assemble(cc, _SPARSE_WIRING)


def complete_adjacency_complex(
    num_cells: int,
) -> tuple[CombinatorialComplex, NeighborhoodCollection]:
    """Singletons under all-pairs adjacency: the quadratic worst case."""
    if num_cells < 2:
        raise BenchError(f"need at least 2 cells, got {num_cells}")
    n = num_cells
    rng = np.random.default_rng(n)
    positions = rng.normal(size=(n, 2))
    cells = [make_cell((i,), 0, np.ones(1), ("node",)) for i in range(n)]
    cc = build_complex(positions, cells, check_rank_order=False)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    entry = graph_adjacency_entry(n, edges)
    return cc, NeighborhoodCollection((entry,))


def synthetic_molecules(
    count: int = 20, seed: int = 0
) -> list[tuple[CombinatorialComplex, NeighborhoodCollection, np.ndarray]]:
    """Random molecule-shaped complexes with a smooth scalar target.

    Each sample is a spanning tree of 5..9 atoms plus up to two ring-closing
    bonds; ring cells cover the induced cycles.  Atom features are one-hot
    types, bonds carry an order, and the target mixes mean pairwise distance
    with type and bond statistics so it is learnable from both geometry and
    features.
    """
    if count < 1:
        raise BenchError(f"count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        natoms = int(rng.integers(5, 10))
        positions = 1.5 * rng.normal(size=(natoms, 3))
        bonds = [(int(rng.integers(0, i)), i) for i in range(1, natoms)]
        tree = nx.Graph(bonds)
        rings: list[tuple[int, ...]] = []
        bonded = {tuple(sorted(b)) for b in bonds}
        for _ in range(int(rng.integers(0, 3))):
            u, v = rng.choice(natoms, size=2, replace=False).tolist()
            if tuple(sorted((u, v))) in bonded:
                continue
            cycle = nx.shortest_path(tree, u, v)
            if len(cycle) < 3:
                continue
            bonds.append((u, v))
            bonded.add(tuple(sorted((u, v))))
            rings.append(tuple(sorted(cycle)))
        types = rng.integers(0, 4, size=natoms)
        atom_features = np.eye(4)[types]
        orders = rng.choice([1.0, 2.0], size=len(bonds))
        cc = molecular_lift(
            positions,
            bonds,
            rings=rings,
            atom_features=atom_features,
            bond_features=orders.reshape(-1, 1),
        )
        dists = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
        y = (
            dists.sum() / (natoms * (natoms - 1))
            + 0.3 * types.mean()
            + 0.2 * len(bonds) / natoms
            + 0.1 * orders.sum() / natoms
        )
        out.append((cc, assemble(cc, _FULL_WIRING), np.array([[y]])))
    return out


# -- equivariance suite ----------------------------------------------------------------


@dataclass(frozen=True)
class EquivarianceReport:
    trials: int
    tol: float
    failures: int
    max_prediction_err: float
    max_position_err: float
    max_velocity_err: float
    negative_control_err: float
    elapsed_seconds: float
    rows: tuple = ()

    @property
    def passed(self) -> bool:
        # the suite is broken, not passing, if the leaky model goes undetected
        return self.failures == 0 and self.negative_control_err > self.tol

    def table(self) -> tuple[list[str], list[list]]:
        header = ["trial", "mode", "prediction_err", "position_err", "velocity_err", "ok"]
        return header, [list(r) for r in self.rows]


def _default_model_factory(schema: ComplexSchema, mode: str, seed: int) -> EtnnModel:
    cfg = EtnnConfig(
        hidden=16,
        num_layers=2,
        invariants="dist:sum,centroid:mean",
        mode=mode,
        readout_level="complex",
    )
    return init_model(cfg, schema, seed=seed)


def _rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(expected).max(initial=0.0)))
    return float(np.abs(actual - expected).max(initial=0.0)) / scale


def _coordinate_leak_deviation(rng: np.random.Generator) -> float:
    """Max prediction change under rotation for a model fed raw coordinates.

    Node features are the positions themselves, so invariance must break;
    if it does not, the suite has lost its teeth.
    """
    worst = 0.0
    for _ in range(3):
        n = 6
        positions = rng.normal(size=(n, 3))
        cells = [make_cell((i,), 0, positions[i].copy(), ("node",)) for i in range(n)]
        cells.append(make_cell(tuple(range(n)), 1, np.ones(1), ("lift",)))
        cc = build_complex(positions, cells)
        col = assemble(cc, _FULL_WIRING)
        schema = infer_schema([(cc, col)])
        model = _default_model_factory(schema, "invariant", int(rng.integers(2**31)))
        base = model.forward(cc, col).prediction.value
        O = _random_orthogonal(rng, 3, reflect=False)
        # the "featurization mistake" being simulated: each complex feeds its
        # own coordinates in as features, so the rotated copy's features rotate
        moved_pos = positions @ O.T
        cells2 = [make_cell((i,), 0, moved_pos[i].copy(), ("node",)) for i in range(n)]
        cells2.append(make_cell(tuple(range(n)), 1, np.ones(1), ("lift",)))
        cc2 = build_complex(moved_pos, cells2)
        moved = model.forward(cc2, assemble(cc2, _FULL_WIRING)).prediction.value
        worst = max(worst, _rel_err(moved, base))
    return worst


def equivariance_suite(
    model_factory: Callable[[ComplexSchema, str, int], EtnnModel] | None = None,
    trials: int = 100,
    tol: float = 1e-5,
    seed: int = 0,
) -> EquivarianceReport:
    """Randomized symmetry trials over fresh complexes and models.

    Each trial draws a complex, a model (cycling through the three modes), a
    random orthogonal map with both determinant signs and a translation, then
    checks: predictions stable, output positions moved by exactly the same
    transform, velocities rotated without the shift.
    """
    if trials < 1:
        raise BenchError(f"trials must be positive, got {trials}")
    factory = model_factory or _default_model_factory
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rows = []
    failures = 0
    max_pred = max_pos = max_vel = 0.0
    for trial in range(trials):
        mode = MODES[trial % len(MODES)]
        cc, col = random_model_complex(
            rng, velocities=(mode == "equivariant_velocity")
        )
        model = factory(infer_schema([(cc, col)]), mode, int(rng.integers(2**31)))
        O = _random_orthogonal(rng, cc.positions.shape[1], reflect=bool(trial % 2))
        b = rng.normal(size=cc.positions.shape[1])
        res = model.forward(cc, col)
        vel2 = None if cc.velocities is None else cc.velocities @ O.T
        cc2 = build_complex(cc.positions @ O.T + b, list(cc.cells), velocities=vel2)
        res2 = model.forward(cc2, assemble(cc2, _FULL_WIRING))
        pred_err = _rel_err(res2.prediction.value, res.prediction.value)
        pos_err = vel_err = 0.0
        if mode != "invariant":
            pos_err = _rel_err(res2.positions, res.positions @ O.T + b)
        if mode == "equivariant_velocity":
            vel_err = _rel_err(res2.velocities, res.velocities @ O.T)
        ok = pred_err <= tol and pos_err <= tol and vel_err <= tol
        failures += 0 if ok else 1
        max_pred = max(max_pred, pred_err)
        max_pos = max(max_pos, pos_err)
        max_vel = max(max_vel, vel_err)
        rows.append((trial, mode, pred_err, pos_err, vel_err, ok))
    neg = _coordinate_leak_deviation(rng)
    return EquivarianceReport(
        trials=trials,
        tol=tol,
        failures=failures,
        max_prediction_err=max_pred,
        max_position_err=max_pos,
        max_velocity_err=max_vel,
        negative_control_err=neg,
        elapsed_seconds=time.perf_counter() - t0,
        rows=tuple(rows),
    )


# -- gradient correctness --------------------------------------------------------------


@dataclass(frozen=True)
class GradientReport:
    configs: int
    tol: float
    h: float
    max_rel_err: float
    failures: int
    elapsed_seconds: float
    rows: tuple = ()

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def table(self) -> tuple[list[str], list[list]]:
        header = ["config", "mode", "readout", "loss", "max_rel_err", "worst_param", "ok"]
        return header, [list(r) for r in self.rows]


_GRADIENT_CONFIGS: tuple[tuple[dict, str], ...] = (
    (dict(mode="invariant", readout_level="complex", invariants="dist:sum"), "mse"),
    (
        dict(
            mode="equivariant",
            readout_level="complex",
            invariants="dist:mean,centroid:mean",
        ),
        "mae",
    ),
    (
        dict(
            mode="equivariant_velocity", readout_level="complex", invariants="dist:sum"
        ),
        "huber",
    ),
    (
        dict(mode="equivariant", readout_level="node", invariants="hausdorff+norm"),
        "mse",
    ),
    (
        dict(
            mode="equivariant",
            readout_level="position_invariants",
            invariants="dist:min,dist:max",
        ),
        "mse",
    ),
    (
        dict(
            mode="equivariant",
            readout_level="complex",
            invariants="centroid:mean",
            restricted=True,
            feature_source="node_mean",
        ),
        "mse",
    ),
    (
        dict(
            mode="invariant",
            readout_level="node",
            invariants="dist:sum,centroid:mean+norm",
        ),
        "huber",
    ),
    (
        dict(
            mode="equivariant_velocity", readout_level="complex", invariants="dist:sum"
        ),
        "bce",
    ),
    (
        dict(
            mode="equivariant",
            readout_level="complex",
            invariants="dist:sum",
            position_diff_normalize=True,
        ),
        "mse",
    ),
    (dict(mode="invariant", readout_level="complex", invariants="hausdorff"), "mse"),
)


def gradient_suite(
    configs: int = 10, tol: float = 1e-4, h: float = 1e-5, seed: int = 0
) -> GradientReport:
    """Finite-difference validation of the full forward+loss gradient.

    Cycles through configurations covering every mode, readout level, the
    batch normalization path, restricted sharing, distance normalization and
    all four losses, on fresh random complexes.
    """
    from . import autodiff as ad

    if configs < 1:
        raise BenchError(f"configs must be positive, got {configs}")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rows = []
    failures = 0
    worst = 0.0
    for index in range(configs):
        kw, loss_name = _GRADIENT_CONFIGS[index % len(_GRADIENT_CONFIGS)]
        cc, col = random_model_complex(rng, velocities=True, feature_width=2)
        cfg = EtnnConfig(hidden=4, num_layers=1 + index % 2, **kw)
        model = init_model(cfg, infer_schema([(cc, col)]), seed=index)
        out_rows = cc.num_nodes if kw["readout_level"] == "node" else 1
        if loss_name == "bce":
            target = rng.integers(0, 2, size=(out_rows, 1)).astype(np.float64)
        else:
            target = rng.normal(size=(out_rows, 1))
        loss_fn = ad.LOSSES[loss_name]

        def fn():
            res = model.forward(cc, col, training=True)
            return loss_fn(res.prediction, target)

        report = ad.finite_diff_check(
            fn, model.store, h=h, tol=tol, max_coords_per_param=4, seed=index
        )
        worst = max(worst, report.max_rel_err)
        failures += 0 if report.passed else 1
        rows.append(
            (
                index,
                kw["mode"],
                kw["readout_level"],
                loss_name,
                report.max_rel_err,
                report.worst_param,
                report.passed,
            )
        )
    return GradientReport(
        configs=configs,
        tol=tol,
        h=h,
        max_rel_err=worst,
        failures=failures,
        elapsed_seconds=time.perf_counter() - t0,
        rows=tuple(rows),
    )


# -- Hasse-graph equivalence -----------------------------------------------------------


@dataclass(frozen=True)
class HasseReport:
    trials: int
    tol: float
    max_deviation: float
    negative_control_deviation: float
    elapsed_seconds: float
    rows: tuple = ()

    @property
    def passed(self) -> bool:
        return (
            self.max_deviation <= self.tol
            and self.negative_control_deviation > self.tol
        )

    def table(self) -> tuple[list[str], list[list]]:
        header = ["trial", "aggregator", "layers", "deviation"]
        return header, [list(r) for r in self.rows]


def _hasse_deviation(
    cc: CombinatorialComplex,
    col: NeighborhoodCollection,
    invariants: str,
    aggregator: str,
    num_layers: int,
    seed: int,
) -> float:
    schema = infer_schema([(cc, col)])
    model = init_model(
        EtnnConfig(
            hidden=8,
            num_layers=num_layers,
            invariants=invariants,
            mode="equivariant",
            feature_source="node_mean",
            restricted=True,
        ),
        schema,
        seed=seed,
    )
    res = model.forward(cc, col)
    hg = hasse_graph(cc, col, aggregator=aggregator)
    h_ref, pos_ref = hasse_egnn_forward(
        model, hg, model.full_feature_matrix(cc), num_layers
    )
    n = cc.num_nodes
    return max(
        _rel_err(res.hidden.value, h_ref), _rel_err(res.positions, pos_ref[:n])
    )


def hasse_equivalence(
    trials: int = 50, tol: float = 1e-9, max_cells: int = 30, seed: int = 0
) -> HasseReport:
    """Restricted-mode forward vs the flat network on the Hasse graph.

    Trial 0 uses a singleton-only complex, where both sides are literally the
    same edge-list network.  The rest are random complexes alternating the
    position aggregator (with the matching centroid invariant).  The negative
    control swaps in a raw pairwise-distance invariant, which does not factor
    through aggregated positions, and must push the deviation past ``tol``.
    """
    if trials < 1:
        raise BenchError(f"trials must be positive, got {trials}")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rows = []
    worst = 0.0
    for trial in range(trials):
        if trial == 0:
            positions = rng.normal(size=(5, 3))
            cells = [make_cell((i,), 0, np.ones(2), ("node",)) for i in range(5)]
            cc = build_complex(positions, cells)
            col = NeighborhoodCollection(
                (graph_adjacency_entry(5, [(i, i + 1) for i in range(4)]),)
            )
        else:
            cc, col = random_model_complex(rng, max_cells=max_cells)
        aggregator = "mean" if trial % 2 == 0 else "sum"
        dev = _hasse_deviation(
            cc,
            col,
            f"centroid:{aggregator}",
            aggregator,
            num_layers=1 + trial % 3,
            seed=int(rng.integers(2**31)),
        )
        worst = max(worst, dev)
        rows.append((trial, aggregator, 1 + trial % 3, dev))
    neg_cc, neg_col = random_model_complex(np.random.default_rng(seed + 1))
    neg = _hasse_deviation(neg_cc, neg_col, "dist:sum", "mean", 2, seed=seed)
    return HasseReport(
        trials=trials,
        tol=tol,
        max_deviation=worst,
        negative_control_deviation=neg,
        elapsed_seconds=time.perf_counter() - t0,
        rows=tuple(rows),
    )


# -- chain expressiveness --------------------------------------------------------------


@dataclass(frozen=True)
class ExpressivityReport:
    """Accuracy grid for one chain-lift variant: (layers, widths, seeds)."""

    variant: str
    k: int
    layer_counts: tuple[int, ...]
    widths: tuple[int, ...]
    seeds: int
    accuracies: np.ndarray

    def __post_init__(self):
        expected = (len(self.layer_counts), len(self.widths), self.seeds)
        if self.accuracies.shape != expected:
            raise BenchError(
                f"accuracy grid shape {self.accuracies.shape} != {expected}"
            )
        if np.any(self.accuracies < 0.0) or np.any(self.accuracies > 1.0):
            raise BenchError("accuracies must lie in [0, 1]")

    def _cell(self, layers: int, width: int) -> np.ndarray:
        return self.accuracies[
            self.layer_counts.index(layers), self.widths.index(width)
        ]

    def mean_accuracy(self, layers: int, width: int) -> float:
        return float(self._cell(layers, width).mean())

    def std_accuracy(self, layers: int, width: int) -> float:
        return float(self._cell(layers, width).std())

    def table(self) -> tuple[list[str], list[list]]:
        header = ["variant", "k", "layers", "width", "mean_accuracy", "std", "seeds"]
        rows = []
        for layers in self.layer_counts:
            for width in self.widths:
                rows.append(
                    [
                        self.variant,
                        self.k,
                        layers,
                        width,
                        round(self.mean_accuracy(layers, width), 4),
                        round(self.std_accuracy(layers, width), 4),
                        self.seeds,
                    ]
                )
        return header, rows


def _chain_pair(
    variant: str, k: int
) -> list[tuple[CombinatorialComplex, NeighborhoodCollection, np.ndarray]]:
    ga, gb = k_chain_graphs(k)
    samples = []
    for g, label in ((ga, 1.0), (gb, 0.0)):
        if variant == "graph-only":
            cc, col = graph_baseline(g)
        else:
            cc, col = expressivity_lift(g, variant)
        samples.append((cc, col, np.array([[label]])))
    return samples


def _chain_train_config(epochs: int, seed: int) -> TrainConfig:
    # both chains first collapse to the mean label; the pace of pulling the
    # two logits apart scales with the learning rate, so the probe needs a
    # hot rate and a horizon with room after the plateau
    return TrainConfig(
        epochs=epochs,
        batch_size=2,
        base_lr=1e-2,
        loss="bce",
        metric="accuracy",
        fractions=(1.0, 0.0, 0.0),
        standardize_targets=False,
        seed=seed,
    )


def _run_chain_cell(
    variant: str, k: int, layers: int, width: int, cell_seed: int, epochs: int
) -> float:
    samples = _chain_pair(variant, k)
    schema = infer_schema([(cc, col) for cc, col, _ in samples])
    # the un-lifted baseline classifies from pooled hidden states, the
    # standard protocol for flat equivariant graph networks; lifted variants
    # read out invariants of the final updated positions
    readout = "complex" if variant == "graph-only" else "position_invariants"
    cfg = EtnnConfig(
        hidden=width,
        num_layers=layers,
        invariants="dist:sum",
        mode="equivariant",
        readout_level=readout,
    )
    model = init_model(cfg, schema, seed=cell_seed)
    model, _ = train(model, samples, _chain_train_config(epochs, cell_seed))
    return evaluate(model, samples, "accuracy")


def _cell_seed(variant: str, layers: int, width: int, seed_index: int) -> int:
    return (
        100000 * KCHAIN_VARIANTS.index(variant)
        + 10000 * layers
        + 10 * width
        + seed_index
    )


def kchain_experiment(
    k: int = 4,
    variants: Sequence[str] = KCHAIN_VARIANTS,
    layer_counts: Sequence[int] = (1, 2),
    widths: Sequence[int] = (32, 64),
    seeds: int = 5,
    epochs: int = 1000,
    threads: int = 1,
) -> tuple[ExpressivityReport, ...]:
    """Chain-pair classification over the (variant, layers, width, seed) grid.

    Each cell trains a fresh classifier on the 2-sample dataset; accuracy per
    cell is 0, 0.5 or 1 and is averaged over seeds in the report.  Cells are
    independent and individually seeded, so results do not depend on
    ``threads``.
    """
    variants = tuple(variants)
    bad = [v for v in variants if v not in KCHAIN_VARIANTS]
    if bad:
        raise BenchError(f"unknown variants {bad}; choose from {KCHAIN_VARIANTS}")
    if seeds < 1 or epochs < 1:
        raise BenchError("seeds and epochs must be positive")
    layer_counts = tuple(int(l) for l in layer_counts)
    widths = tuple(int(w) for w in widths)

    jobs = [
        (variant, layers, width, si)
        for variant in variants
        for layers in layer_counts
        for width in widths
        for si in range(seeds)
    ]

    def run(job):
        variant, layers, width, si = job
        return _run_chain_cell(
            variant, k, layers, width, _cell_seed(variant, layers, width, si), epochs
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    accs = dict(zip(jobs, results))
    reports = []
    for variant in variants:
        grid = np.array(
            [
                [
                    [accs[(variant, layers, width, si)] for si in range(seeds)]
                    for width in widths
                ]
                for layers in layer_counts
            ]
        )
        reports.append(
            ExpressivityReport(
                variant=variant,
                k=k,
                layer_counts=layer_counts,
                widths=widths,
                seeds=seeds,
                accuracies=grid,
            )
        )
    return tuple(reports)


@dataclass(frozen=True)
class Prop3Report:
    k: int
    depths: tuple[int, ...]
    disconnected: bool
    mean_accuracies: tuple[float, ...]
    threshold: float
    elapsed_seconds: float

    @property
    def passed(self) -> bool:
        return self.disconnected and all(
            a <= self.threshold for a in self.mean_accuracies
        )

    def table(self) -> tuple[list[str], list[list]]:
        header = ["depth", "mean_accuracy", "disconnected"]
        rows = [
            [d, round(a, 4), self.disconnected]
            for d, a in zip(self.depths, self.mean_accuracies)
        ]
        return header, rows


def prop3_case(
    k: int = 4,
    depths: Sequence[int] = (1, 2, 3),
    seeds: int = 3,
    width: int = 32,
    epochs: int = 500,
    threshold: float = 0.65,
) -> Prop3Report:
    """The fixed negative case: disjoint-cell lift wired by upper adjacency only.

    The resulting Hasse graph splits into components that each miss one chain
    end, every component pair stays congruent between the two graphs, and no
    depth of message passing can separate them.  The report records both the
    disconnection and the chance-level accuracies.
    """
    t0 = time.perf_counter()
    ga, gb = k_chain_graphs(k)
    adj_up_only = parse_neighborhood_list("adj_up")
    samples = []
    for g, label in ((ga, 1.0), (gb, 0.0)):
        cc, _ = expressivity_lift(g, "3a")
        samples.append((cc, assemble(cc, adj_up_only), np.array([[label]])))

    hg = hasse_graph(samples[0][0], samples[0][1])
    undirected = nx.Graph()
    undirected.add_nodes_from(range(hg.num_nodes))
    undirected.add_edges_from(map(tuple, hg.edges))
    disconnected = nx.number_connected_components(undirected) > 1

    schema = infer_schema([(cc, col) for cc, col, _ in samples])
    means = []
    for depth in depths:
        accs = []
        for si in range(seeds):
            cell_seed = 900000 + 10000 * depth + si
            cfg = EtnnConfig(
                hidden=width,
                num_layers=depth,
                invariants="dist:sum",
                mode="equivariant",
                readout_level="position_invariants",
            )
            model = init_model(cfg, schema, seed=cell_seed)
            model, _ = train(model, samples, _chain_train_config(epochs, cell_seed))
            accs.append(evaluate(model, samples, "accuracy"))
        means.append(float(np.mean(accs)))
    return Prop3Report(
        k=k,
        depths=tuple(depths),
        disconnected=disconnected,
        mean_accuracies=tuple(means),
        threshold=threshold,
        elapsed_seconds=time.perf_counter() - t0,
    )


# -- runtime scaling -------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingReport:
    regime: str
    rows: tuple  # (cells, pairs, seconds) per size
    slope: float | None
    elapsed_seconds: float

    def table(self) -> tuple[list[str], list[list]]:
        header = ["cells", "pairs", "forward_seconds"]
        return header, [list(r) for r in self.rows]


_SPARSE_COUNTS = (100, 316, 1000, 3162, 10000)
_DENSE_COUNTS = (50, 100, 200, 400)


def runtime_scaling(
    cell_counts: Sequence[int] | None = None,
    repeats: int = 3,
    regime: str = "sparse",
    seed: int = 0,
) -> ScalingReport:
    """Mean forward time per cell count, with the fitted log-log slope.

    ``sparse`` uses bounded-degree path complexes (pairs linear in cells);
    ``dense`` uses complete same-rank adjacency (pairs quadratic).  A single
    size yields a timing table with ``slope=None``.
    """
    if regime not in ("sparse", "dense"):
        raise BenchError(f"regime must be 'sparse' or 'dense', got {regime!r}")
    if repeats < 1:
        raise BenchError(f"repeats must be positive, got {repeats}")
    counts = tuple(cell_counts) if cell_counts is not None else (
        _SPARSE_COUNTS if regime == "sparse" else _DENSE_COUNTS
    )
    if any(c < 3 for c in counts):
        raise BenchError(f"cell counts must be at least 3, got {counts}")
    build = bounded_degree_complex if regime == "sparse" else complete_adjacency_complex
    t0 = time.perf_counter()
    rows = []
    for count in sorted(counts):
        cc, col = build(count)
        schema = infer_schema([(cc, col)])
        cfg = EtnnConfig(
            hidden=16,
            num_layers=1,
            invariants="dist:sum",
            mode="invariant",
            readout_level="complex",
        )
        model = init_model(cfg, schema, seed=seed)
        model.forward(cc, col)  # warmup excluded from timing
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            model.forward(cc, col)
            times.append(time.perf_counter() - start)
        rows.append((cc.num_cells, col.total_pairs, float(np.mean(times))))
    slope = None
    sizes = {r[0] for r in rows}
    if len(sizes) >= 2:
        logc = np.log([r[0] for r in rows])
        logt = np.log([r[2] for r in rows])
        slope = float(np.polyfit(logc, logt, 1)[0])
    return ScalingReport(
        regime=regime,
        rows=tuple(rows),
        slope=slope,
        elapsed_seconds=time.perf_counter() - t0,
    )


# -- molecular regression --------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    epochs: int
    first_epoch_loss: float
    best_loss: float
    deterministic: bool
    elapsed_seconds: float
    rows: tuple = ()

    @property
    def loss_ratio(self) -> float:
        return self.best_loss / self.first_epoch_loss

    @property
    def passed(self) -> bool:
        return self.deterministic and self.loss_ratio < 0.1

    def table(self) -> tuple[list[str], list[list]]:
        header = ["epoch", "train_loss"]
        return header, [list(r) for r in self.rows]


def _molecular_setup(samples: int, seed: int):
    dataset = synthetic_molecules(samples, seed)
    schema = infer_schema([(cc, col) for cc, col, _ in dataset])
    cfg = EtnnConfig(
        hidden=32,
        num_layers=2,
        invariants="dist:sum,centroid:mean+norm",
        mode="invariant",
        readout_level="complex",
    )
    return dataset, schema, cfg


def _molecular_losses(samples: int, epochs: int, seed: int) -> list[float]:
    dataset, schema, cfg = _molecular_setup(samples, seed)
    model = init_model(cfg, schema, seed=seed)
    tc = TrainConfig(
        epochs=epochs,
        batch_size=4,
        base_lr=1e-2,
        loss="mse",
        metric="mae",
        fractions=(1.0, 0.0, 0.0),
        seed=seed,
    )
    _, history = train(model, dataset, tc)
    return [row["train_loss"] for row in history.rows]


def molecular_convergence(
    samples: int = 20, epochs: int = 200, seed: int = 0
) -> ConvergenceReport:
    """Small regression run that must shrink the loss by 10x.

    Also replays a short prefix twice to confirm the whole pipeline is
    deterministic for a fixed seed.
    """
    if samples < 2 or epochs < 2:
        raise BenchError("need at least 2 samples and 2 epochs")
    t0 = time.perf_counter()
    losses = _molecular_losses(samples, epochs, seed)
    prefix = min(3, epochs)
    deterministic = (
        _molecular_losses(samples, prefix, seed)
        == _molecular_losses(samples, prefix, seed)
    )
    return ConvergenceReport(
        epochs=epochs,
        first_epoch_loss=losses[0],
        best_loss=min(losses),
        deterministic=deterministic,
        elapsed_seconds=time.perf_counter() - t0,
        rows=tuple((i + 1, loss) for i, loss in enumerate(losses)),
    )
