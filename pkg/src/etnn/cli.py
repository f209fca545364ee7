"""The ``etnn`` command.

Subcommands: ``lift`` (graph JSON to complex JSON), ``train`` / ``eval``
(complex datasets with a TOML config), ``bench kchain`` / ``bench scaling``
(experiment reports as CSV plus rendered figures), ``check`` (property
suites, exit 0 iff all pass) and ``inspect`` (cell and degree statistics).

Commands that produce artifacts write a run manifest first, then land every
file atomically, so an interrupted run leaves either the manifest alone or
complete outputs.  Numeric experiment settings live in config files; flags
carry only paths, seeds and small overrides.  ``ETNN_SEED`` supplies the
seed when neither a flag nor the config does.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from . import autodiff as ad
from .bench import (
    BenchError,
    KCHAIN_VARIANTS,
    equivariance_suite,
    gradient_suite,
    hasse_equivalence,
    kchain_experiment,
    runtime_scaling,
)
from .complexes import ComplexError, CombinatorialComplex, complex_to_json, load_complex
from .invariants import InvariantError
from .lifts import LiftError, apply_recipe
from .model import EtnnConfig, ModelError, infer_schema, init_model
from .neighborhoods import NeighborhoodError, assemble, parse_neighborhood_list
from .report import (
    atomic_write_text,
    format_table,
    render_expressivity_figure,
    render_history_figure,
    render_scaling_figure,
    write_csv,
)
from .training import TrainConfig, TrainingError, evaluate, make_splits, train

DEFAULT_WIRING = "adj_up, adj_down, inc_up, inc_down"

_USER_ERRORS = (
    BenchError,
    ComplexError,
    InvariantError,
    LiftError,
    ModelError,
    NeighborhoodError,
    TrainingError,
)


class CliError(ValueError):
    """Bad input surfaced to the user with a nonzero exit."""


# -- manifest and shared plumbing ------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance record written before any heavy work starts."""

    command: str
    arguments: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    started: str = ""
    version: str = __version__

    def write(self, path) -> None:
        doc = asdict(self)
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_seed(flag_seed: int | None, config_seed: int | None = None) -> int:
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return config_seed
    env = os.environ.get("ETNN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"ETNN_SEED must be an integer, got {env!r}")
    return 0


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")


def _read_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise CliError(f"no such config: {path}")
    except tomli.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}")


def _model_config(doc: dict) -> tuple[EtnnConfig, str]:
    section = dict(doc.get("model", {}))
    wiring = section.pop("neighborhoods", DEFAULT_WIRING)
    source = section.get("feature_source")
    if isinstance(source, dict):
        try:
            section["feature_source"] = {int(k): v for k, v in source.items()}
        except ValueError:
            raise CliError("feature_source table keys must be integer ranks")
    try:
        cfg = EtnnConfig(**section)
    except TypeError as exc:
        raise CliError(f"bad [model] section: {exc}")
    return cfg, wiring


def _train_config(doc: dict, seed: int, checkpoint_path: str | None) -> TrainConfig:
    section = dict(doc.get("train", {}))
    section.pop("seed", None)
    if "fractions" in section:
        section["fractions"] = tuple(section["fractions"])
    # TOML has no null: a non-positive clip_norm disables clipping
    if section.get("clip_norm") is not None and section.get("clip_norm", 1) <= 0:
        section["clip_norm"] = None
    try:
        return TrainConfig(seed=seed, checkpoint_path=checkpoint_path, **section)
    except TypeError as exc:
        raise CliError(f"bad [train] section: {exc}")


def _rank_summary(cc: CombinatorialComplex) -> str:
    counts: dict[int, int] = {}
    for cell in cc.cells:
        counts[cell.rank] = counts.get(cell.rank, 0) + 1
    return " ".join(f"rank{r}:{counts[r]}" for r in sorted(counts))


def _load_dataset(path: str, wiring: str):
    """Rows of (complex, collection, target) plus the node-level flag.

    A directory holds one complex JSON per sample and an ``index.json``
    listing files (targets come from the index or from the complex itself).
    A single file is one complex; node-level targets make it transductive.
    """
    specs = parse_neighborhood_list(wiring)

    def to_rows(cc):
        col = assemble(cc, specs)
        return cc, col

    p = Path(path)
    if p.is_dir():
        index = _read_json(str(p / "index.json"))
        samples = index.get("samples")
        if not isinstance(samples, list) or not samples:
            raise CliError(f"{p / 'index.json'} needs a non-empty 'samples' list")
        rows = []
        for rec in samples:
            if "file" not in rec:
                raise CliError("every index.json sample needs a 'file'")
            cc = load_complex(str(p / rec["file"]))
            if "target" in rec:
                target = np.asarray(rec["target"], dtype=np.float64).reshape(1, -1)
            elif cc.target_values is not None and cc.target_level == "complex":
                target = cc.target_values.reshape(1, -1)
            else:
                raise CliError(f"sample {rec['file']} has no target")
            cc, col = to_rows(cc)
            rows.append((cc, col, target))
        return rows, False
    if not p.exists():
        raise CliError(f"no such dataset: {path}")
    cc = load_complex(str(p))
    if cc.target_values is None:
        raise CliError(f"{path} carries no targets")
    node_level = cc.target_level == "node"
    values = cc.target_values
    target = values.reshape(-1, 1) if values.ndim == 1 else np.asarray(values)
    if not node_level:
        target = target.reshape(1, -1)
    cc, col = to_rows(cc)
    return [(cc, col, target)], node_level


def _history_rows(history) -> list[list]:
    return [
        [r["epoch"], r["lr"], r["train_loss"], r["val_metric"]] for r in history.rows
    ]


# -- subcommands -----------------------------------------------------------------------


def cmd_lift(args) -> int:
    doc = _read_json(args.graph)
    manifest = RunManifest(
        command="lift",
        arguments={"graph": args.graph, "recipe": args.recipe, "out": args.out},
        seed=None,
        inputs=[args.graph],
        artifacts=[args.out],
        started=_now(),
    )
    manifest.write(args.manifest or args.out + ".manifest.json")
    cc = apply_recipe(doc, args.recipe)
    atomic_write_text(args.out, complex_to_json(cc))
    print(f"{args.out}: {cc.num_cells} cells ({_rank_summary(cc)})")
    return 0


def cmd_train(args) -> int:
    doc = _read_config(args.config)
    cfg, wiring = _model_config(doc)
    seed = _resolve_seed(args.seed, doc.get("train", {}).get("seed"))
    dataset, _ = _load_dataset(args.data, wiring)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "checkpoint.npz"
    history_csv = out / "history.csv"
    history_png = out / "history.png"
    manifest = RunManifest(
        command="train",
        arguments={"config": args.config, "data": args.data, "resume": args.resume},
        seed=seed,
        inputs=[args.config, args.data] + ([args.resume] if args.resume else []),
        artifacts=[str(checkpoint), str(history_csv), str(history_png)],
        started=_now(),
    )
    manifest.write(out / "manifest.json")

    schema = infer_schema(
        [(cc, col) for cc, col, _ in dataset], include_virtual=cfg.include_virtual
    )
    model = init_model(cfg, schema, seed=seed)
    if args.resume:
        extras = ad.load_checkpoint(model.store, args.resume)
        model.load_normalizer_state(extras)
    tc = _train_config(doc, seed, str(checkpoint))
    model, history = train(model, dataset, tc)

    write_csv(history_csv, ["epoch", "lr", "train_loss", "val_metric"], _history_rows(history))
    render_history_figure(history, history_png)
    last = history.rows[-1]
    best = "" if history.best_val is None else f", best val {history.best_val:.6g} at epoch {history.best_epoch}"
    print(
        f"trained {len(dataset)} sample(s) for {len(history.rows)} epochs; "
        f"final loss {last['train_loss']:.6g}{best}"
    )
    print(f"wrote {checkpoint}, {history_csv}, {history_png}")
    return 0


def cmd_eval(args) -> int:
    doc = _read_config(args.config)
    cfg, wiring = _model_config(doc)
    seed = _resolve_seed(args.seed, doc.get("train", {}).get("seed"))
    dataset, node_level = _load_dataset(args.data, wiring)
    schema = infer_schema(
        [(cc, col) for cc, col, _ in dataset], include_virtual=cfg.include_virtual
    )
    model = init_model(cfg, schema, seed=seed)
    extras = ad.load_checkpoint(model.store, args.checkpoint)
    model.load_normalizer_state(extras)
    target_stats = None
    if "target_mean" in extras:
        target_stats = (extras["target_mean"], extras["target_std"])

    metric = args.metric or doc.get("train", {}).get("metric", "mae")
    num_items = dataset[0][0].num_nodes if node_level else len(dataset)
    fractions = tuple(doc.get("train", {}).get("fractions", (0.7, 0.15, 0.15)))
    if args.split == "all":
        mask = None
        count = num_items
    else:
        splits = make_splits(num_items, fractions, seed=seed)
        mask = getattr(splits, args.split)
        count = len(mask)
        if count == 0:
            raise CliError(f"split {args.split!r} is empty under fractions {fractions}")
    value = evaluate(model, dataset, metric, mask=mask, target_stats=target_stats)
    unit = "nodes" if node_level else "samples"
    print(f"{metric}={value:.6g} ({args.split}, {count} {unit})")
    return 0


def _bench_kchain(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = tuple(v.strip() for v in args.variants.split(","))
    layer_counts = tuple(int(x) for x in args.layers.split(","))
    widths = tuple(int(x) for x in args.widths.split(","))
    csv_path = out / "kchain.csv"
    png_path = out / "kchain.png"
    manifest = RunManifest(
        command="bench kchain",
        arguments={
            "k": args.k,
            "variants": variants,
            "layers": layer_counts,
            "widths": widths,
            "seeds": args.seeds,
            "epochs": args.epochs,
            "threads": args.threads,
        },
        seed=_resolve_seed(args.seed),
        artifacts=[str(csv_path), str(png_path)],
        started=_now(),
    )
    manifest.write(out / "manifest.json")

    reports = kchain_experiment(
        k=args.k,
        variants=variants,
        layer_counts=layer_counts,
        widths=widths,
        seeds=args.seeds,
        epochs=args.epochs,
        threads=args.threads,
    )
    header = None
    rows = []
    for report in reports:
        header, variant_rows = report.table()
        rows.extend(variant_rows)
    write_csv(csv_path, header, rows)
    render_expressivity_figure(reports, png_path)
    print(format_table(header, rows))
    print(f"wrote {csv_path}, {png_path}")
    return 0


def _bench_scaling(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regimes = ("sparse", "dense") if args.regime == "both" else (args.regime,)
    counts = None
    if args.counts:
        counts = tuple(int(x) for x in args.counts.split(","))
    csv_path = out / "scaling.csv"
    png_path = out / "scaling.png"
    manifest = RunManifest(
        command="bench scaling",
        arguments={"regime": args.regime, "counts": counts, "repeats": args.repeats},
        seed=_resolve_seed(args.seed),
        artifacts=[str(csv_path), str(png_path)],
        started=_now(),
    )
    manifest.write(out / "manifest.json")

    reports = [
        runtime_scaling(
            cell_counts=counts,
            repeats=args.repeats,
            regime=regime,
            seed=_resolve_seed(args.seed),
        )
        for regime in regimes
    ]
    rows = []
    for report in reports:
        _, regime_rows = report.table()
        rows.extend([report.regime, *r] for r in regime_rows)
    header = ["regime", "cells", "pairs", "forward_seconds"]
    write_csv(csv_path, header, rows)
    render_scaling_figure(reports, png_path)
    print(format_table(header, rows))
    for report in reports:
        slope = "n/a" if report.slope is None else f"{report.slope:.3f}"
        print(f"{report.regime}: fitted log-log slope {slope}")
    print(f"wrote {csv_path}, {png_path}")
    return 0


def cmd_bench(args) -> int:
    if args.experiment == "kchain":
        return _bench_kchain(args)
    return _bench_scaling(args)


def cmd_check(args) -> int:
    seed = _resolve_seed(args.seed)
    eq = equivariance_suite(trials=args.trials, seed=seed)
    print(
        f"equivariance: {'PASS' if eq.passed else 'FAIL'} "
        f"(trials={eq.trials}, max_err={max(eq.max_prediction_err, eq.max_position_err, eq.max_velocity_err):.2e}, "
        f"leak detected at {eq.negative_control_err:.2e})"
    )
    ha = hasse_equivalence(trials=args.hasse_trials, seed=seed)
    print(
        f"hasse equivalence: {'PASS' if ha.passed else 'FAIL'} "
        f"(trials={ha.trials}, max_dev={ha.max_deviation:.2e}, "
        f"control dev {ha.negative_control_deviation:.2e})"
    )
    gr = gradient_suite(configs=args.grad_configs, seed=seed)
    print(
        f"gradients: {'PASS' if gr.passed else 'FAIL'} "
        f"(configs={gr.configs}, max_rel_err={gr.max_rel_err:.2e})"
    )
    return 0 if (eq.passed and ha.passed and gr.passed) else 1


def cmd_inspect(args) -> int:
    cc = load_complex(args.complex)
    print(_rank_summary(cc))
    col = assemble(cc, parse_neighborhood_list(args.neighborhoods))
    for entry in col.entries:
        indeg = np.zeros(cc.num_cells, dtype=np.int64)
        if len(entry.pairs):
            indeg = np.bincount(entry.pairs[:, 0], minlength=cc.num_cells)
        hist = np.bincount(indeg)
        parts = " ".join(f"{d}x{hist[d]}" for d in range(len(hist)) if hist[d])
        print(f"{entry.key}: pairs={len(entry.pairs)} indegree {parts}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etnn",
        description="Equivariant message passing on combinatorial complexes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lift", help="lift a graph JSON file to a complex JSON file")
    p.add_argument("--graph", required=True, help="input graph JSON")
    p.add_argument("--recipe", required=True, help="e.g. 'graph+edges' or 'clique:2+virtual'")
    p.add_argument("--out", required=True, help="output complex JSON")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("train", help="train a model on a complex dataset")
    p.add_argument("--data", required=True, help="dataset directory or single complex JSON")
    p.add_argument("--config", required=True, help="TOML file with [model] and [train]")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--metric", choices=("mae", "rmse", "r2", "accuracy"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run an experiment and write CSV + figure")
    bench_sub = p.add_subparsers(dest="experiment", required=True)

    pk = bench_sub.add_parser("kchain", help="chain-pair classification grid")
    pk.add_argument("--k", type=int, default=4)
    pk.add_argument("--variants", default=",".join(KCHAIN_VARIANTS))
    pk.add_argument("--layers", default="1,2")
    pk.add_argument("--widths", default="32,64")
    pk.add_argument("--seeds", type=int, default=5)
    pk.add_argument("--epochs", type=int, default=1000)
    pk.add_argument("--threads", type=int, default=1)
    pk.add_argument("--out-dir", required=True)
    pk.add_argument("--seed", type=int)
    pk.set_defaults(func=cmd_bench)

    ps = bench_sub.add_parser("scaling", help="forward-time scaling measurement")
    ps.add_argument("--regime", default="both", choices=("sparse", "dense", "both"))
    ps.add_argument("--counts", help="comma-separated cell counts (default per regime)")
    ps.add_argument("--repeats", type=int, default=3)
    ps.add_argument("--out-dir", required=True)
    ps.add_argument("--seed", type=int)
    ps.set_defaults(func=cmd_bench)

    p = sub.add_parser("check", help="equivariance, Hasse and gradient suites")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--hasse-trials", type=int, default=50)
    p.add_argument("--grad-configs", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("inspect", help="per-rank cell counts and degree histograms")
    p.add_argument("complex", help="complex JSON file")
    p.add_argument("--neighborhoods", default=DEFAULT_WIRING)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _USER_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
