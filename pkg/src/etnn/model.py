"""Equivariant message passing over combinatorial complexes.

The model embeds per-rank cell features, runs message-passing layers in which
every (neighborhood, receiver rank, sender rank) block owns its message MLP,
aggregates within a block by a gated sum and across blocks by fixed-order
concatenation, and finishes with rank-wise readout.  Geometry enters only
through invariant scalars of cell pairs; position and velocity updates re-emit
along node-difference vectors, which is what makes the whole map E(n)
equivariant.

A restricted mode (one shared message MLP, ungated plain-sum aggregation,
shared update MLP and embedder) realises the homogeneous setting in which the
model coincides with a plain equivariant graph network run on the complex's
Hasse graph; :func:`hasse_egnn_forward` is that independent reference path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, Mlp, ParamStore
from .complexes import TAG_ORDER, CombinatorialComplex
from .invariants import (
    InvariantSpec,
    RunningNormalizer,
    entry_invariants,
    entry_invariants_with_grad,
    parse_invariant_spec,
)
from .lifts import HasseGraph
from .neighborhoods import (
    NeighborhoodCollection,
    NeighborhoodSpec,
    entry_key,
    parse_neighborhood_spec,
    schema_blocks,
)

__all__ = [
    "ModelError",
    "ConfigMismatch",
    "ShapeMismatch",
    "ModeMismatch",
    "LevelMismatch",
    "MODES",
    "READOUT_LEVELS",
    "EtnnConfig",
    "ComplexSchema",
    "infer_schema",
    "EtnnModel",
    "init_model",
    "ForwardResult",
    "hasse_egnn_forward",
]

MODES = ("invariant", "equivariant", "equivariant_velocity")
READOUT_LEVELS = ("complex", "node", "position_invariants")
_SOURCE_PARTS = ("own", "node_mean", "tags")


class ModelError(ValueError):
    pass


class ConfigMismatch(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class ModeMismatch(ModelError):
    pass


class LevelMismatch(ModelError):
    pass


def _normalize_source(source: str) -> tuple[str, ...]:
    parts = []
    for raw in source.split("+"):
        part = raw.strip()
        if part == "membership_tags":
            part = "tags"
        if part not in _SOURCE_PARTS:
            raise ConfigMismatch(
                f"feature source {raw!r} not in {_SOURCE_PARTS} or combinations"
            )
        parts.append(part)
    if not parts:
        raise ConfigMismatch("empty feature source")
    return tuple(parts)


@dataclass(frozen=True)
class EtnnConfig:
    """Model hyperparameters.

    ``feature_source`` selects what each cell feeds its embedder: its own
    features, the mean of its member nodes' features, a tag-membership vector,
    or "+"-joined combinations; a mapping gives one choice per rank.
    ``c_policy`` scales position updates: "reciprocal_count" divides by each
    node's contributing-pair count, a float is used as a fixed constant.
    ``readout_level`` "position_invariants" pools the pairwise geometric
    invariants of the final positions instead of hidden states (the readout
    used by the chain-separation experiments).  ``restricted`` switches to the
    homogeneous setting (shared message/update MLPs and embedder, plain sums).
    """

    hidden: int
    num_layers: int
    invariants: str = "dist:sum"
    mode: str = "invariant"
    readout_level: str = "complex"
    out_width: int = 1
    feature_source: str | tuple[tuple[int, str], ...] = "own"
    position_diff_normalize: bool = False
    c_policy: str | float = "reciprocal_count"
    include_virtual: bool = False
    restricted: bool = False
    normalizer_momentum: float = 0.1

    def __post_init__(self):
        if self.hidden <= 0:
            raise ConfigMismatch(f"hidden width must be positive, got {self.hidden}")
        if self.num_layers < 1:
            raise ConfigMismatch(f"need at least 1 layer, got {self.num_layers}")
        if self.mode not in MODES:
            raise ConfigMismatch(f"mode {self.mode!r} not in {MODES}")
        if self.readout_level not in READOUT_LEVELS:
            raise ConfigMismatch(
                f"readout level {self.readout_level!r} not in {READOUT_LEVELS}"
            )
        if self.out_width < 1:
            raise ConfigMismatch("out_width must be at least 1")
        if isinstance(self.feature_source, Mapping):
            object.__setattr__(
                self,
                "feature_source",
                tuple(sorted((int(r), s) for r, s in self.feature_source.items())),
            )
        if isinstance(self.feature_source, str):
            _normalize_source(self.feature_source)
        else:
            for _, s in self.feature_source:
                _normalize_source(s)
        if not isinstance(self.c_policy, str):
            object.__setattr__(self, "c_policy", float(self.c_policy))
        elif self.c_policy != "reciprocal_count":
            raise ConfigMismatch(
                f"c_policy must be 'reciprocal_count' or a number, got {self.c_policy!r}"
            )

    def source_for(self, rank: int) -> tuple[str, ...]:
        if isinstance(self.feature_source, str):
            return _normalize_source(self.feature_source)
        table = dict(self.feature_source)
        if rank not in table:
            raise ConfigMismatch(f"no feature source configured for rank {rank}")
        return _normalize_source(table[rank])


@dataclass(frozen=True)
class ComplexSchema:
    """The dataset-level shape a model is allocated against: which ranks
    exist, their raw feature widths, and the neighborhood specs in wiring
    order.  Any complex whose ranks and widths agree with (a subset of) the
    schema can be fed to a model built from it.

    ``wiring_ranks`` lists ranks occupied only by virtual cells: they carry no
    state or readout but extend the block lattice, since a virtual cell can
    make real cells adjacent through itself."""

    spatial_dim: int
    ranks: tuple[int, ...]
    feature_widths: tuple[int, ...]
    neighborhoods: tuple[str, ...]
    wiring_ranks: tuple[int, ...] = ()

    @property
    def all_ranks(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.ranks) | set(self.wiring_ranks)))

    def width_of(self, rank: int) -> int:
        return self.feature_widths[self.ranks.index(rank)]


def _sample_rank_info(
    cc: CombinatorialComplex, include_virtual: bool
) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for cid, cell in enumerate(cc.cells):
        if not include_virtual and "virtual" in cell.tags:
            continue
        out.setdefault(cell.rank, []).append(cid)
    return out


def infer_schema(
    samples: Sequence[tuple[CombinatorialComplex, NeighborhoodCollection]],
    include_virtual: bool = False,
) -> ComplexSchema:
    """Scan (complex, collection) pairs into a schema.

    Ranks and neighborhood specs are unioned (specs keep first-seen order);
    feature widths must agree wherever a rank recurs.
    """
    if not samples:
        raise ConfigMismatch("cannot infer a schema from zero samples")
    spatial_dim = None
    widths: dict[int, int] = {}
    virtual_ranks: set[int] = set()
    specs: list[str] = []
    for cc, collection in samples:
        if spatial_dim is None:
            spatial_dim = cc.spatial_dim
        elif cc.spatial_dim != spatial_dim:
            raise ConfigMismatch(
                f"mixed spatial dims: {spatial_dim} vs {cc.spatial_dim}"
            )
        for rank, ids in _sample_rank_info(cc, include_virtual).items():
            w = int(cc.cells[ids[0]].features.shape[0])
            for cid in ids:
                if int(cc.cells[cid].features.shape[0]) != w:
                    raise ConfigMismatch(
                        f"rank {rank} has mixed feature widths within one complex"
                    )
            if rank in widths and widths[rank] != w:
                raise ConfigMismatch(
                    f"rank {rank} width {w} disagrees with {widths[rank]}"
                )
            widths.setdefault(rank, w)
        if not include_virtual:
            virtual_ranks.update(
                cell.rank for cell in cc.cells if "virtual" in cell.tags
            )
        for entry in collection.entries:
            text = _format_spec(entry.spec)
            if text not in specs:
                specs.append(text)
    ranks = tuple(sorted(widths))
    return ComplexSchema(
        spatial_dim=int(spatial_dim),
        ranks=ranks,
        feature_widths=tuple(widths[r] for r in ranks),
        neighborhoods=tuple(specs),
        wiring_ranks=tuple(sorted(virtual_ranks - set(ranks))),
    )


def _format_spec(spec: NeighborhoodSpec) -> str:
    from .neighborhoods import format_neighborhood_spec

    return format_neighborhood_spec(spec)


def _parse_schema_spec(text: str) -> NeighborhoodSpec:
    # graph_adj carries an edge list, so the grammar cannot round-trip it;
    # rebuild the spec object directly from its formatted name
    if text.startswith("graph_adj"):
        rank_filter = None
        if "@rank=" in text:
            rank_filter = int(text.rpartition("@rank=")[2])
        return NeighborhoodSpec(kind="graph_adj", rank_filter=rank_filter)
    return parse_neighborhood_spec(text)


# -- model ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    prediction: DiffNode
    hidden: DiffNode
    positions: np.ndarray
    velocities: np.ndarray | None


@dataclass(frozen=True)
class _EntryInfo:
    key: str
    receiver_rank: int
    sender_rank: int
    pairs: np.ndarray


class _Geometry:
    """Per-forward bookkeeping: filtered pairs, per-rank cell ids, members."""

    def __init__(self, model: "EtnnModel", cc, collection):
        cfg = model.config
        self.members = [np.asarray(cell.nodes, dtype=np.int64) for cell in cc.cells]
        rank_info = _sample_rank_info(cc, cfg.include_virtual)
        for rank in rank_info:
            if rank not in model.schema.ranks:
                raise ConfigMismatch(
                    f"complex has rank {rank} outside schema ranks {model.schema.ranks}"
                )
        for rank, ids in rank_info.items():
            w = int(cc.cells[ids[0]].features.shape[0])
            if w != model.schema.width_of(rank):
                raise ShapeMismatch(
                    f"rank {rank} feature width {w} != schema "
                    f"{model.schema.width_of(rank)}"
                )
        self.rank_ids = {
            r: np.asarray(rank_info.get(r, []), dtype=np.int64)
            for r in model.schema.ranks
        }
        virtual = {
            cid
            for cid, cell in enumerate(cc.cells)
            if not cfg.include_virtual and "virtual" in cell.tags
        }
        self.entries: list[_EntryInfo] = []
        for entry in collection.entries:
            pairs = entry.pairs
            if virtual and pairs.shape[0]:
                mask = ~(
                    np.isin(pairs[:, 0], list(virtual))
                    | np.isin(pairs[:, 1], list(virtual))
                )
                pairs = pairs[mask]
            if pairs.shape[0] == 0:
                # nothing to exchange, so no parameters needed; this also lets
                # a virtual-free schema accept complexes whose extra entries
                # touch only virtual cells
                continue
            if entry.key not in model.message_keys:
                raise ConfigMismatch(f"no message parameters for entry {entry.key!r}")
            self.entries.append(
                _EntryInfo(entry.key, entry.receiver_rank, entry.sender_rank, pairs)
            )
        self.by_rank: dict[int, list[int]] = {}
        for i, info in enumerate(self.entries):
            self.by_rank.setdefault(info.receiver_rank, []).append(i)
        # position updates draw on singleton-to-singleton pairs only
        self.pos_entry_ids = [
            i
            for i, info in enumerate(self.entries)
            if info.receiver_rank == 0 and info.sender_rank == 0
        ]
        counts = np.zeros(cc.num_nodes, dtype=np.int64)
        for i in self.pos_entry_ids:
            counts += np.bincount(
                self.entries[i].pairs[:, 0], minlength=cc.num_nodes
            )
        self.pos_counts = counts


class EtnnModel:
    """See the module docstring; construct with :func:`init_model`."""

    def __init__(self, config: EtnnConfig, schema: ComplexSchema, seed: int = 0):
        self.config = config
        self.schema = schema
        self.inv_spec: InvariantSpec = parse_invariant_spec(config.invariants)
        if config.readout_level == "position_invariants" and self.inv_spec.arity == 0:
            raise ConfigMismatch(
                "position-invariant readout needs a non-empty invariant spec"
            )
        self.store = ParamStore(seed)
        self.normalizer = (
            RunningNormalizer(self.inv_spec.arity, momentum=config.normalizer_momentum)
            if self.inv_spec.normalize
            else None
        )
        h = config.hidden

        self.embed_widths = {
            r: max(self._source_width(r), 1) for r in schema.ranks
        }
        if config.restricted:
            uniform = set(self.embed_widths.values())
            if len(uniform) > 1:
                raise ConfigMismatch(
                    "restricted mode shares one embedder: all ranks must have "
                    f"equal input widths, got {self.embed_widths}"
                )

        # block layout: schema spec order, then (receiver, sender) rank order;
        # enumerated over all ranks so virtual-induced wiring gets parameters
        self.block_list: list[tuple[str, int, int]] = []
        for text in schema.neighborhoods:
            spec = _parse_schema_spec(text)
            for r, s in schema_blocks(spec, schema.all_ranks):
                self.block_list.append((entry_key(spec, r, s), r, s))
        self.message_keys = tuple(k for k, _, _ in self.block_list)
        self.recv_keys = {
            r: [k for k, rr, _ in self.block_list if rr == r] for r in schema.ranks
        }

        msg_in = 2 * h + self.inv_spec.arity
        self.embedders: dict[int, Mlp] = {}
        if config.restricted:
            shared_embed = Mlp(
                self.store, "embed", next(iter(self.embed_widths.values())), (h,)
            )
            for r in schema.ranks:
                self.embedders[r] = shared_embed
        else:
            for r in schema.ranks:
                self.embedders[r] = Mlp(
                    self.store, f"embed/r{r}", self.embed_widths[r], (h,)
                )

        self.psis: dict[str, Mlp] = {}
        self.gates: dict[str, Mlp] = {}
        if config.restricted:
            shared_psi = Mlp(self.store, "psi", msg_in, (h, h), final_activation=True)
            for key in self.message_keys:
                self.psis[key] = shared_psi
        else:
            for key in self.message_keys:
                self.psis[key] = Mlp(
                    self.store, f"psi/{key}", msg_in, (h, h), final_activation=True
                )
                self.gates[key] = Mlp(self.store, f"gate/{key}", h, (1,))

        self.betas: dict[int, Mlp] = {}
        if config.restricted:
            shared_beta = Mlp(self.store, "beta", 2 * h, (h, h))
            for r in schema.ranks:
                self.betas[r] = shared_beta
        else:
            for r in schema.ranks:
                self.betas[r] = Mlp(
                    self.store, f"beta/r{r}", h * (1 + len(self.recv_keys[r])), (h, h)
                )

        self.xi = (
            Mlp(self.store, "xi", h, (h, 1)) if config.mode != "invariant" else None
        )
        self.zeta = (
            Mlp(self.store, "zeta", h, (h, 1))
            if config.mode == "equivariant_velocity"
            else None
        )

        self.pre_pools = {
            r: Mlp(self.store, f"pre_pool/r{r}", h, (h, h)) for r in schema.ranks
        }
        if config.readout_level == "complex":
            post_in = h * len(schema.ranks)
        elif config.readout_level == "node":
            post_in = h
        else:
            post_in = self.inv_spec.arity * len(self.message_keys)
        self.post_pool = Mlp(self.store, "post_pool", post_in, (h, config.out_width))

    # -- features ---------------------------------------------------------------

    def _source_width(self, rank: int) -> int:
        width = 0
        for part in self.config.source_for(rank):
            if part == "own":
                width += self.schema.width_of(rank)
            elif part == "node_mean":
                width += self.schema.width_of(0) if 0 in self.schema.ranks else 0
            else:
                width += len(TAG_ORDER)
        return width

    def input_features(self, cc: CombinatorialComplex, rank: int, ids) -> np.ndarray:
        """Raw embedder input rows for the given cells of one rank."""
        blocks: list[np.ndarray] = []
        for part in self.config.source_for(rank):
            if part == "own":
                blocks.append(
                    np.stack([cc.cells[int(i)].features for i in ids])
                    if len(ids)
                    else np.zeros((0, self.schema.width_of(rank)))
                )
            elif part == "node_mean":
                w0 = self.schema.width_of(0) if 0 in self.schema.ranks else 0
                rows = np.zeros((len(ids), w0))
                for row, cid in enumerate(ids):
                    nodes = cc.cells[int(cid)].nodes
                    rows[row] = np.mean(
                        [cc.cells[int(z)].features for z in nodes], axis=0
                    )
                blocks.append(rows)
            else:
                rows = np.zeros((len(ids), len(TAG_ORDER)))
                for row, cid in enumerate(ids):
                    for tag in cc.cells[int(cid)].tags:
                        rows[row, TAG_ORDER.index(tag)] = 1.0
                blocks.append(rows)
        out = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(ids), 0))
        if out.shape[1] == 0:
            out = np.ones((len(ids), 1))
        return out

    def full_feature_matrix(self, cc: CombinatorialComplex) -> np.ndarray:
        """Embedder inputs for every cell, ordered by cell id.  Requires all
        ranks to share one input width (as in restricted mode)."""
        widths = {self.embed_widths[r] for r in self.schema.ranks}
        if len(widths) != 1:
            raise ConfigMismatch(
                f"cell feature matrix needs uniform widths, got {self.embed_widths}"
            )
        out = np.zeros((cc.num_cells, widths.pop()))
        for r, ids in _sample_rank_info(cc, self.config.include_virtual).items():
            out[np.asarray(ids)] = self.input_features(cc, r, ids)
        return out

    def _embed(self, cc, geometry: _Geometry) -> DiffNode:
        total = cc.num_cells
        h = self.config.hidden
        H = None
        for r in self.schema.ranks:
            ids = geometry.rank_ids[r]
            if ids.size == 0:
                continue
            rows = ad.constant(self.input_features(cc, r, ids))
            part = ad.scatter_add_rows(self.embedders[r](rows), ids, total)
            H = part if H is None else ad.add(H, part)
        if H is None:
            H = ad.constant(np.zeros((total, h)))
        return H

    # -- invariants --------------------------------------------------------------

    def _invariant_rows(
        self, X, geometry: _Geometry, training: bool, update_stats: bool
    ) -> dict[int, DiffNode]:
        """Invariant feature rows per entry index, batch-normalised per
        receiver rank when the spec asks for it.

        ``X`` is either a plain array (fixed positions) or a DiffNode carrying
        gradients from earlier position updates; in the latter case rows enter
        the graph through a custom op whose pullback scatters into ``X``.
        """
        if self.inv_spec.arity == 0:
            return {}
        out: dict[int, DiffNode] = {}
        for rank, entry_ids in geometry.by_rank.items():
            pair_blocks = [geometry.entries[i].pairs for i in entry_ids]
            cat = np.concatenate(pair_blocks, axis=0)
            if isinstance(X, DiffNode) and X.requires_grad:
                values, pullback = entry_invariants_with_grad(
                    X.value, geometry.members, cat, self.inv_spec
                )

                def bwd(g, _pb=pullback, _X=X):
                    _X.add_grad(_pb(g))

                rows = ad.custom(values, (X,), bwd)
            else:
                base = X.value if isinstance(X, DiffNode) else X
                rows = ad.constant(
                    entry_invariants(base, geometry.members, cat, self.inv_spec)
                )
            if self.normalizer is not None:
                rows = self._normalize(rank, rows, training, update_stats)
            offset = 0
            for i, block in zip(entry_ids, pair_blocks):
                idx = np.arange(offset, offset + block.shape[0])
                out[i] = ad.gather_rows(rows, idx)
                offset += block.shape[0]
        return out

    def _normalize(
        self, rank: int, rows: DiffNode, training: bool, update_stats: bool
    ) -> DiffNode:
        eps = self.normalizer.eps
        if training:
            count = rows.value.shape[0]
            mean = ad.scale(ad.sum_rows(rows), 1.0 / count)
            centered = ad.sub(rows, mean)
            var = ad.scale(ad.sum_rows(ad.mul(centered, centered)), 1.0 / count)
            if update_stats:
                self.normalizer.update(rank, rows.value)
            denom = ad.elem_pow(ad.add(var, ad.constant(np.full(var.shape, eps))), -0.5)
            return ad.mul(centered, denom)
        mean, var = self.normalizer.current(rank)
        return ad.scale(ad.sub(rows, ad.constant(mean)), 1.0 / np.sqrt(var + eps))

    # -- layers -------------------------------------------------------------------

    def _messages(self, H, inv_rows, geometry: _Geometry):
        agg: dict[str, DiffNode] = {}
        msgs: dict[int, DiffNode] = {}
        total = H.value.shape[0]
        for i, info in enumerate(geometry.entries):
            h_x = ad.gather_rows(H, info.pairs[:, 0])
            h_y = ad.gather_rows(H, info.pairs[:, 1])
            parts = [h_x, h_y]
            if self.inv_spec.arity:
                parts.append(inv_rows[i])
            m = self.psis[info.key](ad.rowwise_concat(parts))
            msgs[i] = m
            if self.config.restricted:
                weighted = m
            else:
                weighted = ad.mul(ad.sigmoid(self.gates[info.key](m)), m)
            block = ad.scatter_add_rows(weighted, info.pairs[:, 0], total)
            agg[info.key] = (
                block if info.key not in agg else ad.add(agg[info.key], block)
            )
        return agg, msgs

    def _update_hidden(self, H, agg, geometry: _Geometry) -> DiffNode:
        total = H.value.shape[0]
        h = self.config.hidden
        out = H
        if self.config.restricted:
            flat = None
            for block in agg.values():
                flat = block if flat is None else ad.add(flat, block)
        for r in self.schema.ranks:
            ids = geometry.rank_ids[r]
            if ids.size == 0:
                continue
            h_r = ad.gather_rows(H, ids)
            if self.config.restricted:
                neigh = (
                    ad.gather_rows(flat, ids)
                    if flat is not None
                    else ad.constant(np.zeros((ids.size, h)))
                )
                blocks = [h_r, neigh]
            else:
                blocks = [h_r]
                for key in self.recv_keys[r]:
                    if key in agg:
                        blocks.append(ad.gather_rows(agg[key], ids))
                    else:
                        blocks.append(ad.constant(np.zeros((ids.size, h))))
            update = self.betas[r](ad.rowwise_concat(blocks))
            out = ad.add(out, ad.scatter_add_rows(update, ids, total))
        return out

    def _position_delta(self, X, msgs, geometry: _Geometry) -> DiffNode | None:
        if not geometry.pos_entry_ids:
            return None
        num_nodes = geometry.pos_counts.shape[0]
        total = None
        for i in geometry.pos_entry_ids:
            pairs = geometry.entries[i].pairs
            diff = ad.sub(
                ad.gather_rows(X, pairs[:, 0]), ad.gather_rows(X, pairs[:, 1])
            )
            if self.config.position_diff_normalize:
                ones = ad.constant(np.ones((pairs.shape[0], 1)))
                diff = ad.mul(diff, ad.elem_pow(ad.add(ad.row_norm(diff), ones), -1.0))
            weighted = ad.mul(self.xi(msgs[i]), diff)
            part = ad.scatter_add_rows(weighted, pairs[:, 0], num_nodes)
            total = part if total is None else ad.add(total, part)
        if isinstance(self.config.c_policy, float):
            return ad.scale(total, self.config.c_policy)
        counts = geometry.pos_counts
        factor = np.zeros((num_nodes, 1))
        nonzero = counts > 0
        factor[nonzero, 0] = 1.0 / counts[nonzero]
        return ad.scale(total, factor)

    # -- forward -------------------------------------------------------------------

    def forward(
        self,
        cc: CombinatorialComplex,
        collection: NeighborhoodCollection,
        training: bool = False,
    ) -> ForwardResult:
        cfg = self.config
        if cc.spatial_dim != self.schema.spatial_dim:
            raise ShapeMismatch(
                f"spatial dim {cc.spatial_dim} != schema {self.schema.spatial_dim}"
            )
        if cfg.mode == "equivariant_velocity" and cc.velocities is None:
            raise ModeMismatch("equivariant_velocity needs velocities on the complex")
        geometry = _Geometry(self, cc, collection)
        H = self._embed(cc, geometry)

        equivariant = cfg.mode != "invariant"
        X = DiffNode(cc.positions.copy(), requires_grad=False)
        V = (
            DiffNode(cc.velocities.copy(), requires_grad=False)
            if cfg.mode == "equivariant_velocity"
            else None
        )

        static_inv = None
        for layer in range(cfg.num_layers):
            if equivariant or static_inv is None:
                inv_rows = self._invariant_rows(
                    X, geometry, training, update_stats=(layer == 0 or equivariant)
                )
                if not equivariant:
                    static_inv = inv_rows
            else:
                inv_rows = static_inv
            agg, msgs = self._messages(H, inv_rows, geometry)
            H = self._update_hidden(H, agg, geometry)
            if equivariant:
                delta = self._position_delta(X, msgs, geometry)
                if cfg.mode == "equivariant_velocity":
                    gate = self.zeta(ad.gather_rows(H, np.arange(cc.num_nodes)))
                    V = ad.mul(gate, V)
                    if delta is not None:
                        V = ad.add(V, delta)
                    X = ad.add(X, V)
                elif delta is not None:
                    X = ad.add(X, delta)

        prediction = self._readout(H, X, geometry, training)
        return ForwardResult(
            prediction=prediction,
            hidden=H,
            positions=X.value.copy(),
            velocities=None if V is None else V.value.copy(),
        )

    def _readout(self, H, X, geometry: _Geometry, training: bool) -> DiffNode:
        cfg = self.config
        h = cfg.hidden
        if cfg.readout_level == "complex":
            blocks = []
            for r in self.schema.ranks:
                ids = geometry.rank_ids[r]
                if ids.size:
                    rows = self.pre_pools[r](ad.gather_rows(H, ids))
                    pooled = ad.scatter_add_rows(
                        rows, np.zeros(ids.size, dtype=np.int64), 1
                    )
                else:
                    pooled = ad.constant(np.zeros((1, h)))
                blocks.append(pooled)
            return self.post_pool(ad.rowwise_concat(blocks))
        if cfg.readout_level == "node":
            ids = geometry.rank_ids.get(0, np.zeros(0, dtype=np.int64))
            if ids.size == 0:
                raise LevelMismatch("node-level readout needs rank-0 cells")
            return self.post_pool(self.pre_pools[0](ad.gather_rows(H, ids)))
        # position_invariants: pool each block's invariant rows over the final
        # positions, concatenate in block order, classify
        arity = self.inv_spec.arity
        by_key: dict[str, DiffNode] = {}
        rows_by_entry = self._final_invariant_rows(X, geometry)
        for i, info in enumerate(geometry.entries):
            pooled = ad.scatter_add_rows(
                rows_by_entry[i], np.zeros(info.pairs.shape[0], dtype=np.int64), 1
            )
            by_key[info.key] = (
                pooled if info.key not in by_key else ad.add(by_key[info.key], pooled)
            )
        blocks = [
            by_key.get(key, ad.constant(np.zeros((1, arity))))
            for key in self.message_keys
        ]
        return self.post_pool(ad.rowwise_concat(blocks))

    def _final_invariant_rows(self, X, geometry: _Geometry) -> dict[int, DiffNode]:
        out: dict[int, DiffNode] = {}
        for i, info in enumerate(geometry.entries):
            if isinstance(X, DiffNode) and X.requires_grad:
                values, pullback = entry_invariants_with_grad(
                    X.value, geometry.members, info.pairs, self.inv_spec
                )

                def bwd(g, _pb=pullback, _X=X):
                    _X.add_grad(_pb(g))

                out[i] = ad.custom(values, (X,), bwd)
            else:
                base = X.value if isinstance(X, DiffNode) else X
                out[i] = ad.constant(
                    entry_invariants(base, geometry.members, info.pairs, self.inv_spec)
                )
        return out

    # -- persistence ---------------------------------------------------------------

    def normalizer_state(self) -> dict[str, np.ndarray]:
        if self.normalizer is None:
            return {}
        return {f"normalizer/{k}": v for k, v in self.normalizer.state().items()}

    def load_normalizer_state(self, extras: dict[str, np.ndarray]) -> None:
        if self.normalizer is None:
            return
        state = {
            k.removeprefix("normalizer/"): v
            for k, v in extras.items()
            if k.startswith("normalizer/")
        }
        if state:
            self.normalizer.load_state(state)


def init_model(config: EtnnConfig, schema: ComplexSchema, seed: int = 0) -> EtnnModel:
    return EtnnModel(config, schema, seed)


# -- reference path: plain EGNN over the Hasse graph ------------------------------------


def hasse_egnn_forward(
    model: EtnnModel,
    hg: HasseGraph,
    features: np.ndarray,
    num_layers: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain equivariant graph network on a Hasse graph, sharing the model's
    (restricted-mode) parameters.

    Flat edge-list message passing: one message per directed Hasse edge,
    plain-sum aggregation, single update MLP.  Positions follow the two-case
    rule: cells that are original nodes move by the usual weighted-difference
    update over node-to-node edges; every higher cell's position is re-derived
    from the already-updated node positions with the Hasse aggregator.
    Returns (hidden states, positions); the independent reference the
    restricted model is checked against.
    """
    if not model.config.restricted:
        raise ConfigMismatch("the Hasse reference path shares restricted-mode MLPs")
    psi = model.psis[model.message_keys[0]]
    beta = model.betas[model.schema.ranks[0]]
    embed = model.embedders[model.schema.ranks[0]]
    xi = model.xi

    h_states = embed(ad.constant(features)).value
    pos = hg.positions.copy()
    n_hasse = hg.num_nodes
    recv = hg.edges[:, 0]
    send = hg.edges[:, 1]
    is_node = hg.cell_ranks == 0
    node_edge = is_node[recv] & is_node[send]
    num_original = int(np.sum(is_node))
    counts = np.bincount(recv[node_edge], minlength=n_hasse)

    for _ in range(num_layers):
        dist = np.sqrt(
            np.sum((pos[recv] - pos[send]) ** 2, axis=1, keepdims=True)
        )
        m_in = np.concatenate([h_states[recv], h_states[send], dist], axis=1)
        m = psi(ad.constant(m_in)).value
        agg = np.zeros((n_hasse, h_states.shape[1]))
        np.add.at(agg, recv, m)
        h_states = h_states + beta(
            ad.constant(np.concatenate([h_states, agg], axis=1))
        ).value
        if xi is not None:
            weights = xi(ad.constant(m[node_edge])).value
            diff = pos[recv[node_edge]] - pos[send[node_edge]]
            if model.config.position_diff_normalize:
                norms = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
                diff = diff / (norms + 1.0)
            delta = np.zeros_like(pos)
            np.add.at(delta, recv[node_edge], weights * diff)
            if isinstance(model.config.c_policy, float):
                factor = np.full((n_hasse, 1), model.config.c_policy)
            else:
                factor = np.zeros((n_hasse, 1))
                nz = counts > 0
                factor[nz, 0] = 1.0 / counts[nz]
            pos = pos + factor * delta
            # higher cells take the aggregate of their (updated) member nodes
            for cid in range(n_hasse):
                if not is_node[cid]:
                    block = pos[list(hg.member_lists[cid])]
                    pos[cid] = (
                        block.mean(axis=0)
                        if hg.aggregator == "mean"
                        else block.sum(axis=0)
                    )
    return h_states, pos
