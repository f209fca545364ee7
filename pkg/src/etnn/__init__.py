"""E(n)-equivariant message passing on combinatorial complexes.

The package is organised bottom-up:

- :mod:`etnn.complexes` -- cells, combinatorial complexes, validation, JSON interchange.
- :mod:`etnn.neighborhoods` -- incidence / adjacency / spatial neighborhood functions
  materialised as directed (receiver, sender) pair lists.
- :mod:`etnn.lifts` -- graph-to-complex lifts (cliques, rings, molecules, hypergraphs),
  virtual cells, chain-pair constructions and the augmented Hasse graph.
- :mod:`etnn.invariants` -- geometric invariants attached to neighborhood pairs.
- :mod:`etnn.autodiff` -- a small reverse-mode engine over float64 arrays, plus Adam,
  cosine schedule, gradient clipping and checkpoint IO.
- :mod:`etnn.model` -- the equivariant message-passing network itself.
- :mod:`etnn.training` -- splits, losses, the training loop and metrics.
- :mod:`etnn.bench` -- equivariance / equivalence / expressiveness / scaling harnesses.
- :mod:`etnn.cli` -- the ``etnn`` command.
"""

from etnn.complexes import Cell, CombinatorialComplex, build_complex
from etnn.model import ComplexSchema, EtnnConfig, EtnnModel, infer_schema, init_model

__all__ = [
    "Cell",
    "CombinatorialComplex",
    "build_complex",
    "ComplexSchema",
    "EtnnConfig",
    "EtnnModel",
    "infer_schema",
    "init_model",
]

__version__ = "0.1.0"
