"""Two-type annihilating random walks on the torus: exact simulation, kernels,
Gaussian limit fields, observables and an exact small-system oracle."""

from .dynamics import (
    AuditError,
    InteractionMode,
    SimulationState,
    advance,
    init_from_field,
    init_full_single_type,
    init_poisson_two_type,
    make_rng,
    run_with_snapshots,
    simulate_marginals,
)
from .lattice import (
    BlockCounts,
    Lattice,
    OccupancyField,
    Rectangle,
    block_counts,
    scaled_block,
    tile_boxes,
)

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "BlockCounts",
    "InteractionMode",
    "Lattice",
    "OccupancyField",
    "Rectangle",
    "SimulationState",
    "advance",
    "block_counts",
    "init_from_field",
    "init_full_single_type",
    "init_poisson_two_type",
    "make_rng",
    "run_with_snapshots",
    "scaled_block",
    "simulate_marginals",
    "tile_boxes",
]
