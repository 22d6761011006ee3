"""Indoor place recognition from colorized point clouds.

Pipeline: synthetic RGB-D room generation -> voxel/normal preprocessing ->
cluster-based descriptor network (trained with circle + triplet losses on
mined triplets) -> descriptor index -> Recall@K evaluation.
"""

from poco.errors import ContractViolation, FormatError, PocoError, TrainingAborted

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "FormatError",
    "PocoError",
    "TrainingAborted",
    "__version__",
]
