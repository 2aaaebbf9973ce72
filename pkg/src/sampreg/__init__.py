"""3D rigid image registration accelerated by probabilistic pixel subsampling.

The similarity metric (NMI over a partial-volume joint histogram) is evaluated
on a small random pixel subset drawn per iteration.  Per-voxel selection
probabilities are a convex mixture of uniform-random and gradient-magnitude
proportional sampling; the mixing weight of each pyramid level is learned
off-line by particle swarm search over empirical target registration error.
"""

from sampreg.transform import RigidParams
from sampreg.volume import Volume, Pyramid, load_volume, save_volume
from sampreg.sampler import SamplingDistribution
from sampreg.optimizer import OptimizerConfig, RegistrationResult, register

__version__ = "0.1.0"

__all__ = [
    "RigidParams",
    "Volume",
    "Pyramid",
    "load_volume",
    "save_volume",
    "SamplingDistribution",
    "OptimizerConfig",
    "RegistrationResult",
    "register",
    "__version__",
]
