"""Matrix-free space-time finite elements with a space-time multigrid solver."""

__version__ = "0.1.0"

from .driver import ProblemSpec, RunReport, march, shm_demo  # noqa: E402
from .estimator import SpaceTimeSolver  # noqa: E402

__all__ = ["ProblemSpec", "RunReport", "march", "shm_demo", "SpaceTimeSolver", "__version__"]
