"""Usage-competence ranking of agents from minimal signed telemetry."""

__version__ = "0.1.0"

from .kernels import UtilityWeights, build_kernels  # noqa: E402
from .rank import RankHyperparams, fixed_point, fuse, rank_pipeline  # noqa: E402
from .telemetry import CallerReport, CalleeAck, TelemetryStore  # noqa: E402

__all__ = [
    "CallerReport",
    "CalleeAck",
    "RankHyperparams",
    "TelemetryStore",
    "UtilityWeights",
    "build_kernels",
    "fixed_point",
    "fuse",
    "rank_pipeline",
]
