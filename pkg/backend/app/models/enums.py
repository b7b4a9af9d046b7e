"""
Enumerations shared by engines, workers and the API.
"""
import enum


class ExperimentMode(str, enum.Enum):
    """Harness run modes."""
    TRAIN = "train"
    EVAL = "eval"
    BENCH = "bench"
    STRESS = "stress"


class AgentMode(str, enum.Enum):
    """How the SNMPC parameters (kappa, N_u) are chosen."""
    STATIC = "static"
    ADAPTIVE = "adaptive"
    ADAPT_KAPPA_ONLY = "adapt_kappa_only"
    ADAPT_UPH_ONLY = "adapt_uph_only"
    REPLAY = "replay"
    UPH_HALVING = "uph_halving"
    NOMINAL = "nominal"


class DisturbanceRegime(str, enum.Enum):
    """Disturbance scenarios of the benchmark."""
    NONE = "none"
    TABLE3 = "table3"
    TABLE3_MISMATCHED = "table3_mismatched"
    EQ8_STRESS = "eq8_stress"


class SolverStatus(str, enum.Enum):
    """Outcome of one SNMPC solve."""
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


class EpisodeStatus(str, enum.Enum):
    """Episode lifecycle state."""
    RUNNING = "running"
    TERMINATED_LAP_COMPLETE = "terminated_lap_complete"
    TRUNCATED_INFEASIBLE = "truncated_infeasible"


class RunStatus(str, enum.Enum):
    """Background run state exposed by the API."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
