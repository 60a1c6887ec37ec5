import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# Base paths
BASE_DIR = Path(__file__).resolve().parent.parent
OUTPUT_DIR = Path(os.getenv("HYBRID_OUTPUT_DIR", str(BASE_DIR / "output")))
SCENARIOS_DIR = BASE_DIR / "scenarios"

# Logging
LOG_LEVEL = os.getenv("HYBRID_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Batch fan-out
WORKERS = int(os.getenv("HYBRID_WORKERS", "2"))

# Integration and event location
TOL_EVENT = float(os.getenv("HYBRID_TOL_EVENT", "1e-10"))
RTOL = float(os.getenv("HYBRID_RTOL", "1e-10"))
ATOL = float(os.getenv("HYBRID_ATOL", "1e-12"))
SAMPLE_DT = float(os.getenv("HYBRID_SAMPLE_DT", "1e-3"))
INTEGRATOR_METHOD = "DOP853"

# Termination guards
MAX_JUMPS = int(os.getenv("HYBRID_MAX_JUMPS", "10000"))
ZENO_WINDOW = float(os.getenv("HYBRID_ZENO_WINDOW", "1e-9"))
ESCAPE_BOUND = float(os.getenv("HYBRID_ESCAPE_BOUND", "1e9"))

# Certificate checks
TOL_PSD = float(os.getenv("HYBRID_TOL_PSD", "1e-9"))
TIE_BAND = 1e-12
EIG_GUARD_BAND = 1e-12
HYSTERESIS = 1e-9
SAFETY_FACTOR = 0.99
FLOW_RATIO_TOL = 0.05
JUMP_REL_TOL = 1e-8
ASSUMPTION_SAMPLES = 10_000

# Distance evaluation
KBAR_MAX = 3
ENUMERATION_DEPTH = 8
PROJECTION_TOL = 1e-12

# Example geometry
TRUNCATION_RADIUS = 0.01

# Output
CSV_DIGITS = 17
DEFAULT_SEED = 0
FIGURES_VERSION = "1"

# Exit codes
EXIT_CODES = {
    "ok": 0,
    "config_error": 2,
    "certificate_infeasible": 3,
    "abnormal_termination": 4,
}

# Progress steps
PROGRESS_STEPS = {
    "loading": (0, 5),
    "certifying": (5, 30),
    "simulating": (30, 60),
    "tracking": (60, 85),
    "writing": (85, 99),
    "completed": (100, 100),
}
