import logging
import os
from dotenv import load_dotenv
from pydantic_settings import BaseSettings
from typing import Dict, List

# Load .env file
load_dotenv()

class Settings(BaseSettings):
    PROJECT_NAME: str = "SlotOffer Engine"
    API_V1_STR: str = "/api/v1"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Instance limits
    MAX_SLOT_TYPES: int = 16
    LAMBDA_TOL: float = 1e-12

    # Dynamic programming
    VALUE_TOL: float = 1e-9
    CELL_BUDGET: int = 2 ** 27
    EXHAUSTIVE_MAX_TYPES: int = 6

    # Fluid LP
    LP_VARIABLE_BUDGET: int = 10 ** 6
    LP_FEASIBILITY_TOL: float = 1e-8
    LP_PIVOT_TOL: float = 1e-11
    LP_MAX_PIVOTS: int = 200_000

    # Simulation
    DEFAULT_REPLICATIONS: int = 1000
    DEFAULT_SEED: int = 20240611
    SIM_BLOCK_SIZE: int = 1000

    # Multi-day rolling horizon
    MULTIDAY_WINDOW: int = 15
    MULTIDAY_DEMAND: int = 30
    MULTIDAY_TOTAL_DAYS: int = 1200
    MULTIDAY_WARMUP: int = 200
    MULTIDAY_FLEXIBILITY: List[int] = [1, 2, 3, 4]
    POISSON_CAP_FACTOR: int = 10

    # Experiment tables
    TABLE_HORIZONS: List[int] = [20, 30, 40, 50]
    CAPACITY_FLOOR_FRACTION: float = 0.2

    # Arrival mixes per instance family, three columns per table
    LAMBDA_GRIDS: Dict[str, List[List[float]]] = {
        "N": [[1 / 2, 1 / 2], [1 / 3, 2 / 3], [1 / 4, 3 / 4]],
        "N_SEQ": [[1 / 2, 1 / 2], [1 / 4, 3 / 4], [3 / 4, 1 / 4]],
        "W": [[1 / 3, 1 / 3, 1 / 3], [1 / 5, 1 / 2, 3 / 10], [1 / 10, 3 / 10, 3 / 5]],
        "M": [[1 / 2, 1 / 2], [1 / 3, 2 / 3], [1 / 4, 3 / 4]],
        "M_PLUS_1": [[9 / 20, 9 / 20, 1 / 10], [2 / 5, 2 / 5, 1 / 5], [3 / 10, 3 / 10, 2 / 5]],
    }

    # Random instance study: J -> list of (N, instance count, scenario cap)
    RANDOM_STUDY: Dict[int, List[List[int]]] = {
        3: [[10, 100, 36], [20, 80, 120], [30, 40, 253], [40, 10, 435]],
        4: [[10, 100, 84], [20, 10, 455], [30, 10, 83]],
        5: [[10, 100, 126], [20, 10, 126]],
    }
    RANDOM_FLOOR_FRACTION: float = 0.1
    RANDOM_SEED: int = 7

    class Config:
        case_sensitive = True

settings = Settings()


def configure_logging(level: str = None):
    """Installs a single stream handler on the root logger (idempotent)."""
    level = (level or settings.LOG_LEVEL).upper()
    root = logging.getLogger()
    if not any(getattr(h, "_slot_offer", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._slot_offer = True
        root.addHandler(handler)
    root.setLevel(level)
