# Project configuration for the AcrE toolkit
# Values can be overridden through environment variables or a .env file in
# the project root.
import os
from pathlib import Path

from dotenv import load_dotenv

PROJECT_ROOT = Path(__file__).resolve().parent.parent
load_dotenv(dotenv_path=PROJECT_ROOT / ".env")

# Output
OUTPUT_ROOT = os.getenv("ACRE_OUTPUT_DIR", str(PROJECT_ROOT / "runs"))

# Logging
LOG_LEVEL = os.getenv("ACRE_LOG_LEVEL", "INFO").upper()
LOG_FILE_NAME = "acre.log"

# Numerics
FLOAT_WIDTH = int(os.getenv("ACRE_FLOAT_WIDTH", "64"))  # 64 or 32
DEBUG_CHECKS = os.getenv("ACRE_DEBUG", "0").lower() in ("1", "true", "yes")  # NaN/Inf check after every op

# Grid search over the validation set
GRID_SEARCH_SPACE = {
    "learning_rate": [1e-3, 5e-4],
    "dropout": [0.1, 0.2, 0.3],
    "rates": [[1, 2, 4], [2, 3, 5]],
    "label_smoothing": [0.0, 0.1],
}
GRID_SEARCH_EPOCHS = int(os.getenv("ACRE_GRID_SEARCH_EPOCHS", "30"))

# Benchmark statistics (#R, #E, triples per split)
DATASET_STATS = {
    "DB100K": {"relations": 470, "entities": 99604, "train": 597572, "valid": 50000, "test": 50000},
    "WN18": {"relations": 18, "entities": 40943, "train": 141442, "valid": 5000, "test": 5000},
    "FB15k": {"relations": 1345, "entities": 14951, "train": 483142, "valid": 50000, "test": 59071},
    "WN18RR": {"relations": 11, "entities": 40943, "train": 86835, "valid": 3034, "test": 3134},
    "FB15k-237": {"relations": 237, "entities": 14541, "train": 272115, "valid": 17535, "test": 20446},
    "Kinship": {"relations": 25, "entities": 104, "train": 8544, "valid": 1068, "test": 1074},
}

# Ready-made run configs
PRESETS_DIR = PROJECT_ROOT / "config" / "presets"
PRESETS = {path.stem: str(path) for path in sorted(PRESETS_DIR.glob("*.json"))}
