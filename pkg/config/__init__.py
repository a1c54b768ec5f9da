from .config import (
    DATASET_STATS,
    DEBUG_CHECKS,
    FLOAT_WIDTH,
    GRID_SEARCH_EPOCHS,
    GRID_SEARCH_SPACE,
    LOG_FILE_NAME,
    LOG_LEVEL,
    OUTPUT_ROOT,
    PRESETS,
    PRESETS_DIR,
    PROJECT_ROOT,
)
