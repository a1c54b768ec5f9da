"""
AcrE: knowledge graph embedding with atrous convolutions and residual learning.
"""

from .data import (
    LabelIndex,
    RelationCategories,
    TripleStore,
    Vocabulary,
    add_reciprocals,
    build_label_index,
    classify_relations,
    load_cache,
    load_store,
    load_triples,
    prepare_store,
    save_cache,
)
from .errors import (
    AcreError,
    CheckpointError,
    ConfigError,
    ShapeError,
    TapeError,
    TrainingDivergedError,
    TripleFormatError,
)
from .evaluation import MetricReport, RankEntry, category_report, evaluate, filtered_rank
from .model import ModelConfig, ModelParams, forward, forward_parallel, forward_serial, init_params, parameter_count
from .run_config import RunConfig, load_config_file, resolve_run_config
from .training import (
    Adam,
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    bce_listwise_loss,
    count_params,
    grid_search,
    train,
)

__version__ = "0.1.0"
