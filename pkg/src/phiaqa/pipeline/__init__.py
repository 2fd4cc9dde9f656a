from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .training import (ABLATIONS, Dataset, EpochLog, TrainResult, compare_strategies, evaluate,
                       format_table, parameter_counts, predict, run_ablation, train, train_stage1,
                       train_stage2)
