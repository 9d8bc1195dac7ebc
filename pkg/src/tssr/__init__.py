"""Two-stream sequential recommendation over item IDs and item content."""
from .data import (ContentTable, DataError, DatasetSplit, InteractionSequence, SequenceBatch,
                   build_batch, filter_min_count, leave_one_out_split, load_content_table,
                   load_dataset, load_interactions, subsample_train)
from .estimator import TSSRRecommender
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, ModelMode, forward, init_params, load_checkpoint, save_checkpoint
from .objectives import ContrastConfig
from .synthgen import SynthConfig, generate, oracle_ndcg_bound
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"
