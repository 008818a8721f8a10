"""Online filter pruning: learn a network's width while training its weights."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10_binary, load_idx, standardize, synth_blobs, synth_split
from .estimators import OnlinePruningAutoencoder, OnlinePruningClassifier
from .exceptions import (CompactionError, ContractError, DegenerateStateError, FormatError,
                         NumericError, ShapeError, SimulpruneError, SpecError)
from .layers import LayerConfig, Network, NetworkSpec
from .metrics import ModelStats, count_flops, count_params, model_stats
from .objective import ObjectiveConfig, ScalingState, total_loss
from .pruner import PruneSchedule, apply_mask, compact, partition, plan_compaction
from .tensor import Tensor
from .trainer import TrainConfig, evaluate, fit

__version__ = "0.1.0"
