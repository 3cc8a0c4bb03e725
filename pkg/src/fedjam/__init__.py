"""Desk-scale federated jammer classification: synthetic GNSS interference
spectrograms, a small numpy CNN, and a FedAvg simulator."""

__version__ = "0.1.0"

from .dataset import (
    PartitionMap,
    SpectrogramDataset,
    load_dataset,
    load_partition,
    partition_dirichlet,
    partition_iid,
    save_dataset,
    save_partition,
    split_train_test,
)
from .estimators import CNNClassifier, FedAvgClassifier
from .exceptions import AggregationError, ConfigurationError, DimensionError, FormatError, InputError
from .fed import FedConfig, RoundRecord, aggregate, run_centralized, run_fedavg
from .metrics import ConfusionMatrix, evaluate
from .nn import CnnConfig, TrainConfig, init_params, load_params, save_params
from .siggen import (
    CLASS_NAMES,
    GenerationConfig,
    JammerClass,
    SignalConfig,
    SpectrogramTransformer,
    StftConfig,
    generate_dataset,
    synthesize_signal,
)

__all__ = [name for name in dir() if not name.startswith("_")]
