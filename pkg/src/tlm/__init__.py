"""Token-level masking (siblings- and self-masking) for a small numpy Transformer."""
from .attention import RegularizerSpec
from .autodiff import ContractError, NumericError, ShapeError, Tape, Tensor
from .config import ExperimentConfig, run_experiment
from .masking import MASK_VALUE, ConfigError, MaskStrategy, build_allow_matrix, select_masked_tokens
from .tasks import DatasetSpec, make_dataset
from .training import RunRecord, TrainConfig, train
from .transformer import BlockConfig, ModelConfig, Streams, Transformer

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "ConfigError", "ContractError", "DatasetSpec", "ExperimentConfig", "MASK_VALUE",
    "MaskStrategy", "ModelConfig", "NumericError", "RegularizerSpec", "RunRecord", "ShapeError",
    "Streams", "Tape", "Tensor", "TrainConfig", "Transformer", "build_allow_matrix", "make_dataset",
    "run_experiment", "select_masked_tokens", "train",
]
