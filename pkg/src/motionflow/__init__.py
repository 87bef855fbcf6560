"""Audio-driven facial motion generation with a rectified-flow transformer."""
from .alse import SyncExpert, SyncExpertConfig, alse_loss, pretrain_expert, sync_auc
from .conditioning import ConditionBatch, ConditionSet
from .data_synth import OracleSpec, generate_dataset, load_dataset, save_dataset, split_train_val
from .dit import ModelConfig, MotionDiT, build_model, param_count
from .engine import StreamSession, TrainConfig, evaluate, generate, load_model, save_model, train
from .estimator import MotionGenerator, MotionNormalizer, SyncExpertEstimator
from .exceptions import (ConfigError, DimensionError, DivergenceError, MotionFlowError, NotFittedError,
                         ProtocolError, ValidationError)
from .flow import SamplerConfig, cfg_combine, euler_sample
from .motion_space import MotionParams, MotionSequence, NormStats

__version__ = "0.1.0"

__all__ = [
    "ConditionBatch", "ConditionSet", "ConfigError", "DimensionError", "DivergenceError", "ModelConfig",
    "MotionDiT", "MotionFlowError", "MotionGenerator", "MotionNormalizer", "MotionParams", "MotionSequence",
    "NormStats", "NotFittedError", "OracleSpec", "ProtocolError", "SamplerConfig", "StreamSession",
    "SyncExpert", "SyncExpertConfig", "SyncExpertEstimator", "TrainConfig", "ValidationError", "alse_loss",
    "build_model", "cfg_combine", "euler_sample", "evaluate", "generate", "generate_dataset", "load_dataset",
    "load_model", "param_count", "pretrain_expert", "save_dataset", "save_model", "split_train_val",
    "sync_auc", "train",
]
