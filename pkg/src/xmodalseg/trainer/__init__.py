from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, TrainConfig, make_config
from .infer import infer, predict
from .train import TrainResult, train, train_fullsup, validate
