"""Semi-supervised single-image rain removal on a small numpy autodiff core."""

from .gmm import GmmParams, SynGaussian
from .net import ModelState, NetConfig, forward, init_model, load_model, save_model
from .objective import LossWeights, total_loss
from .trainer import TrainCheckpoint, TrainConfig, evaluate, infer, train

__version__ = "0.1.0"

__all__ = [
    "GmmParams", "SynGaussian", "ModelState", "NetConfig", "forward", "init_model", "load_model",
    "save_model", "LossWeights", "total_loss", "TrainCheckpoint", "TrainConfig", "evaluate", "infer",
    "train", "__version__",
]
