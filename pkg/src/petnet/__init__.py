"""A small from-scratch CNN framework: layers with hand-written backprop,
a toy classifier and a U-Net, SGD training, synthetic PET-like phantoms."""
from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError
from .modelio import load_model, save_model
from .network import Model, backward, build_toy_cnn, build_unet, forward, infer_shapes, parameter_count
from .training import TrainConfig, TrainReport, compute_loss, evaluate, sgd_step, train

__version__ = "0.1.0"
