"""Multi-resolution 3D U-Nets with crop-skip connections, on a numpy autograd core."""
from .metrics import MetricsReport, evaluate
from .phantoms import PhantomSpec, generate, make_dataset
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, predict, run_cross_validation, train
from .unet import ConfigError, Network, NetworkConfig, build, count_inputs, count_params
from .volume import ClassMap, Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "ClassMap", "ConfigError", "MetricsReport", "Network", "NetworkConfig", "PhantomSpec", "Tensor",
    "TrainConfig", "Volume", "build", "count_inputs", "count_params", "evaluate", "generate", "make_dataset",
    "no_grad", "predict", "read_volume", "run_cross_validation", "train", "write_volume",
]
