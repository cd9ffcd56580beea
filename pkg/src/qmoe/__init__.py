"""Heterogeneous-precision inference with a curiosity-routed mixture of experts."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .quantizers import QuantScheme  # noqa: E402
from .experts import ExpertNet, TrainConfig, train_expert  # noqa: E402
from .router import MoEModel, RouterNet, route_batch, train_moe  # noqa: E402
from .container import load_model, save_model  # noqa: E402

__all__ = [
    "BACKEND",
    "ExpertNet",
    "MoEModel",
    "QuantScheme",
    "RouterNet",
    "TrainConfig",
    "load_model",
    "route_batch",
    "save_model",
    "train_expert",
    "train_moe",
]
