"""Separable tensor-product surrogate with analytic derivatives."""

from .basis import BasisError, ShapeSpec, build_basis, uniform_nodes
from .model import (
    ModelIOError,
    SurrogateModel,
    TrainingError,
    TrainReport,
    load_model,
    save_model,
    train,
)

__all__ = [
    "BasisError",
    "ShapeSpec",
    "build_basis",
    "uniform_nodes",
    "ModelIOError",
    "SurrogateModel",
    "TrainingError",
    "TrainReport",
    "load_model",
    "save_model",
    "train",
]
