"""Hyperspectral unmixing with a convolutional autoencoder and class-token transformer."""

__version__ = "0.1.0"

from .classical import fclsu, match_endmembers, rmse, sad, vca  # noqa: E402
from .mixing import AbundanceCube, EndmemberMatrix, HsiCube, SceneConfig, synth_scene  # noqa: E402
from .network import ModelConfig, forward, init_params  # noqa: E402
from .training import PROFILES, TrainConfig, build_model, predict, train  # noqa: E402

__all__ = [
    "AbundanceCube", "EndmemberMatrix", "HsiCube", "ModelConfig", "PROFILES", "SceneConfig",
    "TrainConfig", "build_model", "fclsu", "forward", "init_params", "match_endmembers",
    "predict", "rmse", "sad", "synth_scene", "train", "vca",
]
