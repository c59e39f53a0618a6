"""Channel-adaptive promptable segmentation for spectral cubes, with tuning-free task workflows."""
from .backbone import ModelConfig, PointPrompt, PromptableSegmenter, load_checkpoint, save_checkpoint
from .errors import TrainingError, ValidationError
from .maskgen import MaskBank, NMSConfig, auto_generate_masks, greedy_nms
from .spectral_io import HyperCube, SceneConfig, SceneTruth, generate_change_pair, generate_scene, read_cube, write_cube
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "HyperCube", "SceneConfig", "SceneTruth", "generate_scene", "generate_change_pair", "read_cube", "write_cube",
    "ModelConfig", "PointPrompt", "PromptableSegmenter", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train", "MaskBank", "NMSConfig", "auto_generate_masks", "greedy_nms",
    "ValidationError", "TrainingError",
]
