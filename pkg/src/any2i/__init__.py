"""any2i: desk-scale multimodal-conditioned rectified-flow image generation."""

from .codec import LatentCodec
from .flow import GuidanceConfig, edit_weights, euler_sample, guided_velocity, interpolate
from .model import ModelConfig, VelocityModel, build_attention_mask, load_checkpoint, save_checkpoint
from .sequence import TaskRecord, assemble
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "LatentCodec", "GuidanceConfig", "edit_weights", "euler_sample", "guided_velocity",
    "interpolate", "ModelConfig", "VelocityModel", "build_attention_mask",
    "load_checkpoint", "save_checkpoint", "TaskRecord", "assemble", "Tensor",
    "__version__",
]
