"""Drag-based image editing on diffusion backends.

Pipeline: identity-preserving low-rank fine-tuning on the input image,
deterministic inversion to a mid-trajectory latent, motion-supervised latent
optimization with feature-space point tracking, and reference-guided
denoising of the result. Ships a trainable toy pixel-space backend, a
benchmark/metrics harness, an HTTP session service, and a CLI.
"""

from .backend import Conditioning, FeatureMap, ModelBackend, extract_features, predict_noise
from .engine import (
    DragConfig,
    DragInstruction,
    DragResult,
    HandleTrace,
    InstructionDoc,
    LatentOptimizer,
    TraceRecord,
    bilinear_sample,
    drag,
    latent_step,
    motion_supervision,
    track_points,
)
from .errors import (
    CapabilityError,
    ControllerError,
    DatasetError,
    FinetuneError,
    LatentDragError,
    MetricUnavailableError,
    OptimizationError,
    ParameterError,
    TrainingError,
)
from .lora import FinetuneConfig, LoRAAdapter, finetune_identity, inject_lora, load_adapter
from .refcontrol import IdentityController, KVReplaceController, RecordingController, guided_denoise
from .schedule import (
    DEFAULT_BETA_RANGE,
    Latent,
    NoiseSchedule,
    add_noise,
    build_schedule,
    ddim_denoise,
    ddim_generate,
    ddim_invert,
    ddim_step,
    ddim_transition,
)
from .shapes import ShapeCorpus, make_shape_corpus
from .toy import ToyBackend, ToyModelConfig, load_checkpoint, save_checkpoint, toy_train

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "Conditioning",
    "ControllerError",
    "DEFAULT_BETA_RANGE",
    "DatasetError",
    "DragConfig",
    "DragInstruction",
    "DragResult",
    "FeatureMap",
    "FinetuneConfig",
    "FinetuneError",
    "HandleTrace",
    "IdentityController",
    "InstructionDoc",
    "KVReplaceController",
    "Latent",
    "LatentDragError",
    "LatentOptimizer",
    "LoRAAdapter",
    "MetricUnavailableError",
    "ModelBackend",
    "NoiseSchedule",
    "OptimizationError",
    "ParameterError",
    "RecordingController",
    "ShapeCorpus",
    "ToyBackend",
    "ToyModelConfig",
    "TraceRecord",
    "TrainingError",
    "add_noise",
    "bilinear_sample",
    "build_schedule",
    "ddim_denoise",
    "ddim_generate",
    "ddim_invert",
    "ddim_step",
    "ddim_transition",
    "drag",
    "extract_features",
    "finetune_identity",
    "guided_denoise",
    "inject_lora",
    "latent_step",
    "load_adapter",
    "load_checkpoint",
    "make_shape_corpus",
    "motion_supervision",
    "predict_noise",
    "save_checkpoint",
    "toy_train",
    "track_points",
]
