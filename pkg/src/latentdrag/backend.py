"""The denoiser abstraction: noise prediction, features, and attention hooks.

A :class:`ModelBackend` hides the actual network. The package ships a
trainable toy UNet (:mod:`latentdrag.toy`); anything that implements this
interface (e.g. an adapter around a large pretrained model) plugs into the
same editing pipeline.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Optional, Protocol

import torch
import torch.nn.functional as ttf

from .errors import CapabilityError, ParameterError
from .schedule import Latent, NoiseSchedule


@dataclass
class Conditioning:
    """Conditioning payload for a backend forward pass.

    ``prompt_embedding`` is backend-specific (the toy backend uses a shape
    class index). ``guidance_scale == 1`` means classifier-free guidance is
    off, which is the default for editing real images.
    """

    prompt_embedding: Any = None
    negative_embedding: Any = None
    guidance_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.guidance_scale < 1.0:
            raise ParameterError(f"guidance_scale must be >= 1, got {self.guidance_scale}")
        if self.negative_embedding is None and self.guidance_scale != 1.0:
            raise ParameterError("guidance_scale > 1 requires a negative_embedding")


@dataclass
class FeatureMap:
    """A decoder-block feature map resized to the latent's spatial resolution."""

    block: int
    data: torch.Tensor  # (feature_channels, H, W)
    source_step: int

    def __post_init__(self) -> None:
        if self.data.dim() != 3:
            raise ParameterError("feature map must be (C, H, W)")

    @property
    def spatial_size(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


class AttentionController(Protocol):
    """Receives q/k/v from hooked self-attention modules and may replace k/v.

    ``step`` is the diffusion step of the enclosing forward pass and
    ``branch`` distinguishes the positive from the negative CFG branch, so
    captures can be keyed unambiguously.
    """

    def process(
        self,
        step: int,
        branch: str,
        layer_id: str,
        block_position: str,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]: ...


class HookHandle:
    """Uninstalls attention hooks; forward passes are bitwise-original afterwards."""

    def __init__(self, backend: "ModelBackend") -> None:
        self._backend = backend
        self._removed = False

    def remove(self) -> None:
        if not self._removed:
            self._backend._set_controller(None)
            self._removed = True


class ModelBackend(ABC):
    """Denoiser interface used by inversion, dragging, and guided denoising."""

    latent_shape: tuple[int, int, int]
    schedule: NoiseSchedule
    supports_text_conditioning: bool = False
    supports_cfg: bool = False
    attention_hookable: bool = False
    feature_blocks: tuple[int, ...] = ()

    @abstractmethod
    def noise_forward(
        self, z: torch.Tensor, t: int, embedding: Any, branch: str = "pos"
    ) -> torch.Tensor:
        """Single-branch noise prediction for a (C, H, W) tensor at step t.

        ``branch`` only labels the pass for attention-hook keying; it must not
        change the computation.
        """

    def capture_features(self, z: torch.Tensor, t: int, embedding: Any, block: int) -> torch.Tensor:
        """Raw output of one decoder block (not resized). Optional capability."""
        raise CapabilityError(f"{type(self).__name__} does not expose decoder features")

    def batch_noise_forward(
        self, z: torch.Tensor, t: torch.Tensor, labels: Optional[torch.Tensor]
    ) -> torch.Tensor:
        """Batched single-branch forward; the default just loops per sample."""
        outs = []
        for i in range(z.shape[0]):
            emb = None if labels is None else int(labels[i])
            outs.append(self.noise_forward(z[i], int(t[i]), emb))
        return torch.stack(outs)

    def encode_prompt(self, prompt: Optional[str]) -> Any:
        """Map a prompt string to this backend's embedding payload."""
        if prompt is not None and not self.supports_text_conditioning:
            raise CapabilityError(f"{type(self).__name__} does not support text conditioning")
        return None

    def install_attention_hooks(self, controller: AttentionController) -> HookHandle:
        if not self.attention_hookable:
            raise CapabilityError(f"{type(self).__name__} is not attention-hookable")
        self._set_controller(controller)
        return HookHandle(self)

    def _set_controller(self, controller: Optional[AttentionController]) -> None:
        raise CapabilityError(f"{type(self).__name__} is not attention-hookable")

    def _check_latent(self, z: torch.Tensor) -> None:
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ParameterError(
                f"latent shape {tuple(z.shape)} != backend latent shape {tuple(self.latent_shape)}"
            )


def _as_tensor(z: Latent | torch.Tensor) -> torch.Tensor:
    return z.data if isinstance(z, Latent) else z


def predict_noise(
    backend: ModelBackend,
    z: Latent | torch.Tensor,
    t: int,
    cond: Optional[Conditioning] = None,
) -> torch.Tensor:
    """Noise prediction with optional classifier-free guidance.

    With ``guidance_scale == 1`` this is a single forward evaluation (no
    negative branch). With scale > 1 it returns
    ``eps_neg + scale * (eps_pos - eps_neg)``.
    """
    cond = cond if cond is not None else Conditioning()
    x = _as_tensor(z)
    backend._check_latent(x)
    if cond.guidance_scale == 1.0:
        return backend.noise_forward(x, t, cond.prompt_embedding)
    if not backend.supports_cfg:
        raise CapabilityError(f"{type(backend).__name__} does not support classifier-free guidance")
    eps_pos = backend.noise_forward(x, t, cond.prompt_embedding, branch="pos")
    eps_neg = backend.noise_forward(x, t, cond.negative_embedding, branch="neg")
    return eps_neg + cond.guidance_scale * (eps_pos - eps_neg)


def resize_bilinear(features: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (C, h, w) map to (C, H, W), corners aligned."""
    if features.shape[1:] == torch.Size(size):
        return features
    return ttf.interpolate(
        features.unsqueeze(0), size=size, mode="bilinear", align_corners=True
    ).squeeze(0)


def extract_features(
    backend: ModelBackend,
    z: Latent | torch.Tensor,
    t: int,
    cond: Optional[Conditioning] = None,
    block: int = 3,
    cfg_concat: bool = False,
) -> FeatureMap:
    """One forward pass capturing a decoder block, resized to latent resolution.

    ``cfg_concat`` (generated-image mode) runs the positive and negative
    branches and concatenates the two captured maps along the channel
    dimension before the resize. Feature capture is a read-only side channel:
    it never changes what `predict_noise` would return for the same inputs.
    """
    cond = cond if cond is not None else Conditioning()
    x = _as_tensor(z)
    backend._check_latent(x)
    if block not in backend.feature_blocks:
        raise CapabilityError(f"block {block} not in backend feature blocks {backend.feature_blocks}")
    if cfg_concat:
        if cond.negative_embedding is None:
            raise ParameterError("cfg_concat requires a negative_embedding")
        pos = backend.capture_features(x, t, cond.prompt_embedding, block)
        neg = backend.capture_features(x, t, cond.negative_embedding, block)
        raw = torch.cat([pos, neg], dim=0)
    else:
        raw = backend.capture_features(x, t, cond.prompt_embedding, block)
    data = resize_bilinear(raw, (int(x.shape[1]), int(x.shape[2])))
    return FeatureMap(block=block, data=data, source_step=t)
