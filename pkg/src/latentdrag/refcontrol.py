"""Reference-guided denoising via key/value substitution in self-attention.

The edited latent is denoised in lockstep with the original one: at every
step the reference branch runs first and its self-attention keys/values in
the upsampling blocks are captured, then the edited branch runs with those
keys/values substituted, so its queries attend to the original content.
Only self-attention is touched; captures are kept for one step at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .backend import Conditioning, ModelBackend, predict_noise
from .errors import ControllerError, ParameterError
from .schedule import Latent, NoiseSchedule, ddim_step


class IdentityController:
    """Passes keys/values through unchanged (for hook-transparency checks)."""

    def process(self, step, branch, layer_id, block_position, q, k, v):
        return k, v


@dataclass
class RecordingController:
    """Logs every hooked call; passes keys/values through unchanged."""

    calls: list[tuple[int, str, str, str]] = field(default_factory=list)

    def process(self, step, branch, layer_id, block_position, q, k, v):
        self.calls.append((step, branch, layer_id, block_position))
        return k, v


class KVReplaceController:
    """Capture k/v per (step, branch, layer) then substitute them.

    In ``record`` mode incoming keys/values are stored; in ``replace`` mode
    the stored pair for the same (step, branch, layer) is returned instead of
    the incoming one. Missing captures are a :class:`ControllerError`.
    """

    def __init__(self) -> None:
        self.mode = "record"
        self._store: dict[tuple[int, str, str], tuple[torch.Tensor, torch.Tensor]] = {}

    def process(self, step, branch, layer_id, block_position, q, k, v):
        key = (step, branch, layer_id)
        if self.mode == "record":
            self._store[key] = (k.detach(), v.detach())
            return k, v
        if self.mode == "replace":
            if key not in self._store:
                raise ControllerError(f"no captured k/v for step={step} branch={branch} layer={layer_id}")
            return self._store[key]
        raise ControllerError(f"unknown controller mode {self.mode!r}")

    def clear_step(self, step: int) -> None:
        for key in [k for k in self._store if k[0] == step]:
            del self._store[key]


def guided_denoise(
    z_hat_t: Latent,
    z_t: Latent,
    backend: ModelBackend,
    cond: Conditioning,
    schedule: Optional[NoiseSchedule] = None,
) -> tuple[Latent, Latent]:
    """Denoise the edited latent with reference-latent-control.

    Both latents must sit at the same step t. Execution is interleaved per
    step (reference first, then edited with substituted k/v), which caps the
    capture memory at a single step. Returns (edited z_0, reference z_0); the
    reference reconstruction is retained for metrics.
    """
    schedule = schedule if schedule is not None else backend.schedule
    if z_hat_t.step != z_t.step:
        raise ParameterError(f"branch steps differ: {z_hat_t.step} vs {z_t.step}")
    if z_hat_t.step < 1:
        raise ParameterError("guided denoising needs step >= 1")
    controller = KVReplaceController()
    handle = backend.install_attention_hooks(controller)
    z_ref = z_t.clone()
    z_edit = z_hat_t.clone()
    try:
        with torch.no_grad():
            for t in range(z_t.step, 0, -1):
                controller.mode = "record"
                eps_ref = predict_noise(backend, z_ref.data, t, cond)
                controller.mode = "replace"
                eps_edit = predict_noise(backend, z_edit.data, t, cond)
                z_ref = ddim_step(z_ref, eps_ref, t, t - 1, schedule)
                z_edit = ddim_step(z_edit, eps_edit, t, t - 1, schedule)
                controller.clear_step(t)
    finally:
        handle.remove()
    return z_edit, z_ref
