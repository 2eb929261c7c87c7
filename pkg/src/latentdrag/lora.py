"""Low-rank identity-preserving fine-tuning of attention projections.

Each q/k/v projection of every attention module gets a trainable low-rank
delta (``W x + scale * up @ down @ x``) while the base weights stay frozen.
The up matrices start at zero, so an injected-but-untrained adapter leaves
the backend's outputs exactly unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

import torch
from torch import nn

from .errors import CapabilityError, FinetuneError, ParameterError
from .schedule import Latent, NoiseSchedule
from .backend import ModelBackend

_PROJECTION_NAMES = ("to_q", "to_k", "to_v")


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable rank-``r`` delta.

    ``down`` is (rank, in_features) with a small random init; ``up`` is
    (out_features, rank) initialized to zero so the delta starts at exactly
    zero.
    """

    def __init__(self, base: nn.Linear, rank: int, scale: float, generator: torch.Generator) -> None:
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.scale = scale
        dtype = base.weight.dtype
        down = torch.randn(rank, base.in_features, generator=generator, dtype=torch.float32)
        down = down / math.sqrt(base.in_features)
        self.down = nn.Parameter(down.to(dtype))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.down.t()) @ self.up.t())


@dataclass
class FinetuneConfig:
    """Hyperparameters for identity fine-tuning (decoupled-weight-decay Adam)."""

    steps: int = 80
    learning_rate: float = 5e-4
    batch_size: int = 4
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ParameterError("learning_rate must be > 0 and batch_size >= 1")


@dataclass
class LoRAAdapter:
    """Handles to the injected low-rank deltas of one backend.

    ``scale`` multiplies the delta; the default is sized so the pinned
    fine-tuning hyperparameters produce a measurable adaptation on the toy
    backend within the step budget.
    """

    rank: int
    scale: float
    modules: dict[str, "LoRALinear"] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    seed: int = 0
    trained_steps: int = 0

    def parameters(self) -> Iterator[nn.Parameter]:
        for mod in self.modules.values():
            yield mod.down
            yield mod.up

    def param_count(self) -> int:
        return sum(m.down.numel() + m.up.numel() for m in self.modules.values())

    def delta_is_zero(self) -> bool:
        return all(bool((m.up == 0).all()) for m in self.modules.values())

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, mod in self.modules.items():
            out[f"{name}.down"] = mod.down.detach().clone()
            out[f"{name}.up"] = mod.up.detach().clone()
        return out

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        for name, mod in self.modules.items():
            with torch.no_grad():
                mod.down.copy_(state[f"{name}.down"])
                mod.up.copy_(state[f"{name}.up"])

    def save(self, directory: str | Path) -> Path:
        from .ioutil import atomic_write_bytes

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "kind": "lora-adapter",
            "rank": self.rank,
            "scale": self.scale,
            "targets": sorted(self.modules),
            "seed": self.seed,
            "trained_steps": self.trained_steps,
        }
        atomic_write_bytes(directory / "manifest.json", json.dumps(manifest, indent=2).encode())
        tmp = directory / "params.pt.tmp"
        torch.save(self.state_dict(), tmp)
        tmp.replace(directory / "params.pt")
        return directory


def _attention_projections(backend: ModelBackend) -> dict[str, nn.Module]:
    """Map of '<layer>.<proj>' -> attention module for all q/k/v projections."""
    model = getattr(backend, "model", None)
    if model is None or not hasattr(model, "attention_modules"):
        raise CapabilityError(f"{type(backend).__name__} does not expose attention projections")
    out = {}
    for attn in model.attention_modules():
        for proj in _PROJECTION_NAMES:
            out[f"{attn.layer_id}.{proj}"] = attn
    return out


def inject_lora(backend: ModelBackend, rank: int = 16, scale: float = 4.0, seed: int = 0) -> LoRAAdapter:
    """Wrap every attention q/k/v projection with a zero-initialized LoRA delta.

    The augmented backend's outputs are bitwise equal to the base backend's
    until the adapter is trained. All base parameters are frozen.
    """
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    targets = _attention_projections(backend)
    gen = torch.Generator().manual_seed(seed)
    # freeze everything; only adapter parameters will require grad
    for p in backend.model.parameters():  # type: ignore[attr-defined]
        p.requires_grad_(False)
    adapter = LoRAAdapter(rank=rank, scale=scale, seed=seed)
    for name, attn in targets.items():
        proj_name = name.rsplit(".", 1)[1]
        base = getattr(attn, proj_name)
        if isinstance(base, LoRALinear):
            raise ParameterError(f"projection {name} already has an adapter injected")
        if rank > min(base.in_features, base.out_features):
            raise ParameterError(
                f"rank {rank} exceeds min dimension of projection {name} "
                f"({base.in_features}x{base.out_features})"
            )
        wrapped = LoRALinear(base, rank, scale, gen)
        setattr(attn, proj_name, wrapped)
        adapter.modules[name] = wrapped
    return adapter


def load_adapter(backend: ModelBackend, directory: str | Path) -> LoRAAdapter:
    """Inject a fresh adapter and load trained deltas from disk."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    adapter = inject_lora(backend, rank=manifest["rank"], scale=manifest["scale"], seed=manifest["seed"])
    state = torch.load(directory / "params.pt", weights_only=True)
    adapter.load_state_dict(state)
    adapter.trained_steps = manifest.get("trained_steps", 0)
    return adapter


def finetune_identity(
    backend: ModelBackend,
    adapter: LoRAAdapter,
    z0: Latent,
    schedule: Optional[NoiseSchedule] = None,
    config: Optional[FinetuneConfig] = None,
    embedding: Any = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> LoRAAdapter:
    """Fine-tune the adapter on a single image with the denoising objective.

    Per step: ``batch_size`` independent draws of (t uniform in [1, T],
    eps standard normal) are averaged into one loss
    ``mean || eps - eps_model(alpha_t z + sigma_t eps) ||^2`` and one AdamW
    update is applied to the adapter parameters only.
    """
    schedule = schedule if schedule is not None else backend.schedule
    config = config if config is not None else FinetuneConfig()
    if z0.step != 0:
        raise ParameterError(f"fine-tuning expects a clean latent (step 0), got step {z0.step}")
    adapter.loss_trace = []
    if config.steps == 0:
        return adapter
    params = list(adapter.parameters())
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    alpha = torch.from_numpy(schedule.alpha).to(z0.data.dtype)
    sigma = torch.from_numpy(schedule.sigma).to(z0.data.dtype)
    x = z0.data.unsqueeze(0).expand(config.batch_size, *z0.data.shape)
    if embedding is None:
        embedding = getattr(backend, "null_class", None)
    labels = torch.full((config.batch_size,), int(embedding), dtype=torch.long) if embedding is not None else None
    backend.model.train()  # type: ignore[attr-defined]
    try:
        for step in range(config.steps):
            t = torch.randint(1, schedule.num_steps + 1, (config.batch_size,), generator=gen)
            eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            z_t = alpha[t, None, None, None] * x + sigma[t, None, None, None] * eps
            pred = backend.batch_noise_forward(z_t, t, labels)
            loss = torch.mean((pred - eps) ** 2)
            if not torch.isfinite(loss):
                raise FinetuneError(f"non-finite fine-tuning loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            adapter.loss_trace.append(float(loss.detach()))
            if on_step is not None:
                on_step(step, adapter.loss_trace[-1])
    finally:
        backend.model.eval()  # type: ignore[attr-defined]
    adapter.trained_steps += config.steps
    return adapter


def smoothed_loss(trace: list[float], beta: float = 0.9) -> list[float]:
    """Exponentially smoothed loss curve (bias-corrected)."""
    out = []
    acc = 0.0
    for i, v in enumerate(trace):
        acc = beta * acc + (1.0 - beta) * v
        out.append(acc / (1.0 - beta ** (i + 1)))
    return out
