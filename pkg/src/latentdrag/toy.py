"""Desk-scale trainable UNet backend diffusing directly in pixel space.

The latent IS the image (no autoencoder). Convolutions use circular padding
and the attention layers carry no positional encoding, so features are
equivariant under circular shifts — which keeps feature-space point matching
well-behaved on the synthetic shape corpus. Activations are smooth (SiLU),
so gradient checks against finite differences are meaningful.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch import nn

from .backend import AttentionController, ModelBackend
from .errors import CapabilityError, ParameterError, TrainingError
from .schedule import DEFAULT_BETA_RANGE, build_schedule
from .shapes import CLASS_NAMES, ShapeCorpus

# Channel multiplier ladder per encoder stage, truncated to the configured depth.
_WIDTH_MULTS = (1, 2, 2, 4, 4, 4)


@dataclass(frozen=True)
class ToyModelConfig:
    """Architecture + training hyperparameters for the toy backend."""

    image_size: int = 64
    channels: int = 1
    base_width: int = 32
    depth: int = 4
    attention_resolutions: tuple[int, ...] = (8, 16)
    num_classes: int = 3
    num_steps: int = 50
    beta_range: tuple[float, float] = DEFAULT_BETA_RANGE
    epochs: int = 4
    batch_size: int = 16
    learning_rate: float = 2e-3
    class_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 1 or self.depth > len(_WIDTH_MULTS):
            raise ParameterError(f"depth must be in [1, {len(_WIDTH_MULTS)}], got {self.depth}")
        if self.image_size % (2 ** self.depth) != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by 2^depth = {2 ** self.depth}"
            )

    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in _WIDTH_MULTS[: self.depth])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attention_resolutions"] = list(self.attention_resolutions)
        d["beta_range"] = list(self.beta_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        d = dict(d)
        d["attention_resolutions"] = tuple(d["attention_resolutions"])
        d["beta_range"] = tuple(d["beta_range"])
        return cls(**d)


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="circular")


def _timestep_embedding(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the normalized step t/T, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t_frac.dtype, device=t_frac.device)
        * (-math.log(200.0) / max(half - 1, 1))
    )
    args = t_frac[:, None] * 200.0 * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int) -> None:
        super().__init__()
        self.norm1 = _group_norm(cin)
        self.conv1 = _conv(cin, cout)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = _group_norm(cout)
        self.conv2 = _conv(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial tokens, no positional encoding.

    A controller installed on the module receives (step, branch, layer_id,
    block_position, q, k, v) and returns the (k, v) actually used.
    """

    def __init__(self, channels: int, layer_id: str, block_position: str) -> None:
        super().__init__()
        self.layer_id = layer_id
        self.block_position = block_position
        self.norm = _group_norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.controller: Optional[AttentionController] = None

    def forward(self, x: torch.Tensor, ctx: Optional[tuple[int, str]] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(tokens)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        if self.controller is not None:
            step, branch = ctx if ctx is not None else (-1, "pos")
            k, v = self.controller.process(step, branch, self.layer_id, self.block_position, q, k, v)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = _conv(channels, channels, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = _conv(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ToyUNet(nn.Module):
    """Noise-prediction UNet with taps on every decoder stage.

    Decoder blocks are numbered 1 (deepest, coarsest) to ``depth``
    (shallowest, at full resolution).
    """

    def __init__(self, config: ToyModelConfig) -> None:
        super().__init__()
        self.config = config
        widths = config.widths()
        time_dim = config.base_width * 4
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        # index num_classes is the learned null class used for CFG
        self.class_embed = nn.Embedding(config.num_classes + 1, time_dim)

        self.stem = _conv(config.channels, widths[0])
        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = widths[0]
        for i in range(config.depth):
            res = config.image_size // (2 ** i)
            self.enc_res.append(ResBlock(cin, widths[i], time_dim))
            if res in config.attention_resolutions:
                self.enc_attn.append(SelfAttention2d(widths[i], f"enc{i}", "down"))
            else:
                self.enc_attn.append(None)  # type: ignore[arg-type]
            self.down.append(Downsample(widths[i]))
            cin = widths[i]

        self.mid_res1 = ResBlock(widths[-1], widths[-1], time_dim)
        self.mid_attn = SelfAttention2d(widths[-1], "mid", "mid")
        self.mid_res2 = ResBlock(widths[-1], widths[-1], time_dim)

        self.up = nn.ModuleList()
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        for i in reversed(range(config.depth)):
            res = config.image_size // (2 ** i)
            cin_up = widths[min(i + 1, config.depth - 1)]
            self.up.append(Upsample(cin_up))
            self.dec_res.append(ResBlock(cin_up + widths[i], widths[i], time_dim))
            if res in config.attention_resolutions:
                block_no = config.depth - i
                self.dec_attn.append(SelfAttention2d(widths[i], f"dec{block_no}", "up"))
            else:
                self.dec_attn.append(None)  # type: ignore[arg-type]
        self.head_norm = _group_norm(widths[0])
        self.head = _conv(widths[0], config.channels)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        labels: torch.Tensor,
        ctx: Optional[tuple[int, str]] = None,
        capture_block: Optional[int] = None,
    ) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        t_frac = t.to(z.dtype) / float(self.config.num_steps)
        emb = self.time_mlp(_timestep_embedding(t_frac, self.config.base_width))
        emb = emb + self.class_embed(labels)

        h = self.stem(z)
        skips = []
        for i in range(self.config.depth):
            h = self.enc_res[i](h, emb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h, ctx)
            skips.append(h)
            h = self.down[i](h)
        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, ctx)
        h = self.mid_res2(h, emb)

        captured: Optional[torch.Tensor] = None
        for j, i in enumerate(reversed(range(self.config.depth))):
            h = self.up[j](h)
            h = torch.cat([h, skips[i]], dim=1)
            h = self.dec_res[j](h, emb)
            if self.dec_attn[j] is not None:
                h = self.dec_attn[j](h, ctx)
            if capture_block == self.config.depth - i:
                captured = h
        out = self.head(nn.functional.silu(self.head_norm(h)))
        return out, captured

    def attention_modules(self) -> list[SelfAttention2d]:
        mods = [m for m in self.enc_attn if m is not None]
        mods.append(self.mid_attn)
        mods.extend(m for m in self.dec_attn if m is not None)
        return mods


class ToyBackend(ModelBackend):
    """`ModelBackend` wrapping a :class:`ToyUNet` plus its training schedule."""

    supports_text_conditioning = False
    supports_cfg = True
    attention_hookable = True

    def __init__(self, config: ToyModelConfig) -> None:
        self.config = config
        self.latent_shape = (config.channels, config.image_size, config.image_size)
        self.schedule = build_schedule(config.num_steps, config.beta_range)
        self.feature_blocks = tuple(range(1, config.depth + 1))
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.model = ToyUNet(config)
        self.model.eval()
        self.train_history: dict = {}
        self.corpus_hash: Optional[str] = None

    @property
    def null_class(self) -> int:
        return self.config.num_classes

    def encode_prompt(self, prompt: Optional[str]) -> int:
        """The toy stand-in for a text encoder: shape class names as prompts."""
        if prompt is None or prompt == "":
            return self.null_class
        if prompt in CLASS_NAMES[: self.config.num_classes]:
            return CLASS_NAMES.index(prompt)
        raise CapabilityError(
            f"toy backend only understands class prompts {CLASS_NAMES[: self.config.num_classes]}, got {prompt!r}"
        )

    def _labels(self, embedding: Any, batch: int, device: torch.device) -> torch.Tensor:
        if embedding is None:
            embedding = self.null_class
        if isinstance(embedding, torch.Tensor):
            return embedding.to(device=device, dtype=torch.long)
        return torch.full((batch,), int(embedding), dtype=torch.long, device=device)

    def _forward(
        self,
        z: torch.Tensor,
        t: int,
        embedding: Any,
        branch: str,
        capture_block: Optional[int] = None,
    ) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        x = z.unsqueeze(0)
        tt = torch.full((1,), int(t), dtype=torch.long, device=x.device)
        labels = self._labels(embedding, 1, x.device)
        out, captured = self.model(x, tt, labels, ctx=(int(t), branch), capture_block=capture_block)
        return out.squeeze(0), captured.squeeze(0) if captured is not None else None

    def noise_forward(self, z: torch.Tensor, t: int, embedding: Any, branch: str = "pos") -> torch.Tensor:
        eps, _ = self._forward(z, t, embedding, branch)
        return eps

    def capture_features(self, z: torch.Tensor, t: int, embedding: Any, block: int) -> torch.Tensor:
        if block not in self.feature_blocks:
            raise CapabilityError(f"block {block} not in {self.feature_blocks}")
        _, captured = self._forward(z, t, embedding, "pos", capture_block=block)
        assert captured is not None
        return captured

    def batch_noise_forward(
        self, z: torch.Tensor, t: torch.Tensor, labels: Optional[torch.Tensor]
    ) -> torch.Tensor:
        """Batched training-path forward: (B,C,H,W) with per-sample steps."""
        if labels is None:
            labels = torch.full((z.shape[0],), self.null_class, dtype=torch.long, device=z.device)
        out, _ = self.model(z, t, labels)
        return out

    def _set_controller(self, controller: Optional[AttentionController]) -> None:
        for module in self.model.attention_modules():
            if module.block_position == "up":
                module.controller = controller

    def to_dtype(self, dtype: torch.dtype) -> "ToyBackend":
        self.model.to(dtype)
        return self

    def state_signature(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def toy_train(dataset: ShapeCorpus, config: ToyModelConfig) -> ToyBackend:
    """Train a toy backend with the standard denoising objective.

    Per step a batch of images gets per-sample uniform t in [1, T] and fresh
    Gaussian noise; the loss is the MSE between that noise and the model
    prediction. Seeded and bit-reproducible on a single worker.
    """
    if len(dataset) == 0:
        raise ParameterError("training corpus is empty")
    backend = ToyBackend(config)
    backend.corpus_hash = dataset.content_hash()
    images = torch.from_numpy(dataset.images)
    labels_all = torch.from_numpy(dataset.labels)
    if tuple(images.shape[1:]) != backend.latent_shape:
        raise ParameterError(
            f"corpus image shape {tuple(images.shape[1:])} != configured {backend.latent_shape}"
        )

    n_val = max(1, len(dataset) // 10)
    train_x, val_x = images[:-n_val], images[-n_val:]
    train_y, val_y = labels_all[:-n_val], labels_all[-n_val:]

    sched = backend.schedule
    alpha = torch.from_numpy(sched.alpha).float()
    sigma = torch.from_numpy(sched.sigma).float()

    g_eval = torch.Generator().manual_seed(config.seed + 2)
    val_t = torch.randint(1, config.num_steps + 1, (len(val_x),), generator=g_eval)
    val_eps = torch.randn(val_x.shape, generator=g_eval)

    def val_loss() -> float:
        with torch.no_grad():
            z = alpha[val_t, None, None, None] * val_x + sigma[val_t, None, None, None] * val_eps
            pred = backend.batch_noise_forward(z, val_t, val_y)
            return float(torch.mean((pred - val_eps) ** 2))

    history: dict = {"loss": [], "val_initial": val_loss(), "val_final": None}
    if config.epochs > 0:
        backend.model.train()
        g = torch.Generator().manual_seed(config.seed + 1)
        opt = torch.optim.Adam(backend.model.parameters(), lr=config.learning_rate)
        step = 0
        for _epoch in range(config.epochs):
            order = torch.randperm(len(train_x), generator=g)
            for start in range(0, len(train_x), config.batch_size):
                idx = order[start : start + config.batch_size]
                x = train_x[idx]
                y = train_y[idx].clone()
                t = torch.randint(1, config.num_steps + 1, (len(idx),), generator=g)
                eps = torch.randn(x.shape, generator=g)
                if config.class_dropout > 0:
                    drop = torch.rand(len(idx), generator=g) < config.class_dropout
                    y[drop] = backend.null_class
                z = alpha[t, None, None, None] * x + sigma[t, None, None, None] * eps
                pred = backend.batch_noise_forward(z, t, y)
                loss = torch.mean((pred - eps) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite training loss at step {step} "
                        f"(lr={config.learning_rate}, batch={config.batch_size})"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                history["loss"].append(float(loss.detach()))
                step += 1
        backend.model.eval()
    history["val_final"] = val_loss()
    backend.train_history = history
    return backend


def save_checkpoint(backend: ToyBackend, directory: str | Path) -> Path:
    """Persist a toy backend: JSON manifest + parameter blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "toy-backend",
        "config": backend.config.to_dict(),
        "schedule": backend.schedule.to_dict(),
        "corpus_hash": backend.corpus_hash,
        "val_initial": backend.train_history.get("val_initial"),
        "val_final": backend.train_history.get("val_final"),
    }
    from .ioutil import atomic_write_bytes

    atomic_write_bytes(directory / "manifest.json", json.dumps(manifest, indent=2).encode())
    tmp = directory / "params.pt.tmp"
    torch.save(backend.model.state_dict(), tmp)
    tmp.replace(directory / "params.pt")
    return directory


def load_checkpoint(directory: str | Path) -> ToyBackend:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ToyModelConfig.from_dict(manifest["config"])
    backend = ToyBackend(config)
    state = torch.load(directory / "params.pt", weights_only=True)
    backend.model.load_state_dict(state)
    backend.model.eval()
    backend.corpus_hash = manifest.get("corpus_hash")
    backend.train_history = {
        "loss": [],
        "val_initial": manifest.get("val_initial"),
        "val_final": manifest.get("val_final"),
    }
    return backend


def latent_from_image(image: np.ndarray, seed: int = 0) -> "Latent":
    """Wrap a (C, H, W) float image in [-1, 1] as a step-0 latent."""
    from .schedule import Latent

    return Latent(torch.from_numpy(np.ascontiguousarray(image)).float(), step=0, seed=seed)
