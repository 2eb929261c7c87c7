"""Latent optimization for drag edits: motion supervision, latent updates,
and feature-space point tracking, iterated until the handles reach their
targets or the step cap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from .backend import Conditioning, FeatureMap, ModelBackend, extract_features, predict_noise
from .errors import OptimizationError, ParameterError
from .ioutil import canonical_json_bytes
from .schedule import Latent, NoiseSchedule, ddim_transition


@dataclass
class DragConfig:
    """Hyperparameters of one drag run.

    ``t_opt`` is the diffusion step whose latent is optimized; ``r1``/``r2``
    are the motion-supervision and tracking patch radii; ``lam`` weighs the
    unmasked-region regularizer. ``optimizer`` is "adam" (default) or "sgd"
    for plain descent.
    """

    t_opt: int = 35
    max_iters: int = 80
    latent_lr: float = 0.01
    r1: int = 1
    r2: int = 3
    lam: float = 0.1
    feature_block: int = 3
    stop_dist: float = 1.0
    cfg_concat: bool = False
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.r2 > self.r1 >= 0):
            raise ParameterError(f"need r2 > r1 >= 0, got r1={self.r1}, r2={self.r2}")
        if self.lam < 0:
            raise ParameterError(f"lam must be >= 0, got {self.lam}")
        if self.latent_lr <= 0:
            raise ParameterError(f"latent_lr must be > 0, got {self.latent_lr}")
        if self.t_opt < 1:
            raise ParameterError(f"t_opt must be >= 1, got {self.t_opt}")
        if self.max_iters < 0:
            raise ParameterError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class DragInstruction:
    """A drag edit: handle/target point pairs, editable-region mask, prompt.

    Points are (x, y) in image-space pixels; ``image_size`` is the (H, W) of
    the source image, used for the uniform scaling into latent coordinates.
    ``mask`` is a binary (H, W) array with 1 = editable; absent means fully
    editable.
    """

    handles: list[tuple[float, float]]
    targets: list[tuple[float, float]]
    mask: Optional[np.ndarray] = None
    prompt: Optional[str] = None
    image_size: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        if len(self.handles) != len(self.targets) or len(self.handles) < 1:
            raise ParameterError("need n >= 1 handle/target pairs of equal count")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if not np.isin(m, (0, 1)).all():
                raise ParameterError("mask must be binary (0/1)")
            self.mask = m.astype(np.uint8)
        if self.image_size is not None:
            h, w = self.image_size
            for x, y in list(self.handles) + list(self.targets):
                if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                    raise ParameterError(f"point ({x}, {y}) outside image bounds {w}x{h}")
            if self.mask is not None and self.mask.shape != (h, w):
                raise ParameterError(
                    f"mask shape {self.mask.shape} != image size {(h, w)}"
                )


@dataclass
class InstructionDoc:
    """The on-disk instruction schema (shared with the benchmark and the UI).

    ``{"image": path, "prompt": str|null, "points": [{"handle": [x, y],
    "target": [x, y]}, ...], "mask": path|null}`` with pixel coordinates in
    image space. Parsed values are preserved as-is so re-serialization is
    byte-stable.
    """

    image: str
    points: list[dict]
    prompt: Optional[str] = None
    mask: Optional[str] = None

    def to_json_bytes(self) -> bytes:
        return canonical_json_bytes(
            {"image": self.image, "mask": self.mask, "points": self.points, "prompt": self.prompt}
        )

    @classmethod
    def from_json_bytes(cls, payload: bytes) -> "InstructionDoc":
        import json

        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParameterError(f"instruction is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParameterError("instruction must be a JSON object")
        for key in ("image", "points"):
            if key not in doc:
                raise ParameterError(f"instruction missing required key {key!r}")
        if not isinstance(doc["image"], str):
            raise ParameterError("instruction 'image' must be a string path")
        points = doc["points"]
        if not isinstance(points, list) or not points:
            raise ParameterError("instruction 'points' must be a non-empty list")
        for p in points:
            if (
                not isinstance(p, dict)
                or set(p) != {"handle", "target"}
                or any(
                    not isinstance(p[k], list)
                    or len(p[k]) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p[k])
                    for k in ("handle", "target")
                )
            ):
                raise ParameterError(f"malformed point pair: {p!r}")
        prompt = doc.get("prompt")
        if prompt is not None and not isinstance(prompt, str):
            raise ParameterError("instruction 'prompt' must be a string or null")
        mask = doc.get("mask")
        if mask is not None and not isinstance(mask, str):
            raise ParameterError("instruction 'mask' must be a string path or null")
        return cls(image=doc["image"], points=points, prompt=prompt, mask=mask)

    def to_instruction(
        self, mask: Optional[np.ndarray], image_size: Optional[tuple[int, int]]
    ) -> DragInstruction:
        handles = [(float(p["handle"][0]), float(p["handle"][1])) for p in self.points]
        targets = [(float(p["target"][0]), float(p["target"][1])) for p in self.points]
        return DragInstruction(
            handles=handles, targets=targets, mask=mask, prompt=self.prompt, image_size=image_size
        )


@dataclass
class TraceRecord:
    """State after one drag iteration: positions, loss, distances to target."""

    iteration: int
    handles: list[tuple[float, float]]
    loss: float
    distances: list[float]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "handles": [[float(x), float(y)] for x, y in self.handles],
            "loss": self.loss,
            "distances": [float(d) for d in self.distances],
        }


@dataclass
class HandleTrace:
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    initial_handles: list[tuple[float, float]] = field(default_factory=list)
    initial_distances: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "initial_handles": [[float(x), float(y)] for x, y in self.initial_handles],
            "initial_distances": [float(d) for d in self.initial_distances],
            "records": [r.to_dict() for r in self.records],
        }


@dataclass
class DragResult:
    latent: Latent
    trace: HandleTrace
    final_handles: np.ndarray


def _fmap_tensor(features: FeatureMap | torch.Tensor) -> torch.Tensor:
    return features.data if isinstance(features, FeatureMap) else features


def bilinear_sample(features: FeatureMap | torch.Tensor, point: Sequence[float]) -> torch.Tensor:
    """Channel-wise bilinear interpolation of a (C, H, W) map at real (x, y).

    Out-of-bounds points are clamped to the map bounds. Differentiable with
    respect to the feature values.
    """
    fmap = _fmap_tensor(features)
    _, h, w = fmap.shape
    x = min(max(float(point[0]), 0.0), w - 1.0)
    y = min(max(float(point[1]), 0.0), h - 1.0)
    x0 = min(int(math.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(y)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    return (
        (1 - wy) * (1 - wx) * fmap[:, y0, x0]
        + (1 - wy) * wx * fmap[:, y0, x1]
        + wy * (1 - wx) * fmap[:, y1, x0]
        + wy * wx * fmap[:, y1, x1]
    )


def point_in_bounds(point: Sequence[float], size_hw: tuple[int, int]) -> bool:
    h, w = size_hw
    return 0.0 <= float(point[0]) <= w - 1 and 0.0 <= float(point[1]) <= h - 1


def patch_sites(center: Sequence[float], radius: float, size_hw: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer sites (x, y) with |x-cx| <= r and |y-cy| <= r, clipped to the
    map, in row-major (y, then x) order."""
    h, w = size_hw
    cx, cy = float(center[0]), float(center[1])
    xs = range(max(0, math.ceil(cx - radius)), min(w - 1, math.floor(cx + radius)) + 1)
    ys = range(max(0, math.ceil(cy - radius)), min(h - 1, math.floor(cy + radius)) + 1)
    return [(x, y) for y in ys for x in xs]


@dataclass
class LatentOptimizer:
    """Adaptive-moment (or plain) descent state for the latent only."""

    lr: float
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[torch.Tensor] = None
    v: Optional[torch.Tensor] = None


def latent_step(z: torch.Tensor, grad: torch.Tensor, opt: LatentOptimizer) -> torch.Tensor:
    """One optimizer update of the latent; model parameters are never touched."""
    if grad.shape != z.shape:
        raise ParameterError("gradient shape mismatch")
    if not torch.isfinite(grad).all():
        raise OptimizationError(f"non-finite gradient at optimization step {opt.step_count}")
    opt.step_count += 1
    if opt.method == "sgd":
        return z - opt.lr * grad
    if opt.m is None:
        opt.m = torch.zeros_like(z)
        opt.v = torch.zeros_like(z)
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    m_hat = opt.m / (1 - opt.beta1 ** opt.step_count)
    v_hat = opt.v / (1 - opt.beta2 ** opt.step_count)
    return z - opt.lr * m_hat / (torch.sqrt(v_hat) + opt.eps)


def motion_supervision(
    z_hat: torch.Tensor,
    z_prev_ref: torch.Tensor,
    handles: np.ndarray,
    targets: np.ndarray,
    mask_latent: Optional[np.ndarray],
    config: DragConfig,
    backend: ModelBackend,
    cond: Conditioning,
    schedule: Optional[NoiseSchedule] = None,
    stop_gradient: bool = True,
) -> tuple[float, torch.Tensor]:
    """Motion-supervision loss and its gradient w.r.t. the current latent.

    Term 1 pulls, for every unconverged handle i and every patch site q around
    it, the feature at q + d_i toward the (stop-gradient) feature at q, where
    d_i is the unit vector from handle to target. Term 2 regularizes the
    one-step-denoised latent toward the cached inversion latent outside the
    editable mask. ``stop_gradient=False`` exists for gradient-semantics
    checks only.
    """
    schedule = schedule if schedule is not None else backend.schedule
    t = config.t_opt
    z = z_hat.detach().clone().requires_grad_(True)
    size_hw = (int(z.shape[1]), int(z.shape[2]))
    dists = np.linalg.norm(targets - handles, axis=1)
    active = np.nonzero(dists > config.stop_dist)[0]

    loss = z.new_zeros(())
    if len(active) > 0:
        fmap = extract_features(
            backend, z, t, cond, block=config.feature_block, cfg_concat=config.cfg_concat
        ).data
        for i in active:
            d = (targets[i] - handles[i]) / dists[i]
            for qx, qy in patch_sites(handles[i], config.r1, size_hw):
                ref = fmap[:, qy, qx]
                if stop_gradient:
                    ref = ref.detach()
                moved = bilinear_sample(fmap, (qx + d[0], qy + d[1]))
                loss = loss + (moved - ref).abs().sum()

    if config.lam > 0 and mask_latent is not None and (mask_latent == 0).any():
        eps_pred = predict_noise(backend, z, t, cond)
        z_prev = ddim_transition(z, eps_pred, t, t - 1, schedule)
        keep = torch.from_numpy((1 - mask_latent).astype(np.float64)).to(z.dtype)
        loss = loss + config.lam * ((z_prev - z_prev_ref.detach()) * keep).abs().sum()

    if loss.requires_grad:
        grad = torch.autograd.grad(loss, z)[0]
    else:
        grad = torch.zeros_like(z)
    return float(loss.detach()), grad


def track_points(
    features_current: FeatureMap | torch.Tensor,
    features_reference: FeatureMap | torch.Tensor,
    handles: np.ndarray,
    initial_handles: np.ndarray,
    r2: int,
    frozen: Optional[Sequence[bool]] = None,
) -> np.ndarray:
    """Relocate each handle to the nearest-neighbor feature match.

    For handle i the reference is always the ORIGINAL latent's feature at the
    INITIAL handle position; the search runs over the integer sites within
    radius r2 of the current position (clipped at borders), with ties broken
    by the smallest row-major (y, then x) index. Frozen (converged) handles
    are left unmoved.
    """
    if r2 < 1:
        raise ParameterError(f"r2 must be >= 1, got {r2}")
    cur = _fmap_tensor(features_current).detach()
    ref = _fmap_tensor(features_reference).detach()
    if cur.shape != ref.shape:
        raise ParameterError("current/reference feature shapes differ")
    size_hw = (int(cur.shape[1]), int(cur.shape[2]))
    out = handles.astype(np.float64).copy()
    for i in range(len(handles)):
        if frozen is not None and frozen[i]:
            continue
        ref_vec = bilinear_sample(ref, initial_handles[i])
        sites = patch_sites(handles[i], r2, size_hw)
        xs = torch.tensor([s[0] for s in sites])
        ys = torch.tensor([s[1] for s in sites])
        costs = (cur[:, ys, xs] - ref_vec[:, None]).abs().sum(dim=0)
        best = int(torch.argmin(costs))  # first occurrence wins: row-major tie-break
        out[i] = sites[best]
    return out


def reduce_mask(mask: Optional[np.ndarray], size_hw: tuple[int, int]) -> Optional[np.ndarray]:
    """Nearest-neighbor reduction of an image-resolution mask to latent size."""
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.shape == size_hw:
        return mask.astype(np.uint8)
    h, w = size_hw
    src_h, src_w = mask.shape
    rows = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(int), src_h - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(int), src_w - 1)
    return mask[np.ix_(rows, cols)].astype(np.uint8)


def drag(
    trajectory: Sequence[Latent],
    instruction: DragInstruction,
    config: DragConfig,
    backend: ModelBackend,
    cond: Optional[Conditioning] = None,
    on_iteration: Optional[Callable[[TraceRecord], None]] = None,
) -> DragResult:
    """Run the full motion-supervision / point-tracking loop at step t_opt.

    Stops early once every handle is within ``stop_dist`` of its target;
    hitting ``max_iters`` is still a success, flagged as not converged.
    Reference features for tracking are computed once from the unmodified
    inverted latent.
    """
    schedule = backend.schedule
    t = config.t_opt
    if len(trajectory) <= t:
        raise ParameterError(f"trajectory of length {len(trajectory)} does not reach t_opt={t}")
    if trajectory[t].step != t:
        raise ParameterError("trajectory must be indexed by step")
    z_t = trajectory[t].data.detach().clone()
    z_prev_ref = trajectory[t - 1].data.detach().clone()
    size_hw = (int(z_t.shape[1]), int(z_t.shape[2]))

    if cond is None:
        embedding = backend.encode_prompt(instruction.prompt)
        negative = backend.encode_prompt(None) if config.cfg_concat else None
        cond = Conditioning(prompt_embedding=embedding, negative_embedding=negative)

    handles = np.asarray(instruction.handles, dtype=np.float64)
    targets = np.asarray(instruction.targets, dtype=np.float64)
    if instruction.image_size is not None:
        img_h, img_w = instruction.image_size
        scale = np.array([size_hw[1] / img_w, size_hw[0] / img_h])
        handles = handles * scale
        targets = targets * scale
    for p in np.concatenate([handles, targets]):
        if not point_in_bounds(p, size_hw):
            raise ParameterError(f"point {tuple(p)} outside latent bounds {size_hw}")
    mask_latent = reduce_mask(instruction.mask, size_hw)

    initial_handles = handles.copy()
    dists = np.linalg.norm(targets - handles, axis=1)
    trace = HandleTrace(
        initial_handles=[tuple(map(float, p)) for p in handles],
        initial_distances=[float(d) for d in dists],
    )
    if (dists <= config.stop_dist).all():
        trace.converged = True
        return DragResult(latent=trajectory[t].clone(), trace=trace, final_handles=handles)

    features_reference = extract_features(
        backend, z_t, t, cond, block=config.feature_block, cfg_concat=config.cfg_concat
    )
    opt = LatentOptimizer(lr=config.latent_lr, method=config.optimizer)
    z_hat = z_t.clone()
    for k in range(config.max_iters):
        frozen = dists <= config.stop_dist
        loss, grad = motion_supervision(
            z_hat, z_prev_ref, handles, targets, mask_latent, config, backend, cond, schedule
        )
        z_hat = latent_step(z_hat, grad, opt)
        features_current = extract_features(
            backend, z_hat, t, cond, block=config.feature_block, cfg_concat=config.cfg_concat
        )
        handles = track_points(
            features_current, features_reference, handles, initial_handles, config.r2, frozen
        )
        dists = np.linalg.norm(targets - handles, axis=1)
        record = TraceRecord(
            iteration=k,
            handles=[tuple(map(float, p)) for p in handles],
            loss=loss,
            distances=[float(d) for d in dists],
        )
        trace.records.append(record)
        if on_iteration is not None:
            on_iteration(record)
        if (dists <= config.stop_dist).all():
            trace.converged = True
            break
    return DragResult(
        latent=Latent(z_hat.detach(), step=t, seed=trajectory[t].seed),
        trace=trace,
        final_handles=handles,
    )
