"""Benchmark harness: dataset handling, toy benchmark synthesis, the
fidelity/distance metrics over full pipeline runs, and ablation sweeps.

On-disk dataset layout: one subdirectory per category; each sample is an
instruction JSON (the documented schema) next to the image and mask PNGs it
references. The toy generator writes the same format, so generated sets load
through the same code path as real ones.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__ as _version
from .backend import Conditioning, ModelBackend
from .engine import DragConfig, DragInstruction, DragResult, InstructionDoc, drag
from .errors import DatasetError, ParameterError
from .ioutil import (
    atomic_write_bytes,
    load_image_png,
    mask_to_png_bytes,
    png_bytes_to_mask,
    save_image_png,
)
from .lora import FinetuneConfig, finetune_identity, inject_lora
from .metrics import (
    CorrespondenceCase,
    default_correspondence_block,
    default_correspondence_step,
    find_correspondence,
    make_metric,
)
from .refcontrol import guided_denoise
from .schedule import ddim_invert
from .shapes import render_disc, render_square
from .toy import latent_from_image

# Reference metric tables for the optional pretrained-stack integration mode.
# Not CI targets: reproducing them needs the full-size pretrained model and
# benchmark images.
REFERENCE_IMAGE_FIDELITY = {
    "art works": 0.88, "landscape": 0.88, "city": 0.89, "countryside": 0.88,
    "animals": 0.87, "head": 0.85, "upper body": 0.89, "full body": 0.95,
    "interior design": 0.90, "other objects": 0.87,
}
REFERENCE_MEAN_DISTANCE = {
    "art works": 30.74, "landscape": 36.55, "city": 26.18, "countryside": 43.21,
    "animals": 39.22, "head": 36.43, "upper body": 39.75, "full body": 20.56,
    "interior design": 24.83, "other objects": 39.52,
}


@dataclass
class BenchSample:
    sample_id: str
    category: str
    image_path: Path
    mask_path: Optional[Path]
    image: np.ndarray
    doc: InstructionDoc
    instruction: DragInstruction


def load_dataset(root: str | Path, channels: Optional[int] = None) -> list[BenchSample]:
    """Load every sample under ``root``; malformed samples raise, named."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    samples: list[BenchSample] = []
    errors: list[str] = []
    for category_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for doc_path in sorted(category_dir.glob("*.json")):
            name = f"{category_dir.name}/{doc_path.stem}"
            try:
                doc = InstructionDoc.from_json_bytes(doc_path.read_bytes())
                image_path = (category_dir / doc.image).resolve()
                image = load_image_png(image_path, channels=channels)
                mask_path = (category_dir / doc.mask).resolve() if doc.mask else None
                mask = png_bytes_to_mask(mask_path.read_bytes()) if mask_path else None
                instruction = doc.to_instruction(mask, image_size=image.shape[1:])
                samples.append(
                    BenchSample(
                        sample_id=name,
                        category=category_dir.name,
                        image_path=image_path,
                        mask_path=mask_path,
                        image=image,
                        doc=doc,
                        instruction=instruction,
                    )
                )
            except Exception as exc:  # noqa: BLE001 - every malformed sample gets named
                errors.append(f"{name}: {exc}")
    if errors:
        raise DatasetError("malformed samples:\n" + "\n".join(errors))
    return samples


def _toy_mask_band(size: int, centers: list[tuple[float, float]], radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for cx, cy in centers:
        mask |= (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    return mask.astype(np.uint8)


def _fit_to_canvas(size: int, extent: float, dist: float, margin: float) -> tuple[float, float]:
    """Shrink shape extent and drag distance proportionally so the swept area
    stays inside the image (relevant for small canvases)."""
    budget = (size - 1) / 2.0 - margin - 0.26
    need = extent + dist
    if need > budget:
        factor = budget / need
        extent *= factor
        dist *= factor
    return extent, dist


def _background_texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Smooth dark background texture; gives every sample a distinct identity
    that the backbone has not memorized, so identity fine-tuning has headroom
    and feature matching has grip."""
    field = rng.normal(size=(size, size))
    kernel = np.exp(-0.5 * (np.arange(-4, 5) / 2.0) ** 2)
    kernel /= kernel.sum()
    for axis in (0, 1):
        field = np.apply_along_axis(
            lambda row: np.convolve(np.concatenate([row[-4:], row, row[:4]]), kernel, mode="valid"),
            axis,
            field,
        )
    field = (field - field.mean()) / (field.std() + 1e-9)
    # bounded lift above the -1 background: range [-1, -1 + 3*amplitude]
    return (-1.0 + amplitude * 1.5 * (1.0 + np.tanh(field))).astype(np.float32)


def generate_toy_benchmark(
    n: int,
    seed: int,
    out_dir: str | Path,
    image_size: int = 32,
    kinds: Sequence[str] = ("translate", "deform", "scene"),
    channels: int = 1,
    texture_amplitude: float = 0.15,
    with_prompts: bool = False,
) -> Path:
    """Synthesize ``n`` drag tasks with achievable ground truth, on disk.

    ``translate`` moves a disc ~one radius along a random direction (handle on
    the leading edge); ``deform`` stretches one square edge outward; ``scene``
    translates a disc while a second object must stay put (mask excludes it).
    Each image sits on a seeded smooth background texture. Same seed ->
    byte-identical dataset.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    size = image_size
    for i in range(n):
        kind = kinds[i % len(kinds)]
        sample = f"{i:03d}"
        category_dir = out_dir / f"toy:{kind}"
        category_dir.mkdir(parents=True, exist_ok=True)
        background = _background_texture(rng, size, texture_amplitude)
        fg = float(rng.uniform(0.6, 1.0))
        angle = float(rng.uniform(0.0, 2 * np.pi))
        dhat = np.array([np.cos(angle), np.sin(angle)])
        if kind == "deform":
            half = float(rng.uniform(size * 0.13, size * 0.17))
            dist = float(rng.uniform(size * 0.09, size * 0.13))
            half, dist = _fit_to_canvas(size, half, dist, 3.0)
            lo = half + dist + 3.0
            cx = float(rng.uniform(lo, size - 1 - lo))
            cy = float(rng.uniform(lo, size - 1 - lo))
            axis = int(rng.integers(0, 4))  # 0:+x 1:-x 2:+y 3:-y
            dhat = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]][axis], dtype=np.float64)
            layer = np.maximum(render_square(size, cx, cy, half, fg=fg), background)
            image = np.broadcast_to(layer, (channels, size, size)).copy()
            handle = np.array([cx, cy]) + half * dhat
            target = handle + dist * dhat
            mask = _toy_mask_band(
                size, [(cx, cy), (cx + dist * dhat[0], cy + dist * dhat[1])], half * 1.6 + 2.0
            )
            prompt = "square" if with_prompts else None
        else:
            radius = float(rng.uniform(size * 0.14, size * 0.19))
            dist = float(rng.uniform(radius * 0.8, radius * 1.1))
            radius, dist = _fit_to_canvas(size, radius, dist, 2.5)
            lo = radius + dist + 2.5
            cx = float(rng.uniform(lo, size - 1 - lo))
            cy = float(rng.uniform(lo, size - 1 - lo))
            layer = render_disc(size, cx, cy, radius, fg=fg)
            prompt = "disc" if with_prompts else None
            mask_centers = [
                (cx + f * dist * dhat[0], cy + f * dist * dhat[1]) for f in np.linspace(0, 1, 6)
            ]
            mask = _toy_mask_band(size, mask_centers, radius + 3.5)
            if kind == "scene":
                # second, static object in the farthest corner, excluded from the mask
                corner = np.array(
                    [size * 0.8 if cx < size / 2 else size * 0.2,
                     size * 0.8 if cy < size / 2 else size * 0.2]
                )
                other = render_square(size, corner[0], corner[1], size * 0.1, fg=float(rng.uniform(0.6, 1.0)))
                layer = np.maximum(layer, other)
                prompt = "scene" if with_prompts else None
            layer = np.maximum(layer, background)
            image = np.broadcast_to(layer, (channels, size, size)).copy()
            handle = np.array([cx, cy]) + radius * dhat
            target = handle + dist * dhat
        handle = np.clip(np.round(handle, 1), 0, size - 1)
        target = np.clip(np.round(target, 1), 0, size - 1)

        def num(v: float) -> float | int:
            return int(v) if float(v).is_integer() else float(v)

        doc = InstructionDoc(
            image=f"{sample}.png",
            mask=f"{sample}_mask.png",
            prompt=prompt,
            points=[{
                "handle": [num(handle[0]), num(handle[1])],
                "target": [num(target[0]), num(target[1])],
            }],
        )
        save_image_png(category_dir / f"{sample}.png", image)
        atomic_write_bytes(category_dir / f"{sample}_mask.png", mask_to_png_bytes(mask))
        atomic_write_bytes(category_dir / f"{sample}.json", doc.to_json_bytes())
    return out_dir


@dataclass
class BenchRunConfig:
    """Everything a benchmark run needs besides the dataset and backend."""

    drag: DragConfig = field(default_factory=DragConfig)
    finetune: Optional[FinetuneConfig] = None
    lora_rank: int = 16
    metric: str = "proxy"
    t_feat: Optional[int] = None
    corr_block: Optional[int] = None
    workers: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "drag": dataclasses.asdict(self.drag),
            "finetune": dataclasses.asdict(self.finetune) if self.finetune else None,
            "lora_rank": self.lora_rank,
            "metric": self.metric,
            "t_feat": self.t_feat,
            "corr_block": self.corr_block,
            "workers": self.workers,
            "seed": self.seed,
        }


@dataclass
class SampleOutcome:
    sample_id: str
    category: str
    if_distance: float
    pair_distances: list[float]
    initial_distance: float
    final_trace_distance: float
    iterations: int
    converged: bool
    unmasked_l1_change: Optional[float]
    edited: np.ndarray
    reference: np.ndarray


@dataclass
class BenchReport:
    rows: list[dict]
    per_category: dict[str, dict]
    overall: dict
    manifest: dict

    def to_json_dict(self) -> dict:
        return {
            "rows": self.rows,
            "per_category": self.per_category,
            "overall": self.overall,
            "manifest": self.manifest,
        }

    def to_text(self) -> str:
        lines = []
        header = f"{'category':<20} {'n':>4} {'IF':>8} {'MD':>8}"
        lines.append(header)
        lines.append("-" * len(header))
        for cat in sorted(self.per_category):
            agg = self.per_category[cat]
            lines.append(
                f"{cat:<20} {agg['n']:>4d} {agg['image_fidelity']:>8.4f} {agg['mean_distance']:>8.3f}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'overall':<20} {self.overall['n']:>4d} "
            f"{self.overall['image_fidelity']:>8.4f} {self.overall['mean_distance']:>8.3f}"
        )
        return "\n".join(lines)

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / "report.json", json.dumps(self.to_json_dict(), indent=2, sort_keys=True).encode())
        atomic_write_bytes(out_dir / "report.txt", (self.to_text() + "\n").encode())
        csv_lines = ["sample,category,if_distance,md,initial_distance,final_trace_distance,iterations,converged"]
        for r in self.rows:
            csv_lines.append(
                f"{r['sample_id']},{r['category']},{r['if_distance']:.6f},{r['md']:.6f},"
                f"{r['initial_distance']:.4f},{r['final_trace_distance']:.4f},{r['iterations']},{int(r['converged'])}"
            )
        atomic_write_bytes(out_dir / "rows.csv", ("\n".join(csv_lines) + "\n").encode())


def run_sample(
    sample: BenchSample,
    base_backend: ModelBackend,
    config: BenchRunConfig,
    metric=None,
    on_event: Optional[Callable] = None,
) -> SampleOutcome:
    """Full pipeline on one sample: (fine-tune) -> invert -> drag -> guided denoise -> metrics."""
    backend = copy.deepcopy(base_backend)
    metric = metric if metric is not None else make_metric(config.metric)
    z0 = latent_from_image(sample.image, seed=config.seed)
    embedding = backend.encode_prompt(sample.instruction.prompt)
    cond = Conditioning(prompt_embedding=embedding)
    if config.finetune is not None:
        adapter = inject_lora(backend, rank=config.lora_rank, seed=config.finetune.seed)
        finetune_identity(backend, adapter, z0, backend.schedule, config.finetune, embedding=embedding)
    trajectory = ddim_invert(z0, config.drag.t_opt, backend, cond)
    result: DragResult = drag(
        trajectory, sample.instruction, config.drag, backend, cond=cond, on_iteration=on_event
    )
    edited_latent, reference_latent = guided_denoise(
        result.latent, trajectory[config.drag.t_opt], backend, cond
    )
    edited = edited_latent.data.numpy()
    reference = reference_latent.data.numpy()

    t_feat = config.t_feat if config.t_feat is not None else default_correspondence_step(backend.schedule)
    corr_block = config.corr_block if config.corr_block is not None else default_correspondence_block(backend)
    pair_distances = []
    for handle, target in zip(sample.instruction.handles, sample.instruction.targets):
        fx, fy = find_correspondence(
            sample.image, edited, handle, backend,
            cond=cond, t_feat=t_feat, block=corr_block, seed=config.seed,
        )
        pair_distances.append(float(np.hypot(fx - target[0], fy - target[1])))

    trace = result.trace
    final_dist = (
        float(np.mean(trace.records[-1].distances)) if trace.records
        else float(np.mean(trace.initial_distances))
    )
    unmasked_change: Optional[float] = None
    if sample.instruction.mask is not None and (sample.instruction.mask == 0).any():
        keep = sample.instruction.mask == 0
        unmasked_change = float(np.abs(edited - sample.image)[:, keep].mean())
    return SampleOutcome(
        sample_id=sample.sample_id,
        category=sample.category,
        if_distance=float(metric.distance(sample.image, edited)),
        pair_distances=pair_distances,
        initial_distance=float(np.mean(trace.initial_distances)),
        final_trace_distance=final_dist,
        iterations=trace.iterations,
        converged=trace.converged,
        unmasked_l1_change=unmasked_change,
        edited=edited,
        reference=reference,
    )


def run_benchmark(
    samples: Sequence[BenchSample],
    base_backend: ModelBackend,
    config: BenchRunConfig,
    keep_outcomes: bool = False,
) -> BenchReport | tuple[BenchReport, list[SampleOutcome]]:
    """Evaluate the pipeline over a dataset; aggregation is order-independent."""
    metric = make_metric(config.metric)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(lambda s: run_sample(s, base_backend, config, metric), samples))
    else:
        outcomes = [run_sample(s, base_backend, config, metric) for s in samples]
    outcomes.sort(key=lambda o: o.sample_id)

    rows = []
    per_cat: dict[str, dict] = {}
    all_pairs: list[float] = []
    all_if: list[float] = []
    for o in outcomes:
        md = float(np.mean(o.pair_distances))
        rows.append({
            "sample_id": o.sample_id,
            "category": o.category,
            "if_distance": o.if_distance,
            "md": md,
            "initial_distance": o.initial_distance,
            "final_trace_distance": o.final_trace_distance,
            "iterations": o.iterations,
            "converged": o.converged,
            "unmasked_l1_change": o.unmasked_l1_change,
        })
        cat = per_cat.setdefault(o.category, {"if": [], "pairs": []})
        cat["if"].append(o.if_distance)
        cat["pairs"].extend(o.pair_distances)
        all_if.append(o.if_distance)
        all_pairs.extend(o.pair_distances)
    per_category = {
        cat: {
            "n": len(agg["if"]),
            "image_fidelity": 1.0 - float(np.mean(agg["if"])),
            "mean_distance": float(np.mean(agg["pairs"])),
        }
        for cat, agg in per_cat.items()
    }
    overall = {
        "n": len(outcomes),
        "image_fidelity": 1.0 - float(np.mean(all_if)) if all_if else 1.0,
        "mean_distance": float(np.mean(all_pairs)) if all_pairs else 0.0,
    }
    manifest = {
        "config": config.to_dict(),
        "schedule": base_backend.schedule.to_dict(),
        "t_feat": config.t_feat if config.t_feat is not None else default_correspondence_step(base_backend.schedule),
        "corr_block": config.corr_block if config.corr_block is not None else default_correspondence_block(base_backend),
        "metric": metric.name,
        "backend_id": getattr(base_backend, "state_signature", lambda: "unknown")(),
        "version": _version,
    }
    report = BenchReport(rows=rows, per_category=per_category, overall=overall, manifest=manifest)
    if keep_outcomes:
        return report, outcomes
    return report


ABLATION_PARAMETERS = ("inversion_t", "finetune_steps", "feature_block")


@dataclass
class AblationSeries:
    parameter: str
    rows: list[dict]

    def to_csv(self) -> str:
        lines = [f"{self.parameter},IF,MD"]
        for r in self.rows:
            if r.get("error"):
                lines.append(f"{r['value']},,")
            else:
                lines.append(f"{r['value']},{r['image_fidelity']:.6f},{r['mean_distance']:.6f}")
        return "\n".join(lines) + "\n"

    def value_map(self) -> dict:
        return {r["value"]: r for r in self.rows}


def run_ablation(
    parameter: str,
    values: Sequence,
    samples: Sequence[BenchSample],
    base_backend: ModelBackend,
    config: BenchRunConfig,
) -> AblationSeries:
    """Run the full pipeline per parameter value; per-value failures are
    recorded and the sweep continues."""
    if parameter not in ABLATION_PARAMETERS:
        raise ParameterError(f"unknown ablation parameter {parameter!r}; pick one of {ABLATION_PARAMETERS}")
    num_steps = base_backend.schedule.num_steps
    rows = []
    for value in values:
        cfg = copy.deepcopy(config)
        try:
            if parameter == "inversion_t":
                if not (1 <= int(value) <= num_steps):
                    raise ParameterError(f"t={value} outside [1, {num_steps}]")
                cfg.drag = dataclasses.replace(cfg.drag, t_opt=int(value))
            elif parameter == "finetune_steps":
                if int(value) < 0:
                    raise ParameterError(f"steps={value} must be >= 0")
                base_ft = cfg.finetune if cfg.finetune is not None else FinetuneConfig()
                cfg.finetune = dataclasses.replace(base_ft, steps=int(value))
            else:
                if int(value) not in base_backend.feature_blocks:
                    raise ParameterError(f"block {value} not in {base_backend.feature_blocks}")
                cfg.drag = dataclasses.replace(cfg.drag, feature_block=int(value))
            report = run_benchmark(samples, base_backend, cfg)
            rows.append({
                "value": value,
                "image_fidelity": report.overall["image_fidelity"],
                "mean_distance": report.overall["mean_distance"],
                "error": None,
            })
        except Exception as exc:  # noqa: BLE001 - sweep robustness is contractual
            rows.append({"value": value, "image_fidelity": None, "mean_distance": None, "error": str(exc)})
    return AblationSeries(parameter=parameter, rows=rows)
