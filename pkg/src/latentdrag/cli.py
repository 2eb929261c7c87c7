"""Batch entry points: training, fine-tuning, dragging, benchmarking,
ablations, toy benchmark generation, and serving the HTTP API.

Every command writes a run-manifest JSON (seeds, config, checkpoint hashes)
next to its outputs; same manifest in, byte-identical artifacts out on a
single worker.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .backend import Conditioning
from .bench import (
    ABLATION_PARAMETERS,
    BenchRunConfig,
    generate_toy_benchmark,
    load_dataset,
    run_ablation,
    run_benchmark,
)
from .engine import DragConfig, InstructionDoc, drag
from .errors import LatentDragError
from .ioutil import (
    atomic_write_bytes,
    image_to_png_bytes,
    load_image_png,
    png_bytes_to_mask,
    sha256_file,
)
from .lora import FinetuneConfig, finetune_identity, inject_lora, load_adapter
from .refcontrol import guided_denoise
from .schedule import ddim_invert
from .shapes import make_shape_corpus
from .toy import ToyModelConfig, latent_from_image, load_checkpoint, save_checkpoint, toy_train


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = dict(payload, version=__version__)
    atomic_write_bytes(out_dir / "run_manifest.json", json.dumps(payload, indent=2, sort_keys=True).encode())


def drag_config_options(fn):
    """Shared drag flags; defaults are the reference operating point."""
    options = [
        click.option("--t-opt", default=35, show_default=True, help="Diffusion step whose latent is optimized."),
        click.option("--max-iters", default=80, show_default=True, help="Optimization step cap."),
        click.option("--latent-lr", default=0.01, show_default=True, help="Latent learning rate (adaptive-moment)."),
        click.option("--r1", default=1, show_default=True, help="Motion-supervision patch radius."),
        click.option("--r2", default=3, show_default=True, help="Point-tracking search radius."),
        click.option("--lam", default=0.1, show_default=True, help="Unmasked-region regularizer weight."),
        click.option("--feature-block", default=3, show_default=True, help="Decoder block for supervision features."),
        click.option("--stop-dist", default=1.0, show_default=True, help="Per-handle convergence distance."),
        click.option("--cfg-concat", is_flag=True, help="Concatenate positive/negative feature maps (generated-image mode)."),
        click.option("--seed", default=0, show_default=True, help="Run seed."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _drag_config_from_flags(**kw) -> DragConfig:
    return DragConfig(
        t_opt=kw["t_opt"], max_iters=kw["max_iters"], latent_lr=kw["latent_lr"],
        r1=kw["r1"], r2=kw["r2"], lam=kw["lam"], feature_block=kw["feature_block"],
        stop_dist=kw["stop_dist"], cfg_concat=kw["cfg_concat"], seed=kw["seed"],
    )


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Drag-based image editing on a toy diffusion backend."""


@main.command("train-toy")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--image-size", default=64, show_default=True)
@click.option("--channels", default=1, show_default=True)
@click.option("--base-width", default=32, show_default=True)
@click.option("--depth", default=4, show_default=True)
@click.option("--num-steps", default=50, show_default=True, help="Diffusion steps T.")
@click.option("--epochs", default=4, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--learning-rate", default=2e-3, show_default=True)
@click.option("--corpus-size", default=360, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_train_toy(out_dir, image_size, channels, base_width, depth, num_steps,
                  epochs, batch_size, learning_rate, corpus_size, seed) -> None:
    """Train the toy backend on a synthetic shape corpus and save a checkpoint."""
    try:
        config = ToyModelConfig(
            image_size=image_size, channels=channels, base_width=base_width, depth=depth,
            num_steps=num_steps, epochs=epochs, batch_size=batch_size,
            learning_rate=learning_rate, seed=seed,
        )
        corpus = make_shape_corpus(corpus_size, image_size, channels=channels, seed=seed + 1)
        backend = toy_train(corpus, config)
        save_checkpoint(backend, out_dir)
        _write_manifest(out_dir, {
            "command": "train-toy", "config": config.to_dict(), "corpus_size": corpus_size,
            "corpus_hash": backend.corpus_hash,
            "val_initial": backend.train_history["val_initial"],
            "val_final": backend.train_history["val_final"],
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo(f"checkpoint written to {out_dir}")


@main.command("gen-toybench")
@click.option("--n", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--image-size", default=32, show_default=True)
@click.option("--kinds", default="translate,deform,scene", show_default=True)
def cmd_gen_toybench(n, seed, out_dir, image_size, kinds) -> None:
    """Generate a synthetic drag benchmark in the documented on-disk format."""
    try:
        generate_toy_benchmark(n, seed, out_dir, image_size=image_size, kinds=tuple(kinds.split(",")))
        _write_manifest(out_dir, {
            "command": "gen-toybench", "n": n, "seed": seed,
            "image_size": image_size, "kinds": kinds.split(","),
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo(f"{n} samples written to {out_dir}")


@main.command("finetune")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--steps", default=80, show_default=True)
@click.option("--learning-rate", default=5e-4, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--rank", default=16, show_default=True, help="Adapter rank.")
@click.option("--prompt", default=None)
@click.option("--seed", default=0, show_default=True)
def cmd_finetune(checkpoint, image_path, out_dir, steps, learning_rate, batch_size, rank, prompt, seed) -> None:
    """Identity-preserving fine-tuning of the backend on one image."""
    try:
        backend = load_checkpoint(checkpoint)
        image = load_image_png(image_path, channels=backend.config.channels)
        z0 = latent_from_image(image)
        config = FinetuneConfig(steps=steps, learning_rate=learning_rate, batch_size=batch_size, seed=seed)
        adapter = inject_lora(backend, rank=rank, seed=seed)
        finetune_identity(backend, adapter, z0, backend.schedule, config,
                          embedding=backend.encode_prompt(prompt))
        out_dir.mkdir(parents=True, exist_ok=True)
        adapter.save(out_dir)
        _write_manifest(out_dir, {
            "command": "finetune", "config": dataclasses.asdict(config), "rank": rank,
            "prompt": prompt, "checkpoint_hash": sha256_file(checkpoint / "params.pt"),
            "image": str(image_path), "final_loss": adapter.loss_trace[-1] if adapter.loss_trace else None,
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo(f"adapter written to {out_dir}")


@main.command("drag")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--instruction", "instruction_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--adapter", "adapter_dir", default=None, type=click.Path(exists=True, path_type=Path),
              help="Trained adapter to keep active through inversion and denoising.")
@click.option("--finetune-steps", default=80, show_default=True,
              help="Fine-tune on the input first (0 skips; ignored with --adapter).")
@click.option("--rank", default=16, show_default=True, help="Adapter rank for --finetune-steps.")
@drag_config_options
def cmd_drag(checkpoint, instruction_path, out_dir, adapter_dir, finetune_steps, rank, **kw) -> None:
    """Run the full edit: (fine-tune) -> invert -> drag -> guided denoise."""
    try:
        backend = load_checkpoint(checkpoint)
        config = _drag_config_from_flags(**kw)
        doc = InstructionDoc.from_json_bytes(Path(instruction_path).read_bytes())
        base = Path(instruction_path).parent
        image = load_image_png(base / doc.image, channels=backend.config.channels)
        mask = png_bytes_to_mask((base / doc.mask).read_bytes()) if doc.mask else None
        instruction = doc.to_instruction(mask, image_size=image.shape[1:])
        z0 = latent_from_image(image, seed=kw["seed"])
        embedding = backend.encode_prompt(instruction.prompt)
        negative = backend.encode_prompt(None) if config.cfg_concat else None
        cond = Conditioning(prompt_embedding=embedding, negative_embedding=negative)

        if adapter_dir is not None:
            load_adapter(backend, adapter_dir)
        elif finetune_steps > 0:
            adapter = inject_lora(backend, rank=rank, seed=kw["seed"])
            finetune_identity(
                backend, adapter, z0, backend.schedule,
                FinetuneConfig(steps=finetune_steps, seed=kw["seed"]), embedding=embedding,
            )

        trajectory = ddim_invert(z0, config.t_opt, backend, cond)
        result = drag(trajectory, instruction, config, backend, cond=cond)
        edited, reference = guided_denoise(result.latent, trajectory[config.t_opt], backend, cond)

        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / "edited.png", image_to_png_bytes(edited.data.numpy()))
        atomic_write_bytes(out_dir / "reference.png", image_to_png_bytes(reference.data.numpy()))
        atomic_write_bytes(out_dir / "trace.json", json.dumps(result.trace.to_dict(), indent=2).encode())
        _write_manifest(out_dir, {
            "command": "drag", "config": dataclasses.asdict(config),
            "instruction": str(instruction_path), "adapter": str(adapter_dir) if adapter_dir else None,
            "finetune_steps": 0 if adapter_dir else finetune_steps,
            "checkpoint_hash": sha256_file(checkpoint / "params.pt"),
            "converged": result.trace.converged, "iterations": result.trace.iterations,
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo(f"edited image and trace written to {out_dir}")


@main.command("bench")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--finetune-steps", default=80, show_default=True, help="Per-sample fine-tune steps (0 skips).")
@click.option("--metric", default="proxy", show_default=True, type=click.Choice(["proxy", "lpips"]))
@click.option("--workers", default=1, show_default=True)
@drag_config_options
def cmd_bench(checkpoint, dataset_dir, out_dir, finetune_steps, metric, workers, **kw) -> None:
    """Evaluate the pipeline over a dataset; writes report.json/.txt and rows.csv."""
    try:
        backend = load_checkpoint(checkpoint)
        samples = load_dataset(dataset_dir, channels=backend.config.channels)
        config = BenchRunConfig(
            drag=_drag_config_from_flags(**kw),
            finetune=FinetuneConfig(steps=finetune_steps, seed=kw["seed"]) if finetune_steps > 0 else None,
            metric=metric, workers=workers, seed=kw["seed"],
        )
        report = run_benchmark(samples, backend, config)
        report.save(out_dir)
        _write_manifest(out_dir, {
            "command": "bench", "dataset": str(dataset_dir), "samples": len(samples),
            "config": config.to_dict(), "checkpoint_hash": sha256_file(checkpoint / "params.pt"),
            "overall": report.overall,
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo(report.to_text())


@main.command("ablate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--parameter", required=True, type=click.Choice(list(ABLATION_PARAMETERS)))
@click.option("--values", required=True, help="Comma-separated sweep values, e.g. 10,20,30,40,50.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--finetune-steps", default=0, show_default=True)
@click.option("--workers", default=1, show_default=True)
@drag_config_options
def cmd_ablate(checkpoint, dataset_dir, parameter, values, out_dir, finetune_steps, workers, **kw) -> None:
    """Sweep one pipeline parameter and emit plot-ready CSV plus a report."""
    try:
        backend = load_checkpoint(checkpoint)
        samples = load_dataset(dataset_dir, channels=backend.config.channels)
        config = BenchRunConfig(
            drag=_drag_config_from_flags(**kw),
            finetune=FinetuneConfig(steps=finetune_steps, seed=kw["seed"]) if finetune_steps > 0 else None,
            workers=workers, seed=kw["seed"],
        )
        series = run_ablation(parameter, [int(v) for v in values.split(",")], samples, backend, config)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / "sweep.csv", series.to_csv().encode())
        atomic_write_bytes(
            out_dir / "sweep.json", json.dumps({"parameter": parameter, "rows": series.rows}, indent=2).encode()
        )
        _write_manifest(out_dir, {
            "command": "ablate", "parameter": parameter, "values": values,
            "dataset": str(dataset_dir), "config": config.to_dict(),
            "checkpoint_hash": sha256_file(checkpoint / "params.pt"),
        })
    except LatentDragError as exc:
        _fail(str(exc))
    click.echo((out_dir / "sweep.csv").read_text().strip())


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--data-root", required=True, type=click.Path(path_type=Path),
              envvar="LATENTDRAG_DATA_ROOT", show_envvar=True)
@click.option("--host", default="127.0.0.1", show_default=True, envvar="LATENTDRAG_HOST")
@click.option("--port", default=8008, show_default=True, envvar="LATENTDRAG_PORT")
@click.option("--static-dir", default=None, type=click.Path(exists=True, path_type=Path),
              help="Serve a built web UI from this directory at /ui.")
@click.option("--drag-overrides", default=None, help="JSON object with DragConfig overrides.")
@click.option("--finetune-overrides", default=None, help="JSON object with FinetuneConfig overrides.")
@click.option("--lora-rank", default=16, show_default=True)
def cmd_serve(checkpoint, data_root, host, port, static_dir, drag_overrides, finetune_overrides, lora_rank) -> None:
    """Run the HTTP session service."""
    import uvicorn

    from .service import ServiceSettings, create_app

    settings = ServiceSettings(
        data_root=Path(data_root),
        backend_dir=Path(checkpoint),
        drag_overrides=json.loads(drag_overrides) if drag_overrides else {},
        finetune_overrides=json.loads(finetune_overrides) if finetune_overrides else {},
        lora_rank=lora_rank,
    )
    app = create_app(settings)
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
        expose_headers=["*"],
    )
    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
