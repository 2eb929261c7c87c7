"""Session-oriented HTTP service: upload, fine-tune, drag with live progress,
guided denoising, and benchmark evaluation.

Sessions persist as one directory each (manifest JSON + binary artifacts,
write-then-rename); progress streams as server-sent events with replay by
sequence number. Each pipeline job runs on its own worker thread with its own
backend copy.
"""
import base64
import copy
import dataclasses
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .backend import Conditioning
from .bench import BenchRunConfig, load_dataset, run_benchmark
from .engine import DragConfig, InstructionDoc, TraceRecord, drag
from .errors import LatentDragError, ParameterError
from .ioutil import (
    atomic_write_bytes,
    image_to_png_bytes,
    load_image_png,
    png_bytes_to_image,
    png_bytes_to_mask,
)
from .lora import FinetuneConfig, finetune_identity, inject_lora, load_adapter
from .refcontrol import guided_denoise
from .schedule import Latent, ddim_generate, ddim_invert
from .toy import ToyBackend, latent_from_image, load_checkpoint

VALID_STATES = ("created", "finetuning", "finetuned", "inverted", "dragging", "done", "failed")

# transitions a job may apply; "failed" is reachable from any active state
_TRANSITIONS = {
    "created": {"finetuning", "inverted", "failed"},
    "finetuning": {"finetuned", "failed"},
    "finetuned": {"inverted", "failed"},
    "inverted": {"dragging", "failed"},
    "dragging": {"done", "failed"},
    "done": set(),
    "failed": set(),
}


class ConflictError(ParameterError):
    """Illegal state transition or a second concurrent job."""


@dataclass
class Session:
    session_id: str
    directory: Path
    mode: str = "real"
    state: str = "created"
    error: Optional[str] = None
    created_at: float = 0.0
    updated_at: float = 0.0
    seq: int = 0
    converged: Optional[bool] = None
    drag_config: dict = field(default_factory=dict)
    finetune_config: dict = field(default_factory=dict)
    generated: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    job_active: bool = False
    subscribers: list = field(default_factory=list, repr=False)

    def manifest(self) -> dict:
        return {
            "id": self.session_id,
            "mode": self.mode,
            "state": self.state,
            "error": self.error,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "seq": self.seq,
            "converged": self.converged,
            "drag_config": self.drag_config,
            "finetune_config": self.finetune_config,
            "generated": self.generated,
        }

    def save(self) -> None:
        atomic_write_bytes(
            self.directory / "manifest.json",
            json.dumps(self.manifest(), indent=2, sort_keys=True).encode(),
        )


@dataclass
class ServiceSettings:
    data_root: Path
    backend_dir: Optional[Path] = None
    drag_overrides: dict = field(default_factory=dict)
    finetune_overrides: dict = field(default_factory=dict)
    lora_rank: int = 16


class SessionStore:
    """Directory-backed sessions with in-process progress fan-out."""

    def __init__(self, settings: ServiceSettings, backend: Optional[ToyBackend] = None) -> None:
        self.settings = settings
        self.root = Path(settings.data_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._backend = backend
        self._sessions: dict[str, Session] = {}
        self._load_existing()

    # -- backend ------------------------------------------------------

    @property
    def backend(self) -> ToyBackend:
        if self._backend is None:
            if self.settings.backend_dir is None:
                raise ParameterError("service started without a backend checkpoint")
            self._backend = load_checkpoint(self.settings.backend_dir)
        return self._backend

    def backend_copy(self) -> ToyBackend:
        return copy.deepcopy(self.backend)

    # -- lifecycle ----------------------------------------------------

    def _load_existing(self) -> None:
        for mdir in sorted(self.root.iterdir()) if self.root.is_dir() else []:
            mfile = mdir / "manifest.json"
            if not mfile.is_file():
                continue
            m = json.loads(mfile.read_text())
            session = Session(
                session_id=m["id"],
                directory=mdir,
                mode=m.get("mode", "real"),
                state=m.get("state", "created"),
                error=m.get("error"),
                created_at=m.get("created_at", 0.0),
                updated_at=m.get("updated_at", 0.0),
                seq=m.get("seq", 0),
                converged=m.get("converged"),
                drag_config=m.get("drag_config", {}),
                finetune_config=m.get("finetune_config", {}),
                generated=m.get("generated", {}),
            )
            self._sessions[session.session_id] = session

    def get(self, session_id: str) -> Session:
        if session_id not in self._sessions:
            raise KeyError(session_id)
        return self._sessions[session_id]

    def create_session(
        self,
        image_png: Optional[bytes],
        mode: str = "real",
        drag_config: Optional[dict] = None,
        finetune_config: Optional[dict] = None,
        generated: Optional[dict] = None,
    ) -> Session:
        if mode not in ("real", "generated"):
            raise ParameterError(f"mode must be 'real' or 'generated', got {mode!r}")
        session_id = uuid.uuid4().hex[:12]
        directory = self.root / session_id
        directory.mkdir(parents=True)
        session = Session(
            session_id=session_id,
            directory=directory,
            mode=mode,
            created_at=time.time(),
            updated_at=time.time(),
            drag_config=dict(self.settings.drag_overrides, **(drag_config or {})),
            finetune_config=dict(self.settings.finetune_overrides, **(finetune_config or {})),
            generated=generated or {},
        )
        if mode == "real":
            if image_png is None:
                raise ParameterError("a PNG image upload is required for a real-image session")
            png_bytes_to_image(image_png)  # validates decodability
            atomic_write_bytes(directory / "input.png", image_png)
        else:
            # generated-image mode: sample now so the trajectory is available
            # and the fine-tuning stage is legally skipped
            backend = self.backend_copy()
            seed = int(session.generated.get("seed", 0))
            prompt = session.generated.get("prompt")
            scale = float(session.generated.get("guidance_scale", 1.0))
            embedding = backend.encode_prompt(prompt)
            negative = backend.encode_prompt(None) if scale > 1.0 else None
            cond = Conditioning(prompt_embedding=embedding, negative_embedding=negative, guidance_scale=scale)
            trajectory = ddim_generate(backend, cond, seed)
            _save_trajectory(directory / "trajectory.npz", trajectory)
            atomic_write_bytes(directory / "input.png", image_to_png_bytes(trajectory[0].data.numpy()))
            session.state = "inverted"
        session.save()
        self._sessions[session_id] = session
        return session

    # -- state machine -------------------------------------------------

    def transition(self, session: Session, new_state: str, error: Optional[str] = None) -> None:
        if new_state not in _TRANSITIONS[session.state]:
            raise ConflictError(f"cannot go from {session.state!r} to {new_state!r}")
        session.state = new_state
        session.error = error
        session.updated_at = time.time()
        session.save()

    # -- events ---------------------------------------------------------

    def publish(self, session: Session, payload: dict) -> int:
        with session.lock:
            session.seq += 1
            payload = dict(payload, seq=session.seq, session=session.session_id)
            line = json.dumps(payload, sort_keys=True)
            with open(session.directory / "events.ndjson", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            for q in list(session.subscribers):
                q.put(payload)
            session.save()
            return session.seq

    def events_after(self, session: Session, after: int) -> list[dict]:
        path = session.directory / "events.ndjson"
        if not path.is_file():
            return []
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    event = json.loads(line)
                    if event["seq"] > after:
                        out.append(event)
        return out

    def subscribe(self, session: Session) -> "queue.Queue[dict]":
        q: queue.Queue[dict] = queue.Queue()
        with session.lock:
            session.subscribers.append(q)
        return q

    def unsubscribe(self, session: Session, q) -> None:
        with session.lock:
            if q in session.subscribers:
                session.subscribers.remove(q)


def _save_trajectory(path: Path, trajectory: list[Latent]) -> None:
    import io

    buf = io.BytesIO()
    np.savez_compressed(buf, data=np.stack([z.data.numpy() for z in trajectory]))
    atomic_write_bytes(path, buf.getvalue())


def _load_trajectory(path: Path) -> list[Latent]:
    arr = np.load(path)["data"]
    return [Latent(torch.from_numpy(arr[t]), step=t) for t in range(arr.shape[0])]


def _start_job(store: SessionStore, session: Session, target) -> None:
    with session.lock:
        if session.job_active:
            raise ConflictError("a job is already running for this session")
        session.job_active = True

    def runner():
        try:
            target()
        except Exception as exc:  # noqa: BLE001 - job failures become session state
            try:
                store.transition(session, "failed", error=str(exc))
            except ConflictError:
                session.error = str(exc)
                session.save()
            store.publish(session, {"phase": "error", "terminal": True, "message": str(exc)})
        finally:
            session.job_active = False

    threading.Thread(target=runner, daemon=True).start()


def run_finetune_job(store: SessionStore, session: Session) -> None:
    config = FinetuneConfig(**session.finetune_config) if session.finetune_config else FinetuneConfig()
    backend = store.backend_copy()
    image = load_image_png(session.directory / "input.png", channels=backend.config.channels)
    z0 = latent_from_image(image)
    adapter = inject_lora(backend, rank=store.settings.lora_rank, seed=config.seed)

    def step_cb(step: int, loss: float) -> None:
        store.publish(session, {"phase": "finetune", "iteration": step, "loss": loss, "terminal": False})

    store.transition(session, "finetuning")
    finetune_identity(backend, adapter, z0, backend.schedule, config, on_step=step_cb)
    adapter.save(session.directory / "adapter")
    store.transition(session, "finetuned")
    store.publish(session, {"phase": "finetune", "terminal": True, "converged": True})


def run_drag_job(store: SessionStore, session: Session, doc: InstructionDoc, mask_png: Optional[bytes]) -> None:
    backend = store.backend_copy()
    channels = backend.config.channels
    image = load_image_png(session.directory / "input.png", channels=channels)
    mask = png_bytes_to_mask(mask_png) if mask_png else None
    instruction = doc.to_instruction(mask, image_size=image.shape[1:])
    drag_config = DragConfig(**session.drag_config) if session.drag_config else DragConfig()
    if session.mode == "generated":
        drag_config = dataclasses.replace(drag_config, cfg_concat=True)

    if (session.directory / "adapter").is_dir():
        load_adapter(backend, session.directory / "adapter")

    if session.mode == "generated":
        scale = float(session.generated.get("guidance_scale", 1.0))
        embedding = backend.encode_prompt(session.generated.get("prompt"))
        negative = backend.encode_prompt(None)
        cond = Conditioning(prompt_embedding=embedding, negative_embedding=negative, guidance_scale=scale)
        trajectory = _load_trajectory(session.directory / "trajectory.npz")
    else:
        embedding = backend.encode_prompt(instruction.prompt)
        negative = backend.encode_prompt(None) if drag_config.cfg_concat else None
        cond = Conditioning(prompt_embedding=embedding, negative_embedding=negative)
        z0 = latent_from_image(image)
        trajectory = ddim_invert(z0, drag_config.t_opt, backend, cond)
        _save_trajectory(session.directory / "trajectory.npz", trajectory)
        store.transition(session, "inverted")

    store.transition(session, "dragging")

    def on_iteration(record: TraceRecord) -> None:
        store.publish(session, {
            "phase": "drag",
            "iteration": record.iteration,
            "loss": record.loss,
            "handles": [[float(x), float(y)] for x, y in record.handles],
            "distances": record.distances,
            "terminal": False,
        })

    result = drag(trajectory, instruction, drag_config, backend, cond=cond, on_iteration=on_iteration)
    session.converged = result.trace.converged

    t = drag_config.t_opt
    total = t

    def denoise_progress(step_done: int) -> None:
        store.publish(session, {
            "phase": "denoise", "iteration": step_done, "total": total, "terminal": False,
        })

    edited, reference = _guided_denoise_with_progress(
        result.latent, trajectory[t], backend, cond, denoise_progress
    )
    atomic_write_bytes(session.directory / "result.png", image_to_png_bytes(edited.data.numpy()))
    atomic_write_bytes(session.directory / "reference.png", image_to_png_bytes(reference.data.numpy()))
    atomic_write_bytes(
        session.directory / "trace.json",
        json.dumps(result.trace.to_dict(), indent=2).encode(),
    )
    store.transition(session, "done")
    store.publish(session, {
        "phase": "drag", "terminal": True, "converged": result.trace.converged,
        "iterations": result.trace.iterations,
    })


def _guided_denoise_with_progress(z_hat, z_ref, backend, cond, progress):
    # thin wrapper: run per-step so the UI can show denoising progress
    from .refcontrol import KVReplaceController
    from .schedule import ddim_step
    from .backend import predict_noise

    controller = KVReplaceController()
    handle = backend.install_attention_hooks(controller)
    ze, zr = z_hat.clone(), z_ref.clone()
    try:
        with torch.no_grad():
            for t in range(z_hat.step, 0, -1):
                controller.mode = "record"
                eps_ref = predict_noise(backend, zr.data, t, cond)
                controller.mode = "replace"
                eps_edit = predict_noise(backend, ze.data, t, cond)
                zr = ddim_step(zr, eps_ref, t, t - 1, backend.schedule)
                ze = ddim_step(ze, eps_edit, t, t - 1, backend.schedule)
                controller.clear_step(t)
                progress(z_hat.step - t + 1)
    finally:
        handle.remove()
    return ze, zr


def create_app(settings: ServiceSettings, backend: Optional[ToyBackend] = None):
    """Build the FastAPI app around a session store."""
    from fastapi import FastAPI, File, Form, Header, HTTPException, UploadFile
    from fastapi.responses import JSONResponse, Response, StreamingResponse

    store = SessionStore(settings, backend=backend)
    app = FastAPI(title="latentdrag service")
    app.state.store = store

    def _get_session(session_id: str) -> Session:
        try:
            return store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")

    @app.post("/sessions")
    async def create_session(
        image: Optional[UploadFile] = File(None),
        mode: str = Form("real"),
        config: Optional[str] = Form(None),
        generated: Optional[str] = Form(None),
    ):
        cfg = json.loads(config) if config else {}
        try:
            session = store.create_session(
                image_png=await image.read() if image is not None else None,
                mode=mode,
                drag_config=cfg.get("drag"),
                finetune_config=cfg.get("finetune"),
                generated=json.loads(generated) if generated else None,
            )
        except ParameterError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return JSONResponse(session.manifest(), status_code=201)

    @app.post("/sessions/{session_id}/finetune")
    def start_finetune(session_id: str):
        session = _get_session(session_id)
        if session.mode != "real" or session.state != "created":
            raise HTTPException(status_code=409, detail=f"cannot fine-tune in state {session.state!r}")
        try:
            _start_job(store, session, lambda: run_finetune_job(store, session))
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"id": session.session_id, "job": "finetune"}

    @app.post("/sessions/{session_id}/drag")
    async def start_drag(
        session_id: str,
        instruction: UploadFile = File(...),
        mask: Optional[UploadFile] = File(None),
    ):
        session = _get_session(session_id)
        expected = "inverted" if session.mode == "generated" else "finetuned"
        if session.state != expected:
            raise HTTPException(
                status_code=409,
                detail=f"drag requires state {expected!r}, session is {session.state!r}",
            )
        payload = await instruction.read()
        try:
            doc = InstructionDoc.from_json_bytes(payload)
        except ParameterError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        mask_png = await mask.read() if mask is not None else None
        atomic_write_bytes(session.directory / "instruction.json", doc.to_json_bytes())
        if mask_png:
            png_bytes_to_mask(mask_png)  # validate before storing verbatim
            atomic_write_bytes(session.directory / "mask.png", mask_png)
        try:
            _start_job(store, session, lambda: run_drag_job(store, session, doc, mask_png))
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"id": session.session_id, "job": "drag"}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        session = _get_session(session_id)
        info = session.manifest()
        instruction_path = session.directory / "instruction.json"
        if instruction_path.is_file():
            info["instruction"] = json.loads(instruction_path.read_text())
            info["instruction_canonical_b64"] = base64.b64encode(instruction_path.read_bytes()).decode()
        mask_path = session.directory / "mask.png"
        if mask_path.is_file():
            info["mask_png_b64"] = base64.b64encode(mask_path.read_bytes()).decode()
        input_path = session.directory / "input.png"
        if input_path.is_file():
            info["input_png_b64"] = base64.b64encode(input_path.read_bytes()).decode()
        trace_path = session.directory / "trace.json"
        if trace_path.is_file():
            info["trace"] = json.loads(trace_path.read_text())
        return info

    @app.get("/sessions/{session_id}/result")
    def get_result(session_id: str):
        session = _get_session(session_id)
        if session.state != "done":
            raise HTTPException(status_code=409, detail=f"no result in state {session.state!r}")
        return Response(
            content=(session.directory / "result.png").read_bytes(), media_type="image/png"
        )

    @app.get("/sessions/{session_id}/events")
    def stream_events(
        session_id: str,
        after: int = 0,
        last_event_id: Optional[str] = Header(None, alias="Last-Event-ID"),
    ):
        session = _get_session(session_id)
        start_after = int(last_event_id) if last_event_id else after

        def generate() -> Iterator[str]:
            q = store.subscribe(session)
            try:
                last = start_after
                for event in store.events_after(session, start_after):
                    last = event["seq"]
                    yield f"id: {event['seq']}\ndata: {json.dumps(event, sort_keys=True)}\n\n"
                if _is_terminal(session, last):
                    return
                while True:
                    try:
                        event = q.get(timeout=30.0)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    if event["seq"] <= last:
                        continue
                    last = event["seq"]
                    yield f"id: {event['seq']}\ndata: {json.dumps(event, sort_keys=True)}\n\n"
                    if event.get("terminal"):
                        return
            finally:
                store.unsubscribe(session, q)

        return StreamingResponse(generate(), media_type="text/event-stream")

    def _is_terminal(session: Session, last_seen: int) -> bool:
        if session.state not in ("done", "failed"):
            return False
        events = store.events_after(session, 0)
        return bool(events) and events[-1].get("terminal") and events[-1]["seq"] <= last_seen

    @app.post("/evaluate")
    def evaluate(body: dict):
        dataset_dir = body.get("dataset")
        if not dataset_dir:
            raise HTTPException(status_code=422, detail="body must name a 'dataset' directory")
        backend = store.backend_copy()
        try:
            samples = load_dataset(dataset_dir, channels=backend.config.channels)
            drag_cfg = DragConfig(**dict(store.settings.drag_overrides, **body.get("drag", {})))
            ft = body.get("finetune")
            config = BenchRunConfig(
                drag=drag_cfg,
                finetune=FinetuneConfig(**ft) if ft else None,
                lora_rank=store.settings.lora_rank,
                workers=int(body.get("workers", 1)),
                seed=int(body.get("seed", 0)),
            )
            report = run_benchmark(samples, backend, config)
        except LatentDragError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return report.to_json_dict()

    return app
