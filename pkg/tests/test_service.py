"""HTTP session service: state machine, jobs, event replay, evaluation."""
from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from latentdrag import make_shape_corpus, toy_train
from latentdrag.bench import generate_toy_benchmark
from latentdrag.engine import InstructionDoc
from latentdrag.ioutil import image_to_png_bytes, mask_to_png_bytes
from latentdrag.service import ServiceSettings, SessionStore, create_app
from latentdrag.shapes import render_disc

from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def service_backend():
    config = dataclasses.replace(
        TINY_CONFIG,
        epochs=2,
        # short drags keep service tests quick
    )
    return toy_train(make_shape_corpus(36, 16, seed=0), config)


@pytest.fixture()
def client(service_backend, tmp_path):
    settings = ServiceSettings(
        data_root=tmp_path / "sessions",
        drag_overrides={"t_opt": 7, "max_iters": 4, "feature_block": 2, "latent_lr": 0.02},
        finetune_overrides={"steps": 3, "batch_size": 2},
        lora_rank=4,
    )
    app = create_app(settings, backend=service_backend)
    return TestClient(app)


def upload_image() -> bytes:
    img = render_disc(16, 7.0, 8.0, 3.5, fg=0.9)[None]
    return image_to_png_bytes(img)


def make_instruction(handles=((10, 8),), targets=((13, 8),)) -> tuple[bytes, bytes]:
    doc = InstructionDoc(
        image="input.png",
        mask="mask.png",
        prompt=None,
        points=[{"handle": list(h), "target": list(t)} for h, t in zip(handles, targets)],
    )
    mask = np.ones((16, 16), dtype=np.uint8)
    return doc.to_json_bytes(), mask_to_png_bytes(mask)


def create_real_session(client) -> str:
    resp = client.post("/sessions", files={"image": ("input.png", upload_image(), "image/png")})
    assert resp.status_code == 201, resp.text
    body = resp.json()
    assert body["state"] == "created"
    return body["id"]


def wait_for_state(client, sid: str, want: str, timeout: float = 120.0) -> dict:
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/sessions/{sid}").json()
        if body["state"] == want:
            return body
        if body["state"] == "failed":
            raise AssertionError(f"session failed: {body['error']}")
        time.sleep(0.1)
    raise AssertionError(f"timed out waiting for state {want}")


class TestStateMachine:
    def test_unknown_session_404(self, client):
        assert client.get("/sessions/doesnotexist").status_code == 404

    def test_drag_before_finetune_conflict(self, client):
        sid = create_real_session(client)
        instruction, mask = make_instruction()
        resp = client.post(
            f"/sessions/{sid}/drag",
            files={"instruction": ("i.json", instruction, "application/json"),
                   "mask": ("m.png", mask, "image/png")},
        )
        assert resp.status_code == 409

    def test_finetune_twice_conflict(self, client):
        sid = create_real_session(client)
        assert client.post(f"/sessions/{sid}/finetune").status_code == 200
        # second start is either an active-job or wrong-state conflict
        resp = client.post(f"/sessions/{sid}/finetune")
        assert resp.status_code == 409
        wait_for_state(client, sid, "finetuned")

    def test_result_before_done_conflict(self, client):
        sid = create_real_session(client)
        assert client.get(f"/sessions/{sid}/result").status_code == 409

    def test_session_without_image_rejected(self, client):
        assert client.post("/sessions", data={"mode": "real"}).status_code == 422


class TestFullPipeline:
    def test_finetune_then_drag_to_done(self, client):
        sid = create_real_session(client)
        client.post(f"/sessions/{sid}/finetune")
        wait_for_state(client, sid, "finetuned")

        instruction, mask = make_instruction()
        resp = client.post(
            f"/sessions/{sid}/drag",
            files={"instruction": ("i.json", instruction, "application/json"),
                   "mask": ("m.png", mask, "image/png")},
        )
        assert resp.status_code == 200
        body = wait_for_state(client, sid, "done")
        assert body["converged"] in (True, False)
        assert body["trace"]["records"]

        result = client.get(f"/sessions/{sid}/result")
        assert result.status_code == 200
        assert result.headers["content-type"] == "image/png"
        assert result.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_instruction_roundtrip_byte_identical(self, client):
        sid = create_real_session(client)
        client.post(f"/sessions/{sid}/finetune")
        wait_for_state(client, sid, "finetuned")
        instruction, mask = make_instruction(handles=((9, 7),), targets=((12, 9),))
        client.post(
            f"/sessions/{sid}/drag",
            files={"instruction": ("i.json", instruction, "application/json"),
                   "mask": ("m.png", mask, "image/png")},
        )
        wait_for_state(client, sid, "done")
        import base64

        info = client.get(f"/sessions/{sid}").json()
        assert base64.b64decode(info["instruction_canonical_b64"]) == instruction
        assert base64.b64decode(info["mask_png_b64"]) == mask

    def test_generated_session_skips_finetune(self, client):
        resp = client.post(
            "/sessions",
            data={"mode": "generated", "generated": json.dumps({"seed": 4, "prompt": "disc"})},
        )
        assert resp.status_code == 201
        body = resp.json()
        sid = body["id"]
        assert body["state"] == "inverted"  # created -> inverted, no fine-tune stage
        assert client.post(f"/sessions/{sid}/finetune").status_code == 409

        instruction, mask = make_instruction()
        resp = client.post(
            f"/sessions/{sid}/drag",
            files={"instruction": ("i.json", instruction, "application/json"),
                   "mask": ("m.png", mask, "image/png")},
        )
        assert resp.status_code == 200
        wait_for_state(client, sid, "done")


class TestEvents:
    def run_drag_session(self, client) -> str:
        sid = create_real_session(client)
        client.post(f"/sessions/{sid}/finetune")
        wait_for_state(client, sid, "finetuned")
        instruction, mask = make_instruction()
        client.post(
            f"/sessions/{sid}/drag",
            files={"instruction": ("i.json", instruction, "application/json"),
                   "mask": ("m.png", mask, "image/png")},
        )
        wait_for_state(client, sid, "done")
        return sid

    @staticmethod
    def parse_sse(text: str) -> list[dict]:
        events = []
        for block in text.split("\n\n"):
            for line in block.splitlines():
                if line.startswith("data: "):
                    events.append(json.loads(line[len("data: "):]))
        return events

    def test_events_ordered_and_complete(self, client):
        sid = self.run_drag_session(client)
        with client.stream("GET", f"/sessions/{sid}/events") as resp:
            text = "".join(resp.iter_text())
        events = self.parse_sse(text)
        seqs = [e["seq"] for e in events]
        assert seqs == sorted(seqs)
        assert len(set(seqs)) == len(seqs)
        phases = {e["phase"] for e in events}
        assert {"finetune", "drag", "denoise"} <= phases
        drag_events = [e for e in events if e["phase"] == "drag" and not e["terminal"]]
        assert 1 <= len(drag_events) <= 4
        assert events[-1]["terminal"] is True
        assert "converged" in events[-1]

    def test_replay_after_reconnect_is_gap_free(self, client):
        sid = self.run_drag_session(client)
        with client.stream("GET", f"/sessions/{sid}/events") as resp:
            text = "".join(resp.iter_text())
        all_events = self.parse_sse(text)
        cut = all_events[len(all_events) // 2]["seq"]
        with client.stream(
            "GET", f"/sessions/{sid}/events", headers={"Last-Event-ID": str(cut)}
        ) as resp:
            text2 = "".join(resp.iter_text())
        tail = self.parse_sse(text2)
        assert [e["seq"] for e in tail] == [e["seq"] for e in all_events if e["seq"] > cut]
        combined = [e["seq"] for e in all_events if e["seq"] <= cut] + [e["seq"] for e in tail]
        assert combined == list(range(1, len(all_events) + 1))

    def test_drag_event_count_bounded_by_max_iters(self, client):
        sid = self.run_drag_session(client)
        with client.stream("GET", f"/sessions/{sid}/events") as resp:
            events = self.parse_sse("".join(resp.iter_text()))
        iters = [e for e in events if e["phase"] == "drag" and not e.get("terminal")]
        assert 1 <= len(iters) <= 4  # max_iters=4 in the service overrides


class TestPersistence:
    def test_crash_restart_reloads_state(self, service_backend, tmp_path):
        settings = ServiceSettings(
            data_root=tmp_path / "sessions",
            drag_overrides={"t_opt": 7, "max_iters": 2, "feature_block": 2},
            finetune_overrides={"steps": 2, "batch_size": 2},
            lora_rank=4,
        )
        app = create_app(settings, backend=service_backend)
        client = TestClient(app)
        sid = create_real_session(client)
        client.post(f"/sessions/{sid}/finetune")
        wait_for_state(client, sid, "finetuned")

        # simulate restart: a fresh store over the same data root
        store2 = SessionStore(settings, backend=service_backend)
        session = store2.get(sid)
        assert session.state == "finetuned"
        assert (session.directory / "adapter" / "params.pt").is_file()
        events = store2.events_after(session, 0)
        assert events and events[-1]["terminal"]


class TestEvaluate:
    def test_evaluate_endpoint(self, client, tmp_path, service_backend):
        generate_toy_benchmark(2, seed=1, out_dir=tmp_path / "data", image_size=16, kinds=("translate",))
        resp = client.post("/evaluate", json={
            "dataset": str(tmp_path / "data"),
            "drag": {"t_opt": 7, "max_iters": 2, "feature_block": 2},
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["overall"]["n"] == 2
        assert body["overall"]["mean_distance"] >= 0
        assert len(body["rows"]) == 2

    def test_evaluate_missing_dataset(self, client):
        assert client.post("/evaluate", json={}).status_code == 422
        assert client.post("/evaluate", json={"dataset": "/nope"}).status_code == 422
