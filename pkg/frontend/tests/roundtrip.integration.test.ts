/**
 * End-to-end round trip against the real service: the UI-emitted instruction
 * JSON and mask PNG must come back byte-identical after server-side parsing,
 * and the live SSE handle overlay must match the final trace record for
 * record. Spawns the Python service with a freshly trained micro backend.
 */
import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ServiceClient } from "../src/api.js";
import { AnnotationState } from "../src/annotate.js";
import { ProgressEvent, streamEvents } from "../src/events.js";
import { serializeInstruction } from "../src/instruction.js";
import { encodeGrayPng } from "../src/png.js";

const PYTHON = process.env.LATENTDRAG_PYTHON ?? "python3";
const PORT = 18731;
const BASE = `http://127.0.0.1:${PORT}`;

function pythonAvailable(): boolean {
  const probe = spawnSync(PYTHON, ["-c", "import latentdrag"], { timeout: 30_000 });
  return probe.status === 0;
}

function renderDiscPng(size: number, cx: number, cy: number, r: number): Promise<Uint8Array> {
  const pixels = new Uint8Array(size * size);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const d = Math.hypot(x - cx, y - cy);
      const coverage = Math.min(Math.max(r + 0.5 - d, 0), 1);
      pixels[y * size + x] = Math.round(coverage * 235);
    }
  }
  return encodeGrayPng(pixels, size, size);
}

const available = pythonAvailable();
const suite = available ? describe : describe.skip;

suite("service round trip", () => {
  let workDir: string;
  let server: ChildProcess | null = null;

  beforeAll(async () => {
    workDir = mkdtempSync(join(tmpdir(), "latentdrag-ui-"));
    const ckpt = join(workDir, "ckpt");
    const train = spawnSync(
      PYTHON,
      ["-m", "latentdrag.cli", "train-toy", "--out", ckpt, "--image-size", "16",
       "--base-width", "8", "--depth", "2", "--num-steps", "10", "--epochs", "2",
       "--corpus-size", "36"],
      { timeout: 300_000 },
    );
    expect(train.status, String(train.stderr)).toBe(0);

    server = spawn(
      PYTHON,
      ["-m", "latentdrag.cli", "serve", "--checkpoint", ckpt,
       "--data-root", join(workDir, "sessions"), "--port", String(PORT),
       "--drag-overrides", JSON.stringify({ t_opt: 7, max_iters: 4, feature_block: 2, latent_lr: 0.02 }),
       "--finetune-overrides", JSON.stringify({ steps: 3, batch_size: 2 }),
       "--lora-rank", "4"],
      { stdio: ["ignore", "pipe", "pipe"] },
    );
    const deadline = Date.now() + 60_000;
    for (;;) {
      try {
        const resp = await fetch(`${BASE}/sessions/probe`);
        if (resp.status === 404) break;
      } catch {
        /* not up yet */
      }
      if (Date.now() > deadline) throw new Error("service did not start");
      await new Promise((r) => setTimeout(r, 250));
    }
  }, 360_000);

  afterAll(() => {
    server?.kill();
    if (workDir) rmSync(workDir, { recursive: true, force: true });
  });

  it("round-trips instruction and mask byte-identically and mirrors the trace live", async () => {
    const client = new ServiceClient(BASE);

    // annotate exactly as the UI does
    const state = new AnnotationState(16, 16);
    state.click(10, 8); // handle
    state.click(13, 8); // target
    state.paint(11, 8, 5, "brush");
    const maskPng = await encodeGrayPng(state.mask, 16, 16);
    const instruction = serializeInstruction(state.toInstruction("input.png", "mask.png", null));

    const imagePng = await renderDiscPng(16, 7, 8, 3.5);
    const session = await client.createSession(imagePng);
    await client.startFinetune(session.id);
    await client.waitForState(session.id, "finetuned", 120_000);

    // subscribe first so drag events arrive live, then start the job
    const liveHandles: { iteration: number; handles: [number, number][] }[] = [];
    let terminal: ProgressEvent | null = null;
    const stream = streamEvents(client.eventsUrl(session.id), (event) => {
      if (event.phase === "drag" && !event.terminal && event.handles) {
        liveHandles.push({ iteration: event.iteration as number, handles: event.handles as [number, number][] });
      }
      if (event.terminal) terminal = event;
    });
    await client.startDrag(session.id, instruction, maskPng);
    await client.waitForState(session.id, "done", 240_000);
    await stream.done;
    stream.close();

    // byte-identical round trip of the instruction and the mask
    const info = await client.getSession(session.id);
    const echoedInstruction = Buffer.from(info.instruction_canonical_b64!, "base64");
    expect(Buffer.compare(echoedInstruction, Buffer.from(instruction))).toBe(0);
    const echoedMask = Buffer.from(info.mask_png_b64!, "base64");
    expect(Buffer.compare(echoedMask, Buffer.from(maskPng))).toBe(0);

    // live overlay positions equal the final trace, record for record
    expect(info.trace).toBeDefined();
    const records = info.trace!.records;
    expect(records.length).toBeGreaterThanOrEqual(1);
    expect(liveHandles.length).toBe(records.length);
    for (let i = 0; i < records.length; i++) {
      expect(liveHandles[i].iteration).toBe(records[i].iteration);
      expect(liveHandles[i].handles).toEqual(records[i].handles);
    }
    expect(terminal).not.toBeNull();

    // the result endpoint serves a PNG
    const result = await client.getResultPng(session.id);
    expect(Array.from(result.subarray(0, 4))).toEqual([0x89, 0x50, 0x4e, 0x47]);
  }, 360_000);

  it("surfaces conflicts as errors the UI can render as guidance", async () => {
    const client = new ServiceClient(BASE);
    const imagePng = await renderDiscPng(16, 7, 8, 3.5);
    const session = await client.createSession(imagePng);
    const state = new AnnotationState(16, 16);
    state.click(9, 8);
    state.click(12, 8);
    const instruction = serializeInstruction(state.toInstruction("input.png", null, null));
    await expect(client.startDrag(session.id, instruction, null)).rejects.toThrow(/409/);
  }, 120_000);
});
