/**
 * App wiring: load an image, annotate points and mask, run the session
 * pipeline against the service, watch live handle motion, compare results,
 * and optionally continue editing on the result.
 */
import { ServiceClient, SessionInfo } from "./api.js";
import { EditCanvas, Tool } from "./canvasView.js";
import { CompareView } from "./compare.js";
import { streamEvents, StreamHandle } from "./events.js";
import { serializeInstruction } from "./instruction.js";
import { encodeGrayPng } from "./png.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function decodePngToBitmap(bytes: Uint8Array): Promise<{ bitmap: ImageBitmap; width: number; height: number }> {
  const blob = new Blob([bytes.slice().buffer as ArrayBuffer], { type: "image/png" });
  const bitmap = await createImageBitmap(blob);
  return { bitmap, width: bitmap.width, height: bitmap.height };
}

class App {
  client: ServiceClient;
  edit: EditCanvas | null = null;
  compare: CompareView;
  session: SessionInfo | null = null;
  stream: StreamHandle | null = null;
  imageBytes: Uint8Array | null = null;
  private status = el<HTMLElement>("status");

  constructor() {
    const base = (el<HTMLInputElement>("service-url").value || window.location.origin).trim();
    this.client = new ServiceClient(base);
    this.compare = new CompareView(el<HTMLElement>("compare-root"));
    this.bindControls();
  }

  setStatus(text: string, isError = false): void {
    this.status.textContent = text;
    this.status.className = isError ? "status error" : "status";
  }

  private bindControls(): void {
    el<HTMLInputElement>("file-input").addEventListener("change", async (event) => {
      const input = event.target as HTMLInputElement;
      const file = input.files?.[0];
      if (file) await this.loadImage(new Uint8Array(await file.arrayBuffer()));
    });
    for (const tool of ["points", "brush", "eraser"] as Tool[]) {
      el<HTMLButtonElement>(`tool-${tool}`).addEventListener("click", () => {
        if (this.edit) this.edit.tool = tool;
        this.setStatus(`tool: ${tool}`);
      });
    }
    el<HTMLButtonElement>("undo").addEventListener("click", () => {
      if (this.edit?.state.undo()) this.edit.render();
    });
    el<HTMLButtonElement>("mask-all").addEventListener("click", () => {
      this.edit?.state.fillMask(255);
      this.edit?.render();
    });
    el<HTMLButtonElement>("run").addEventListener("click", () => {
      this.runSession().catch((err) => this.setStatus(String(err), true));
    });
    el<HTMLButtonElement>("use-result").addEventListener("click", () => {
      this.useResultAsInput().catch((err) => this.setStatus(String(err), true));
    });
    el<HTMLSelectElement>("compare-mode").addEventListener("change", (event) => {
      this.compare.setMode((event.target as HTMLSelectElement).value as "swipe" | "side-by-side");
    });
    el<HTMLInputElement>("overlay-toggle").addEventListener("change", (event) => {
      this.compare.showOverlay = (event.target as HTMLInputElement).checked;
      this.compare.render();
    });
  }

  async loadImage(bytes: Uint8Array): Promise<void> {
    this.imageBytes = bytes;
    const { bitmap, width, height } = await decodePngToBitmap(bytes);
    if (!this.edit) {
      this.edit = new EditCanvas(el<HTMLCanvasElement>("edit-canvas"), width, height);
    } else {
      this.edit.reset(width, height);
    }
    this.edit.setImage(bitmap);
    this.setStatus(`image loaded (${width}x${height}); click handle then target, paint a mask, then run`);
  }

  async runSession(): Promise<void> {
    if (!this.edit || !this.imageBytes) throw new Error("load an image first");
    const check = this.edit.state.canSubmit();
    if (!check.ok) {
      this.setStatus(`cannot submit: ${check.reason}`, true);
      return;
    }
    const state = this.edit.state;
    const maskBytes = state.maskHasStrokes
      ? await encodeGrayPng(state.mask, state.width, state.height)
      : null;
    const prompt = el<HTMLInputElement>("prompt").value || null;
    const instruction = serializeInstruction(state.toInstruction("input.png", maskBytes ? "mask.png" : null, prompt));

    this.setStatus("creating session...");
    this.session = await this.client.createSession(this.imageBytes);
    const sid = this.session.id;

    this.setStatus("identity fine-tuning...");
    await this.client.startFinetune(sid);
    await this.client.waitForState(sid, "finetuned");

    this.setStatus("dragging (live)...");
    this.edit.clearLiveHandles();
    await this.client.startDrag(sid, instruction, maskBytes);
    this.stream?.close();
    this.stream = streamEvents(this.client.eventsUrl(sid), (event) => {
      if (event.phase === "finetune" && typeof event.iteration === "number") {
        this.setStatus(`fine-tune step ${event.iteration}, loss ${event.loss?.toFixed(4)}`);
      } else if (event.phase === "drag" && event.handles) {
        this.edit!.pushLiveHandles(event.handles as [number, number][]);
        this.setStatus(`drag iteration ${event.iteration}, loss ${event.loss?.toFixed(3)}`);
      } else if (event.phase === "denoise") {
        this.setStatus(`denoising ${event.iteration}/${event.total}`);
      }
      if (event.terminal) {
        this.setStatus(`finished (converged: ${event.converged ?? "n/a"})`);
      }
    });
    await this.stream.done;
    await this.client.waitForState(sid, "done");
    await this.showResult(sid);
  }

  async showResult(sid: string): Promise<void> {
    if (!this.imageBytes || !this.edit) return;
    const resultBytes = await this.client.getResultPng(sid);
    const before = await decodePngToBitmap(this.imageBytes);
    const after = await decodePngToBitmap(resultBytes);
    this.compare.pairs = this.edit.state.completePairs;
    this.compare.setImages(before.bitmap, after.bitmap, before.width, before.height);
    el<HTMLButtonElement>("use-result").disabled = false;
    (window as unknown as Record<string, unknown>).__lastResult = resultBytes;
  }

  async useResultAsInput(): Promise<void> {
    if (!this.session) return;
    const bytes = await this.client.getResultPng(this.session.id);
    await this.loadImage(bytes);
    this.setStatus("result loaded as new input; annotate the next drag");
  }
}

window.addEventListener("DOMContentLoaded", () => {
  (window as unknown as Record<string, unknown>).app = new App();
});
