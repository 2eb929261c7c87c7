/** Thin client for the session service HTTP API. */

export interface SessionInfo {
  id: string;
  mode: string;
  state: string;
  error: string | null;
  seq: number;
  converged: boolean | null;
  instruction?: unknown;
  instruction_canonical_b64?: string;
  mask_png_b64?: string;
  input_png_b64?: string;
  trace?: {
    converged: boolean;
    initial_handles: [number, number][];
    records: { iteration: number; handles: [number, number][]; loss: number; distances: number[] }[];
  };
}

export class ServiceClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async createSession(imagePng: Uint8Array | Blob, config?: object): Promise<SessionInfo> {
    const form = new FormData();
    const payload: Blob = imagePng instanceof Blob
      ? imagePng
      : new Blob([(imagePng as Uint8Array).slice().buffer as ArrayBuffer], { type: "image/png" });
    form.append("image", payload, "input.png");
    form.append("mode", "real");
    if (config) form.append("config", JSON.stringify(config));
    const resp = await this.fetchImpl(this.url("/sessions"), { method: "POST", body: form });
    if (!resp.ok) throw new Error(`create session failed: HTTP ${resp.status} ${await resp.text()}`);
    return (await resp.json()) as SessionInfo;
  }

  async startFinetune(id: string): Promise<void> {
    const resp = await this.fetchImpl(this.url(`/sessions/${id}/finetune`), { method: "POST" });
    if (!resp.ok) throw new Error(`finetune failed: HTTP ${resp.status} ${await resp.text()}`);
  }

  async startDrag(id: string, instruction: Uint8Array, maskPng: Uint8Array | null): Promise<void> {
    const form = new FormData();
    form.append(
      "instruction",
      new Blob([instruction.slice().buffer as ArrayBuffer], { type: "application/json" }),
      "instruction.json",
    );
    if (maskPng) {
      form.append("mask", new Blob([maskPng.slice().buffer as ArrayBuffer], { type: "image/png" }), "mask.png");
    }
    const resp = await this.fetchImpl(this.url(`/sessions/${id}/drag`), { method: "POST", body: form });
    if (!resp.ok) throw new Error(`drag failed: HTTP ${resp.status} ${await resp.text()}`);
  }

  async getSession(id: string): Promise<SessionInfo> {
    const resp = await this.fetchImpl(this.url(`/sessions/${id}`));
    if (!resp.ok) throw new Error(`get session failed: HTTP ${resp.status}`);
    return (await resp.json()) as SessionInfo;
  }

  async getResultPng(id: string): Promise<Uint8Array> {
    const resp = await this.fetchImpl(this.url(`/sessions/${id}/result`));
    if (!resp.ok) throw new Error(`result not ready: HTTP ${resp.status}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  eventsUrl(id: string): string {
    return this.url(`/sessions/${id}/events`);
  }

  async waitForState(id: string, want: string, timeoutMs = 300_000): Promise<SessionInfo> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const info = await this.getSession(id);
      if (info.state === want) return info;
      if (info.state === "failed") throw new Error(`session failed: ${info.error}`);
      if (Date.now() > deadline) throw new Error(`timed out waiting for ${want}`);
      await new Promise((r) => setTimeout(r, 150));
    }
  }
}
