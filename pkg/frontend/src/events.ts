/**
 * Progress event stream: an SSE reader over fetch plus an ordering buffer
 * that is gap-free and duplicate-free by sequence number, surviving
 * reconnects via Last-Event-ID.
 */

export interface ProgressEvent {
  seq: number;
  session: string;
  phase: string;
  iteration?: number;
  loss?: number | null;
  handles?: [number, number][] | null;
  distances?: number[] | null;
  terminal?: boolean;
  converged?: boolean;
  [key: string]: unknown;
}

/** Delivers events strictly in seq order, dropping duplicates and buffering
 * out-of-order arrivals until the gap closes. */
export class OrderedEventBuffer {
  private next = 1;
  private pending = new Map<number, ProgressEvent>();
  readonly delivered: ProgressEvent[] = [];

  constructor(private readonly onEvent: (event: ProgressEvent) => void, firstSeq = 1) {
    this.next = firstSeq;
  }

  push(event: ProgressEvent): void {
    if (event.seq < this.next || this.pending.has(event.seq)) {
      return; // duplicate
    }
    this.pending.set(event.seq, event);
    while (this.pending.has(this.next)) {
      const ready = this.pending.get(this.next)!;
      this.pending.delete(this.next);
      this.next += 1;
      this.delivered.push(ready);
      this.onEvent(ready);
    }
  }

  get lastDelivered(): number {
    return this.next - 1;
  }
}

interface SseFrame {
  id: string | null;
  data: string;
}

/** Incremental parser for a text/event-stream byte feed. */
export class SseParser {
  private buffer = "";

  feed(text: string): SseFrame[] {
    this.buffer += text;
    const frames: SseFrame[] = [];
    for (;;) {
      const cut = this.buffer.indexOf("\n\n");
      if (cut < 0) break;
      const block = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 2);
      let id: string | null = null;
      const data: string[] = [];
      for (const line of block.split("\n")) {
        if (line.startsWith("id:")) id = line.slice(3).trim();
        else if (line.startsWith("data:")) data.push(line.slice(5).trimStart());
      }
      if (data.length > 0) frames.push({ id, data: data.join("\n") });
    }
    return frames;
  }
}

export interface StreamHandle {
  close(): void;
  done: Promise<void>;
}

/**
 * Subscribe to the session event stream. Reconnects automatically with the
 * last delivered sequence number; `onEvent` sees a gap-free ordered feed.
 */
export function streamEvents(
  url: string,
  onEvent: (event: ProgressEvent) => void,
  options: { lastSeq?: number; maxReconnects?: number; fetchImpl?: typeof fetch } = {},
): StreamHandle {
  const fetchImpl = options.fetchImpl ?? fetch;
  const buffer = new OrderedEventBuffer(onEvent, (options.lastSeq ?? 0) + 1);
  const controller = new AbortController();
  let reconnects = 0;
  const maxReconnects = options.maxReconnects ?? 20;

  const done = (async () => {
    for (;;) {
      const headers: Record<string, string> = { Accept: "text/event-stream" };
      if (buffer.lastDelivered > 0) headers["Last-Event-ID"] = String(buffer.lastDelivered);
      let sawTerminal = false;
      try {
        const resp = await fetchImpl(url, { headers, signal: controller.signal });
        if (!resp.ok || !resp.body) throw new Error(`event stream HTTP ${resp.status}`);
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        const parser = new SseParser();
        for (;;) {
          const { done: eof, value } = await reader.read();
          if (eof) break;
          for (const frame of parser.feed(decoder.decode(value, { stream: true }))) {
            const event = JSON.parse(frame.data) as ProgressEvent;
            buffer.push(event);
            if (event.terminal) sawTerminal = true;
          }
        }
      } catch (err) {
        if (controller.signal.aborted) return;
        reconnects += 1;
        if (reconnects > maxReconnects) throw err;
        await new Promise((r) => setTimeout(r, Math.min(250 * reconnects, 2000)));
        continue;
      }
      if (sawTerminal || controller.signal.aborted) return;
      reconnects += 1;
      if (reconnects > maxReconnects) return;
      await new Promise((r) => setTimeout(r, 200));
    }
  })();

  return {
    close: () => controller.abort(),
    done: done.catch((err) => {
      if (!controller.signal.aborted) throw err;
    }),
  };
}
