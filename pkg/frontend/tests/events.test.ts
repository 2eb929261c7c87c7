import { describe, expect, it } from "vitest";

import { OrderedEventBuffer, ProgressEvent, SseParser } from "../src/events.js";

function ev(seq: number, extra: Partial<ProgressEvent> = {}): ProgressEvent {
  return { seq, session: "s", phase: "drag", ...extra };
}

describe("OrderedEventBuffer", () => {
  it("delivers in order and drops duplicates", () => {
    const seen: number[] = [];
    const buf = new OrderedEventBuffer((e) => seen.push(e.seq));
    for (const seq of [1, 2, 2, 3, 1]) buf.push(ev(seq));
    expect(seen).toEqual([1, 2, 3]);
    expect(buf.lastDelivered).toBe(3);
  });

  it("holds back out-of-order events until the gap closes", () => {
    const seen: number[] = [];
    const buf = new OrderedEventBuffer((e) => seen.push(e.seq));
    buf.push(ev(2));
    buf.push(ev(3));
    expect(seen).toEqual([]);
    buf.push(ev(1));
    expect(seen).toEqual([1, 2, 3]);
  });

  it("resumes after a replay point without re-delivering", () => {
    const seen: number[] = [];
    const buf = new OrderedEventBuffer((e) => seen.push(e.seq), 4);
    for (const seq of [2, 3, 4, 5]) buf.push(ev(seq)); // 2,3 are pre-replay duplicates
    expect(seen).toEqual([4, 5]);
  });
});

describe("SseParser", () => {
  it("parses frames split across chunks", () => {
    const parser = new SseParser();
    const first = parser.feed('id: 1\ndata: {"seq": 1}\n\nid: 2\ndata: {"se');
    expect(first).toEqual([{ id: "1", data: '{"seq": 1}' }]);
    const second = parser.feed('q": 2}\n\n');
    expect(second).toEqual([{ id: "2", data: '{"seq": 2}' }]);
  });

  it("ignores keepalive comments", () => {
    const parser = new SseParser();
    expect(parser.feed(": keepalive\n\n")).toEqual([]);
  });
});
