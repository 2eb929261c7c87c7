import { describe, expect, it } from "vitest";

import { decodeGrayPng, encodeGrayPng } from "../src/png.js";

describe("grayscale PNG codec", () => {
  it("round-trips arbitrary rasters", async () => {
    const w = 13;
    const h = 9;
    const pixels = new Uint8Array(w * h).map((_, i) => (i * 37) % 256);
    const png = await encodeGrayPng(pixels, w, h);
    expect(Array.from(png.subarray(0, 8))).toEqual([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
    const decoded = await decodeGrayPng(png);
    expect(decoded.width).toBe(w);
    expect(decoded.height).toBe(h);
    expect(Array.from(decoded.pixels)).toEqual(Array.from(pixels));
  });

  it("full-canvas mask serializes to all-255", async () => {
    const mask = new Uint8Array(16 * 16).fill(255);
    const png = await encodeGrayPng(mask, 16, 16);
    const decoded = await decodeGrayPng(png);
    expect(decoded.pixels.every((v) => v === 255)).toBe(true);
  });

  it("is deterministic for identical input", async () => {
    const mask = new Uint8Array(32 * 32).map((_, i) => (i % 7 === 0 ? 255 : 0));
    const a = await encodeGrayPng(mask, 32, 32);
    const b = await encodeGrayPng(mask, 32, 32);
    expect(Array.from(a)).toEqual(Array.from(b));
  });

  it("rejects size mismatch", async () => {
    await expect(encodeGrayPng(new Uint8Array(10), 4, 4)).rejects.toThrow();
  });
});
