/**
 * Minimal 8-bit grayscale PNG encode/decode for mask payloads.
 *
 * The encoder emits exactly one IDAT chunk (filter 0 per row, zlib via
 * CompressionStream) so the bytes the service receives are the bytes this
 * module produced; the service stores them verbatim. The decoder handles
 * only what the encoder writes plus unfiltered single-channel input, enough
 * for round-trip tests.
 */

const PNG_SIGNATURE = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let crc = 0xffffffff;
  for (const b of bytes) {
    crc = CRC_TABLE[(crc ^ b) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

function chunk(type: string, payload: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + payload.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, payload.length);
  out.set(new TextEncoder().encode(type), 4);
  out.set(payload, 8);
  const body = out.subarray(4, 8 + payload.length);
  view.setUint32(8 + payload.length, crc32(body));
  return out;
}

async function pipeThrough(data: Uint8Array, stream: CompressionStream | DecompressionStream): Promise<Uint8Array> {
  const writer = stream.writable.getWriter();
  const chunk = new Uint8Array(data.length);
  chunk.set(data);
  void writer.write(chunk as Uint8Array<ArrayBuffer>);
  void writer.close();
  const parts: Uint8Array[] = [];
  const reader = stream.readable.getReader();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    parts.push(value);
  }
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const p of parts) {
    out.set(p, offset);
    offset += p.length;
  }
  return out;
}

/** Encode a (height x width) grayscale raster (row-major Uint8Array). */
export async function encodeGrayPng(pixels: Uint8Array, width: number, height: number): Promise<Uint8Array> {
  if (pixels.length !== width * height) {
    throw new Error(`raster size ${pixels.length} != ${width}x${height}`);
  }
  const ihdr = new Uint8Array(13);
  const ihdrView = new DataView(ihdr.buffer);
  ihdrView.setUint32(0, width);
  ihdrView.setUint32(4, height);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // grayscale
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter type 0
    raw.set(pixels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  const compressed = await pipeThrough(raw, new CompressionStream("deflate"));
  const parts = [PNG_SIGNATURE, chunk("IHDR", ihdr), chunk("IDAT", compressed), chunk("IEND", new Uint8Array(0))];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const p of parts) {
    out.set(p, offset);
    offset += p.length;
  }
  return out;
}

export interface DecodedPng {
  width: number;
  height: number;
  pixels: Uint8Array;
}

/** Decode a grayscale PNG produced by `encodeGrayPng` (filter 0 rows only). */
export async function decodeGrayPng(bytes: Uint8Array): Promise<DecodedPng> {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a PNG");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset);
  let offset = 8;
  let width = 0;
  let height = 0;
  const idats: Uint8Array[] = [];
  while (offset < bytes.length) {
    const length = view.getUint32(offset);
    const type = new TextDecoder().decode(bytes.subarray(offset + 4, offset + 8));
    const payload = bytes.subarray(offset + 8, offset + 8 + length);
    if (type === "IHDR") {
      const hv = new DataView(payload.buffer, payload.byteOffset);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      if (payload[8] !== 8 || payload[9] !== 0) throw new Error("decode supports 8-bit grayscale only");
    } else if (type === "IDAT") {
      idats.push(payload);
    } else if (type === "IEND") {
      break;
    }
    offset += 12 + length;
  }
  const totalLen = idats.reduce((n, p) => n + p.length, 0);
  const joined = new Uint8Array(totalLen);
  let at = 0;
  for (const p of idats) {
    joined.set(p, at);
    at += p.length;
  }
  const raw = await pipeThrough(joined, new DecompressionStream("deflate"));
  const pixels = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    if (raw[y * (width + 1)] !== 0) throw new Error("decode supports filter 0 only");
    pixels.set(raw.subarray(y * (width + 1) + 1, (y + 1) * (width + 1)), y * width);
  }
  return { width, height, pixels };
}
