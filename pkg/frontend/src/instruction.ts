/**
 * Drag instruction schema and its canonical serialization.
 *
 * The canonical form is byte-compatible with the service: UTF-8 JSON with
 * sorted keys and compact separators. Coordinates are emitted as integers so
 * a parse -> re-serialize round trip on either side is byte-stable.
 */

export type Point = [number, number];

export interface PointPair {
  handle: Point;
  target: Point;
}

export interface InstructionData {
  image: string;
  mask: string | null;
  points: PointPair[];
  prompt: string | null;
}

/** JSON.stringify with recursively sorted object keys (arrays keep order). */
export function stableStringify(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return `[${value.map(stableStringify).join(",")}]`;
  }
  const entries = Object.keys(value as Record<string, unknown>)
    .sort()
    .map((key) => `${JSON.stringify(key)}:${stableStringify((value as Record<string, unknown>)[key])}`);
  return `{${entries.join(",")}}`;
}

export function serializeInstruction(data: InstructionData): Uint8Array {
  return new TextEncoder().encode(
    stableStringify({
      image: data.image,
      mask: data.mask,
      points: data.points.map((p) => ({ handle: p.handle, target: p.target })),
      prompt: data.prompt,
    }),
  );
}

export function parseInstruction(payload: Uint8Array | string): InstructionData {
  const text = typeof payload === "string" ? payload : new TextDecoder().decode(payload);
  const doc = JSON.parse(text) as Record<string, unknown>;
  if (typeof doc.image !== "string") throw new Error("instruction: 'image' must be a string");
  const rawPoints = doc.points;
  if (!Array.isArray(rawPoints) || rawPoints.length === 0) {
    throw new Error("instruction: 'points' must be a non-empty list");
  }
  const points = rawPoints.map((p) => {
    const pair = p as Record<string, unknown>;
    const handle = pair.handle as number[];
    const target = pair.target as number[];
    if (!Array.isArray(handle) || handle.length !== 2 || !Array.isArray(target) || target.length !== 2) {
      throw new Error("instruction: malformed point pair");
    }
    return { handle: [handle[0], handle[1]] as Point, target: [target[0], target[1]] as Point };
  });
  return {
    image: doc.image,
    mask: (doc.mask as string | null) ?? null,
    points,
    prompt: (doc.prompt as string | null) ?? null,
  };
}
