/**
 * Annotation state: handle/target point pairs, the editable-region mask
 * raster, and undo. Pure logic, no DOM; the canvas layer renders this state
 * and feeds it pointer events.
 */
import { InstructionData, Point, PointPair } from "./instruction.js";

export type MaskMode = "brush" | "eraser";

interface Snapshot {
  pairs: { handle: Point; target: Point | null }[];
  mask: Uint8Array;
}

export class AnnotationState {
  readonly width: number;
  readonly height: number;
  pairs: { handle: Point; target: Point | null }[] = [];
  mask: Uint8Array;
  private undoStack: Snapshot[] = [];

  constructor(width: number, height: number) {
    this.width = width;
    this.height = height;
    this.mask = new Uint8Array(width * height); // 0 = not editable yet
  }

  private snapshot(): void {
    this.undoStack.push({
      pairs: this.pairs.map((p) => ({ handle: [...p.handle] as Point, target: p.target ? ([...p.target] as Point) : null })),
      mask: this.mask.slice(),
    });
    if (this.undoStack.length > 64) this.undoStack.shift();
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.pairs = prev.pairs;
    this.mask = prev.mask;
    return true;
  }

  private clampPoint(x: number, y: number): Point {
    return [
      Math.min(Math.max(Math.round(x), 0), this.width - 1),
      Math.min(Math.max(Math.round(y), 0), this.height - 1),
    ];
  }

  /** Click alternation: first click starts a pair (handle), next completes it. */
  click(x: number, y: number): void {
    this.snapshot();
    const point = this.clampPoint(x, y);
    const last = this.pairs[this.pairs.length - 1];
    if (last && last.target === null) {
      last.target = point;
    } else {
      this.pairs.push({ handle: point, target: null });
    }
  }

  movePoint(index: number, which: "handle" | "target", x: number, y: number): void {
    const pair = this.pairs[index];
    if (!pair) return;
    this.snapshot();
    const point = this.clampPoint(x, y);
    if (which === "handle") pair.handle = point;
    else if (pair.target !== null) pair.target = point;
  }

  removePair(index: number): void {
    if (index < 0 || index >= this.pairs.length) return;
    this.snapshot();
    this.pairs.splice(index, 1);
  }

  /** Circular brush stroke on the mask raster (255 = editable). */
  paint(x: number, y: number, radius: number, mode: MaskMode): void {
    this.snapshot();
    this.paintWithoutUndo(x, y, radius, mode);
  }

  paintWithoutUndo(x: number, y: number, radius: number, mode: MaskMode): void {
    const value = mode === "brush" ? 255 : 0;
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(x - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(x + radius));
    const y0 = Math.max(0, Math.floor(y - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(y + radius));
    for (let py = y0; py <= y1; py++) {
      for (let px = x0; px <= x1; px++) {
        if ((px - x) * (px - x) + (py - y) * (py - y) <= r2) {
          this.mask[py * this.width + px] = value;
        }
      }
    }
  }

  fillMask(value: 0 | 255): void {
    this.snapshot();
    this.mask.fill(value);
  }

  get hasDanglingHandle(): boolean {
    const last = this.pairs[this.pairs.length - 1];
    return Boolean(last && last.target === null);
  }

  get completePairs(): PointPair[] {
    return this.pairs
      .filter((p): p is { handle: Point; target: Point } => p.target !== null)
      .map((p) => ({ handle: p.handle, target: p.target }));
  }

  get maskHasStrokes(): boolean {
    return this.mask.some((v) => v !== 0);
  }

  canSubmit(): { ok: boolean; reason?: string } {
    if (this.hasDanglingHandle) return { ok: false, reason: "the last handle has no target yet" };
    if (this.completePairs.length === 0) return { ok: false, reason: "add at least one handle/target pair" };
    return { ok: true };
  }

  /** Build the instruction document; throws when validation fails. */
  toInstruction(imageName: string, maskName: string | null, prompt: string | null): InstructionData {
    const check = this.canSubmit();
    if (!check.ok) throw new Error(check.reason);
    return {
      image: imageName,
      mask: this.maskHasStrokes ? maskName : null,
      points: this.completePairs,
      prompt,
    };
  }
}
