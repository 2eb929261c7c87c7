/**
 * Before/after comparison: side-by-side and swipe overlay with a draggable
 * divider; the instruction overlay can be toggled on top of either view.
 */
import { Point, PointPair } from "./instruction.js";

export type CompareMode = "side-by-side" | "swipe";

export class CompareView {
  readonly root: HTMLElement;
  private canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  private before: ImageBitmap | HTMLImageElement | null = null;
  private after: ImageBitmap | HTMLImageElement | null = null;
  mode: CompareMode = "swipe";
  divider = 0.5; // fraction of width, swipe mode
  showOverlay = true;
  pairs: PointPair[] = [];
  scale = 12;
  imageSize: [number, number] = [0, 0];

  constructor(root: HTMLElement) {
    this.root = root;
    this.canvas = document.createElement("canvas");
    this.root.appendChild(this.canvas);
    const ctx = this.canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas unavailable");
    this.ctx = ctx;
    let dragging = false;
    this.canvas.addEventListener("mousedown", () => (dragging = true));
    window.addEventListener("mouseup", () => (dragging = false));
    this.canvas.addEventListener("mousemove", (event) => {
      if (!dragging || this.mode !== "swipe") return;
      const rect = this.canvas.getBoundingClientRect();
      this.divider = Math.min(Math.max((event.clientX - rect.left) / rect.width, 0), 1);
      this.render();
    });
  }

  setImages(before: ImageBitmap | HTMLImageElement, after: ImageBitmap | HTMLImageElement, width: number, height: number): void {
    this.before = before;
    this.after = after;
    this.imageSize = [width, height];
    this.canvas.width = this.mode === "side-by-side" ? width * this.scale * 2 + 8 : width * this.scale;
    this.canvas.height = height * this.scale;
    this.render();
  }

  setMode(mode: CompareMode): void {
    this.mode = mode;
    if (this.before && this.after) {
      this.setImages(this.before, this.after, this.imageSize[0], this.imageSize[1]);
    }
  }

  render(): void {
    const ctx = this.ctx;
    const [w, h] = this.imageSize;
    const pw = w * this.scale;
    const ph = h * this.scale;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    if (!this.before || !this.after) return;
    if (this.mode === "side-by-side") {
      ctx.drawImage(this.before, 0, 0, pw, ph);
      ctx.drawImage(this.after, pw + 8, 0, pw, ph);
      if (this.showOverlay) {
        this.drawOverlay(0);
        this.drawOverlay(pw + 8);
      }
    } else {
      ctx.drawImage(this.before, 0, 0, pw, ph);
      const cut = Math.round(this.divider * pw);
      ctx.save();
      ctx.beginPath();
      ctx.rect(cut, 0, pw - cut, ph);
      ctx.clip();
      ctx.drawImage(this.after, 0, 0, pw, ph);
      ctx.restore();
      ctx.fillStyle = "white";
      ctx.fillRect(cut - 1, 0, 2, ph);
      if (this.showOverlay) this.drawOverlay(0);
    }
  }

  private drawOverlay(offsetX: number): void {
    const ctx = this.ctx;
    const draw = (point: Point, color: string) => {
      ctx.save();
      ctx.fillStyle = color;
      ctx.strokeStyle = "white";
      ctx.beginPath();
      ctx.arc(offsetX + (point[0] + 0.5) * this.scale, (point[1] + 0.5) * this.scale, this.scale * 0.4, 0, Math.PI * 2);
      ctx.fill();
      ctx.stroke();
      ctx.restore();
    };
    for (const pair of this.pairs) {
      draw(pair.handle, "#e03131");
      draw(pair.target, "#1971c2");
    }
  }
}
