/**
 * Canvas rendering of the annotation state plus live handle overlays:
 * image underneath, mask tint, handle (red) / target (blue) markers with
 * connecting arrows, and animated trajectory dots from progress events.
 */
import { AnnotationState, MaskMode } from "./annotate.js";
import { Point } from "./instruction.js";

export type Tool = "points" | "brush" | "eraser";

export interface ViewOptions {
  scale: number;
  brushRadius: number;
}

export class EditCanvas {
  readonly canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  private image: HTMLImageElement | ImageBitmap | null = null;
  state: AnnotationState;
  tool: Tool = "points";
  options: ViewOptions;
  liveHandles: Point[][] = []; // trajectory per pair from progress events
  private dragging: { index: number; which: "handle" | "target" } | null = null;
  private painting = false;
  onChange: () => void = () => {};

  constructor(canvas: HTMLCanvasElement, width: number, height: number, options?: Partial<ViewOptions>) {
    this.canvas = canvas;
    this.options = { scale: 12, brushRadius: 2.0, ...options };
    this.state = new AnnotationState(width, height);
    canvas.width = width * this.options.scale;
    canvas.height = height * this.options.scale;
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas unavailable");
    this.ctx = ctx;
    this.bindPointerEvents();
  }

  setImage(image: HTMLImageElement | ImageBitmap): void {
    this.image = image;
    this.render();
  }

  reset(width: number, height: number): void {
    this.state = new AnnotationState(width, height);
    this.liveHandles = [];
    this.canvas.width = width * this.options.scale;
    this.canvas.height = height * this.options.scale;
    this.render();
  }

  private toImageCoords(event: MouseEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    const sx = this.canvas.width / rect.width;
    const sy = this.canvas.height / rect.height;
    return [
      ((event.clientX - rect.left) * sx) / this.options.scale,
      ((event.clientY - rect.top) * sy) / this.options.scale,
    ];
  }

  private hitPoint(x: number, y: number): { index: number; which: "handle" | "target" } | null {
    const tol = 1.2;
    for (let i = this.state.pairs.length - 1; i >= 0; i--) {
      const pair = this.state.pairs[i];
      if (Math.hypot(pair.handle[0] - x, pair.handle[1] - y) < tol) return { index: i, which: "handle" };
      if (pair.target && Math.hypot(pair.target[0] - x, pair.target[1] - y) < tol) {
        return { index: i, which: "target" };
      }
    }
    return null;
  }

  private bindPointerEvents(): void {
    this.canvas.addEventListener("mousedown", (event) => {
      const [x, y] = this.toImageCoords(event);
      if (this.tool === "points") {
        const hit = this.hitPoint(x, y);
        if (hit) {
          this.dragging = hit;
        } else {
          this.state.click(x, y);
          this.onChange();
        }
      } else {
        this.painting = true;
        this.state.paint(x, y, this.options.brushRadius, this.tool === "brush" ? "brush" : "eraser");
        this.onChange();
      }
      this.render();
    });
    this.canvas.addEventListener("mousemove", (event) => {
      const [x, y] = this.toImageCoords(event);
      if (this.dragging) {
        this.state.movePoint(this.dragging.index, this.dragging.which, x, y);
        this.onChange();
        this.render();
      } else if (this.painting && this.tool !== "points") {
        this.state.paintWithoutUndo(x, y, this.options.brushRadius, this.tool as MaskMode);
        this.onChange();
        this.render();
      }
    });
    const stop = () => {
      this.dragging = null;
      this.painting = false;
    };
    this.canvas.addEventListener("mouseup", stop);
    this.canvas.addEventListener("mouseleave", stop);
  }

  pushLiveHandles(handles: Point[]): void {
    handles.forEach((point, i) => {
      if (!this.liveHandles[i]) this.liveHandles[i] = [];
      this.liveHandles[i].push(point);
    });
    this.render();
  }

  clearLiveHandles(): void {
    this.liveHandles = [];
    this.render();
  }

  render(): void {
    const { scale } = this.options;
    const ctx = this.ctx;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    if (this.image) {
      ctx.drawImage(this.image, 0, 0, this.canvas.width, this.canvas.height);
    }
    // mask tint: editable region brighter
    if (this.state.maskHasStrokes) {
      ctx.save();
      ctx.fillStyle = "rgba(255, 255, 160, 0.25)";
      for (let y = 0; y < this.state.height; y++) {
        for (let x = 0; x < this.state.width; x++) {
          if (this.state.mask[y * this.state.width + x]) {
            ctx.fillRect(x * scale, y * scale, scale, scale);
          }
        }
      }
      ctx.restore();
    }
    // live trajectories
    ctx.save();
    ctx.strokeStyle = "rgba(255, 120, 40, 0.9)";
    ctx.lineWidth = 2;
    for (const path of this.liveHandles) {
      if (path.length < 2) continue;
      ctx.beginPath();
      ctx.moveTo((path[0][0] + 0.5) * scale, (path[0][1] + 0.5) * scale);
      for (const [x, y] of path.slice(1)) ctx.lineTo((x + 0.5) * scale, (y + 0.5) * scale);
      ctx.stroke();
    }
    ctx.restore();
    // point pairs: handle red, target blue
    for (const pair of this.state.pairs) {
      this.drawMarker(pair.handle, "#e03131");
      if (pair.target) {
        this.drawArrow(pair.handle, pair.target);
        this.drawMarker(pair.target, "#1971c2");
      }
    }
    for (const path of this.liveHandles) {
      const last = path[path.length - 1];
      if (last) this.drawMarker(last, "#ff922b");
    }
  }

  private drawMarker([x, y]: Point, color: string): void {
    const { scale } = this.options;
    const ctx = this.ctx;
    ctx.save();
    ctx.fillStyle = color;
    ctx.strokeStyle = "white";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.arc((x + 0.5) * scale, (y + 0.5) * scale, scale * 0.45, 0, Math.PI * 2);
    ctx.fill();
    ctx.stroke();
    ctx.restore();
  }

  private drawArrow([x0, y0]: Point, [x1, y1]: Point): void {
    const { scale } = this.options;
    const ctx = this.ctx;
    ctx.save();
    ctx.strokeStyle = "rgba(255,255,255,0.9)";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo((x0 + 0.5) * scale, (y0 + 0.5) * scale);
    ctx.lineTo((x1 + 0.5) * scale, (y1 + 0.5) * scale);
    ctx.stroke();
    ctx.restore();
  }
}
