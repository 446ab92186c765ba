/** Software-projected mesh viewer on a 2D canvas.
 *
 * Painter's-algorithm flat shading keeps the viewer dependency-free and
 * lets the scene-graph logic run headless (rendering is skipped when the
 * canvas has no 2D context, as under jsdom). Groups named step{i}_{op}
 * are colored per step; cut steps render translucent.
 */

import type { ObjMesh } from "./obj.js";
import { triangleCount } from "./obj.js";

const STEP_COLORS = [
  [86, 140, 230],
  [235, 156, 70],
  [96, 190, 120],
  [200, 100, 190],
  [220, 210, 90],
];

interface GroupStyle {
  step: number;
  op: string;
  fill: string;
}

function styleFor(name: string): GroupStyle {
  const m = /^step(\d+)_(\w+)$/.exec(name);
  const step = m ? Number(m[1]) : 0;
  const op = m ? m[2]! : "union";
  const [r, g, b] = STEP_COLORS[step % STEP_COLORS.length]!;
  const alpha = op === "cut" ? 0.35 : 1.0;
  return { step, op, fill: `rgba(${r},${g},${b},${alpha})` };
}

export interface ViewerStats {
  triangles: number;
  groups: string[];
  steps: number[];
}

export class MeshViewer {
  private mesh: ObjMesh | null = null;
  private yaw = 0.8;
  private pitch = 0.5;
  private zoom = 1.0;
  private dragging = false;
  private lastX = 0;
  private lastY = 0;

  constructor(readonly canvas: HTMLCanvasElement) {
    canvas.addEventListener("mousedown", (e) => {
      this.dragging = true;
      this.lastX = e.clientX;
      this.lastY = e.clientY;
    });
    canvas.addEventListener("mousemove", (e) => {
      if (!this.dragging) return;
      this.yaw += (e.clientX - this.lastX) * 0.01;
      this.pitch += (e.clientY - this.lastY) * 0.01;
      this.pitch = Math.max(-1.5, Math.min(1.5, this.pitch));
      this.lastX = e.clientX;
      this.lastY = e.clientY;
      this.render();
    });
    window.addEventListener("mouseup", () => {
      this.dragging = false;
    });
    canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.zoom *= e.deltaY > 0 ? 0.9 : 1.1;
      this.zoom = Math.max(0.2, Math.min(8, this.zoom));
      this.render();
    });
  }

  setMesh(mesh: ObjMesh | null): void {
    this.mesh = mesh;
    this.render();
  }

  stats(): ViewerStats {
    if (!this.mesh) return { triangles: 0, groups: [], steps: [] };
    const steps = new Set<number>();
    for (const g of this.mesh.groups) steps.add(styleFor(g.name).step);
    return {
      triangles: triangleCount(this.mesh),
      groups: this.mesh.groups.map((g) => g.name),
      steps: [...steps].sort((a, b) => a - b),
    };
  }

  render(): void {
    let ctx: CanvasRenderingContext2D | null = null;
    try {
      ctx = this.canvas.getContext?.("2d") ?? null;
    } catch {
      ctx = null; // jsdom canvases throw instead of returning null
    }
    if (!ctx) return; // headless: scene state is still queryable via stats()
    const { width: w, height: h } = this.canvas;
    ctx.clearRect(0, 0, w, h);
    if (!this.mesh || this.mesh.vertices.length === 0) return;

    const cy = Math.cos(this.yaw), sy = Math.sin(this.yaw);
    const cp = Math.cos(this.pitch), sp = Math.sin(this.pitch);
    const scale = Math.min(w, h) * 0.7 * this.zoom;
    const project = ([x, y, z]: [number, number, number]): [number, number, number] => {
      const u = x - 0.5, v = y - 0.5, t = z - 0.5;
      const x1 = cy * u + sy * t;
      const z1 = -sy * u + cy * t;
      const y1 = cp * v - sp * z1;
      const z2 = sp * v + cp * z1;
      return [w / 2 + x1 * scale, h / 2 - y1 * scale, z2];
    };

    const faces: { pts: [number, number][]; depth: number; fill: string }[] = [];
    for (const g of this.mesh.groups) {
      const { fill } = styleFor(g.name);
      for (const [a, b, c] of g.triangles) {
        const pa = project(this.mesh.vertices[a]!);
        const pb = project(this.mesh.vertices[b]!);
        const pc = project(this.mesh.vertices[c]!);
        faces.push({
          pts: [[pa[0], pa[1]], [pb[0], pb[1]], [pc[0], pc[1]]],
          depth: (pa[2] + pb[2] + pc[2]) / 3,
          fill,
        });
      }
    }
    faces.sort((a, b) => b.depth - a.depth);
    for (const f of faces) {
      ctx.beginPath();
      ctx.moveTo(f.pts[0]![0], f.pts[0]![1]);
      ctx.lineTo(f.pts[1]![0], f.pts[1]![1]);
      ctx.lineTo(f.pts[2]![0], f.pts[2]![1]);
      ctx.closePath();
      ctx.fillStyle = f.fill;
      ctx.fill();
    }
  }
}
