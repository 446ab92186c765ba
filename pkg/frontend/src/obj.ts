/** Minimal OBJ parser for the meshes the service emits: v / g / f lines,
 * 1-based indices, polygon faces fan-triangulated.
 */

export interface ObjGroup {
  name: string;
  /** Triangles as triples of vertex indices into `vertices`. */
  triangles: [number, number, number][];
}

export interface ObjMesh {
  vertices: [number, number, number][];
  groups: ObjGroup[];
}

export function parseObj(text: string): ObjMesh {
  const vertices: [number, number, number][] = [];
  const groups: ObjGroup[] = [];
  let current: ObjGroup | null = null;

  const group = (): ObjGroup => {
    if (!current) {
      current = { name: "default", triangles: [] };
      groups.push(current);
    }
    return current;
  };

  for (const raw of text.split("\n")) {
    const line = raw.trim();
    if (!line || line.startsWith("#")) continue;
    const parts = line.split(/\s+/);
    const kind = parts[0];
    if (kind === "v") {
      if (parts.length < 4) throw new Error(`bad vertex line: ${line}`);
      vertices.push([Number(parts[1]), Number(parts[2]), Number(parts[3])]);
      const last = vertices[vertices.length - 1]!;
      if (last.some((x) => !Number.isFinite(x))) {
        throw new Error(`non-numeric vertex: ${line}`);
      }
    } else if (kind === "g") {
      current = { name: parts.slice(1).join(" ") || "default", triangles: [] };
      groups.push(current);
    } else if (kind === "f") {
      const idx = parts.slice(1).map((p) => {
        const i = Number(p.split("/")[0]);
        if (!Number.isInteger(i) || i === 0) throw new Error(`bad face index: ${line}`);
        return i > 0 ? i - 1 : vertices.length + i;
      });
      if (idx.length < 3) throw new Error(`degenerate face: ${line}`);
      for (const i of idx) {
        if (i < 0 || i >= vertices.length) throw new Error(`face index out of range: ${line}`);
      }
      const g = group();
      for (let k = 1; k + 1 < idx.length; k++) {
        g.triangles.push([idx[0]!, idx[k]!, idx[k + 1]!]);
      }
    }
    // other directives (vn, vt, usemtl, o, s) are ignored
  }
  return { vertices, groups };
}

export function triangleCount(mesh: ObjMesh): number {
  return mesh.groups.reduce((n, g) => n + g.triangles.length, 0);
}
