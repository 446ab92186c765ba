import type {
  CadModelDoc,
  CodeTreeDoc,
  GenerateResponse,
  HealthDoc,
  Vocab,
} from "../src/types.js";
import type { FetchLike } from "../src/api.js";

/** Two profiles, 2 + 4 loops: 1 S, 2 P, 6 L nodes. */
export const FIG3_TREE: CodeTreeDoc = {
  solid: 5,
  steps: [
    { profile: 3, loops: [0, 1] },
    { profile: 7, loops: [2, 4, 6, 8] },
  ],
};

export const VOCAB: Vocab = { loop: 16, profile: 12, solid: 10 };

/** Unit cube as 6 quads, fan-triangulated to 12 triangles. */
export const CUBE_OBJ = [
  "v 0 0 0", "v 1 0 0", "v 1 1 0", "v 0 1 0",
  "v 0 0 1", "v 1 0 1", "v 1 1 1", "v 0 1 1",
  "g step0_union",
  "f 1 2 3 4",
  "f 5 8 7 6",
  "f 1 5 6 2",
  "f 2 6 7 3",
  "f 3 7 8 4",
  "f 4 8 5 1",
  "",
].join("\n");

export const MODEL_DOC: CadModelDoc = {
  steps: [
    {
      loops: [
        {
          curves: [
            { pts: [[0, 0], [63, 0]] },
            { pts: [[63, 0], [63, 63]] },
            { pts: [[63, 63], [0, 63]] },
            { pts: [[0, 63], [0, 0]] },
          ],
        },
      ],
      plane: { o: [0, 0, 0], a: [0, 0, 0], s: 63 },
      d: 63,
      op: "union",
    },
  ],
};

export interface LoggedRequest {
  method: string;
  path: string;
  body: unknown;
}

/** In-memory stand-in for `hiercad serve`, with a request log. */
export class FakeServer {
  requests: LoggedRequest[] = [];
  vocab: Vocab | null = VOCAB;
  meshFor: (codes: CodeTreeDoc | undefined) => string = () => CUBE_OBJ;
  failNext = false;

  count(method: string, path: string): number {
    return this.requests.filter((r) => r.method === method && r.path === path).length;
  }

  fetch: FetchLike = async (input, init) => {
    const url = new URL(input, "http://fake");
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(String(init.body)) : null;
    this.requests.push({ method, path: url.pathname, body });
    if (this.failNext) {
      this.failNext = false;
      throw new TypeError("fetch failed");
    }
    if (init?.signal?.aborted) {
      throw Object.assign(new Error("aborted"), { name: "AbortError" });
    }

    const json = (doc: unknown, status = 200) =>
      new Response(JSON.stringify(doc), {
        status,
        headers: { "content-type": "application/json" },
      });
    const text = (t: string) =>
      new Response(t, { status: 200, headers: { "content-type": "text/plain" } });

    if (url.pathname === "/health") {
      const health: HealthDoc = {
        status: "ok",
        checkpoints: { "encoder.ckpt": this.vocab !== null },
        vocab: this.vocab,
      };
      return json(health);
    }
    if (url.pathname === "/generate" && method === "POST") {
      const req = body as { mode: string; codes?: CodeTreeDoc };
      const codes = Array.isArray(req.codes) ? req.codes[0] : req.codes;
      const res: GenerateResponse = {
        models: [MODEL_DOC],
        codes: [codes ?? FIG3_TREE],
        dropped: 0,
      };
      return json(res);
    }
    if (url.pathname === "/mesh" && method === "POST") {
      return text(this.meshFor(undefined));
    }
    if (url.pathname === "/codes/edit" && method === "POST") {
      const req = body as { codes: CodeTreeDoc; level: string; slot_path: unknown[] };
      if (req.slot_path[0] !== req.level) {
        return json({ error: "level mismatch", code: "level_mismatch" }, 409);
      }
      return json({ codes: req.codes });
    }
    return json({ error: `unknown path ${url.pathname}`, code: "unknown_id" }, 404);
  };
}
