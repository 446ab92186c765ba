/** Live smoke test against a running `hiercad serve` instance.
 *
 * Skipped unless HIERCAD_SERVE_URL is set, e.g.
 *   HIERCAD_SERVE_URL=http://127.0.0.1:8000 npm run test:live
 */
import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { editCodeTree } from "../src/grammar.js";
import { parseObj, triangleCount } from "../src/obj.js";
import type { CodeTreeDoc } from "../src/types.js";

declare const process: { env: Record<string, string | undefined> };
const BASE = process.env["HIERCAD_SERVE_URL"];

describe.skipIf(!BASE)("live service", () => {
  it("regenerates a changed mesh after a loop code edit", async () => {
    const api = new ApiClient(BASE);
    const health = await api.health();
    expect(health.status).toBe("ok");
    expect(health.vocab).not.toBeNull();
    const vocab = health.vocab!;

    const first = await api.generate({ mode: "unconditional", n: 1, p: 0.9, seed: 0 });
    expect(first.models.length).toBeGreaterThan(0);
    const codes = first.codes[0] as CodeTreeDoc;
    const baseObj = await api.mesh(first.models[0]!);
    expect(triangleCount(parseObj(baseObj))).toBeGreaterThan(0);

    // Try loop codes until the regenerated mesh actually differs; with a
    // trained codebook most substitutions change the reconstructed loop.
    const current = codes.steps[0]!.loops[0]!;
    let changed: string | null = null;
    for (let c = 0; c < vocab.loop && changed === null; c++) {
      if (c === current) continue;
      const edited = editCodeTree(codes, ["loop", 0, 0], "loop", c);
      const res = await api.regenerate(edited, null, 0);
      if (res.models.length === 0) continue;
      const obj = await api.mesh(res.models[0]!);
      expect(triangleCount(parseObj(obj))).toBeGreaterThan(0);
      if (obj !== baseObj) changed = obj;
    }
    expect(changed).not.toBeNull();
  }, 120_000);
});
