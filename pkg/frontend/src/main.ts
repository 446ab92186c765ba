import { ApiClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");
const app = new App(root, new ApiClient(""));
void app.init().then(async () => {
  // seed the session with one unconditional sample when a generator is up
  if (app.vocab) {
    try {
      const res = await app.api.generate({ mode: "unconditional", n: 1, p: 0.9, seed: 0 });
      const codes = res.codes[0];
      if (codes) {
        app.setCodes(codes);
        await app.regenerate(codes);
      }
    } catch {
      /* surfaced by the app banners on the next interaction */
    }
  }
});
