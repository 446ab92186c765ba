/** Typed client for the hiercad service.
 *
 * All generation traffic goes through a single-flight gate: issuing a new
 * request aborts the one in flight, so the UI never races stale results.
 */

import type {
  CadModelDoc,
  ClusterRecord,
  CodeTreeDoc,
  ErrorDoc,
  GenerateRequest,
  GenerateResponse,
  HealthDoc,
  Level,
  SlotPath,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export class OfflineError extends Error {}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function parseError(res: Response): Promise<ApiError> {
  let doc: ErrorDoc | null = null;
  try {
    doc = (await res.json()) as ErrorDoc;
  } catch {
    /* non-JSON error body */
  }
  return new ApiError(res.status, doc?.code ?? "error", doc?.error ?? res.statusText);
}

export class SingleFlight {
  private controller: AbortController | null = null;

  /** Abort whatever is in flight and run `task` with a fresh signal. */
  async run<T>(task: (signal: AbortSignal) => Promise<T>): Promise<T> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    try {
      return await task(controller.signal);
    } finally {
      if (this.controller === controller) this.controller = null;
    }
  }

  get busy(): boolean {
    return this.controller !== null;
  }
}

export class ApiClient {
  readonly gate = new SingleFlight();

  constructor(
    readonly base: string = "",
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let res: Response;
    try {
      res = await this.fetchImpl(this.base + path, init);
    } catch (err) {
      if (err instanceof Error && err.name === "AbortError") throw err;
      throw new OfflineError(`server unreachable: ${String(err)}`);
    }
    if (!res.ok) throw await parseError(res);
    return res;
  }

  private async getJson<T>(path: string): Promise<T> {
    return (await (await this.request(path)).json()) as T;
  }

  private async postJson<T>(path: string, body: unknown, signal?: AbortSignal): Promise<T> {
    const res = await this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
      signal: signal ?? null,
    });
    return (await res.json()) as T;
  }

  health(): Promise<HealthDoc> {
    return this.getJson("/health");
  }

  model(id: string): Promise<CadModelDoc> {
    return this.getJson(`/model/${id}`);
  }

  async meshById(id: string): Promise<string> {
    return (await this.request(`/mesh/${id}`)).text();
  }

  async mesh(model: CadModelDoc, signal?: AbortSignal): Promise<string> {
    const res = await this.request("/mesh", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ model }),
      signal: signal ?? null,
    });
    return res.text();
  }

  clusters(level: Level): Promise<ClusterRecord[]> {
    return this.getJson(`/codebook/${level}/clusters`);
  }

  editCodes(
    codes: CodeTreeDoc,
    slotPath: SlotPath,
    level: Level,
    newCode: number,
  ): Promise<{ codes: CodeTreeDoc }> {
    return this.postJson("/codes/edit", {
      codes,
      slot_path: slotPath,
      level,
      new_code: newCode,
    });
  }

  generate(req: GenerateRequest, signal?: AbortSignal): Promise<GenerateResponse> {
    return this.postJson("/generate", req, signal);
  }

  /** Single-flight regeneration: a newer call cancels the older one. */
  regenerate(
    codes: CodeTreeDoc,
    partial: CadModelDoc | null,
    seed: number,
  ): Promise<GenerateResponse> {
    return this.gate.run((signal) =>
      this.generate({ mode: "regenerate", codes, partial, seed }, signal),
    );
  }

  autocomplete(
    partial: CadModelDoc,
    n: number,
    p: number,
    seed: number,
  ): Promise<GenerateResponse> {
    return this.gate.run((signal) =>
      this.generate({ mode: "autocomplete", partial, n, p, seed }, signal),
    );
  }
}
