/** Wire types mirroring the hiercad service JSON bodies. */

export interface CurveDoc {
  pts: [number, number][];
}

export interface LoopDoc {
  curves: CurveDoc[];
}

export interface PlaneDoc {
  o: [number, number, number];
  a: [number, number, number];
  s: number;
}

export interface StepDoc {
  loops: LoopDoc[];
  plane: PlaneDoc;
  d: number;
  op: "union" | "cut" | "intersect";
}

export interface CadModelDoc {
  steps: StepDoc[];
}

export interface CodeStepDoc {
  profile: number;
  loops: number[];
}

export interface CodeTreeDoc {
  solid: number;
  steps: CodeStepDoc[];
}

export type Level = "loop" | "profile" | "solid";

/** Per-level code ranges, reported by /health once a generator is loaded. */
export interface Vocab {
  loop: number;
  profile: number;
  solid: number;
}

export interface HealthDoc {
  status: string;
  checkpoints: Record<string, boolean>;
  vocab: Vocab | null;
}

export type SlotPath = [Level, ...number[]];

export interface GenerateRequest {
  mode: "unconditional" | "autocomplete" | "edit" | "regenerate";
  partial?: CadModelDoc | null;
  codes?: CodeTreeDoc | CodeTreeDoc[];
  p?: number;
  seed?: number;
  n?: number;
}

export interface GenerateResponse {
  models: CadModelDoc[];
  codes: CodeTreeDoc[];
  dropped: number;
}

export interface ClusterRecord {
  code: number;
  members: number[][][];
}

export interface ErrorDoc {
  error: string;
  code: string;
  dropped?: number;
}
