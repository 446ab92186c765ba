/** Session wiring: code-tree editing, regeneration, autocomplete, viewer. */

import { ApiClient, ApiError, OfflineError } from "./api.js";
import { editCodeTree, validateCodeTree } from "./grammar.js";
import { parseObj } from "./obj.js";
import { MeshViewer } from "./viewer.js";
import { TreeView, type EditEvent } from "./tree.js";
import type { CadModelDoc, CodeTreeDoc, Vocab } from "./types.js";

export interface SessionState {
  partial: CadModelDoc | null;
  codes: CodeTreeDoc | null;
  model: CadModelDoc | null;
  previousObj: string | null;
  currentObj: string | null;
  seed: number;
  p: number;
}

export class App {
  readonly state: SessionState = {
    partial: null,
    codes: null,
    model: null,
    previousObj: null,
    currentObj: null,
    seed: 0,
    p: 0.9,
  };
  vocab: Vocab | null = null;
  readonly tree: TreeView;
  readonly viewer: MeshViewer;
  readonly compareViewer: MeshViewer;
  private readonly offlineBanner: HTMLElement;
  private readonly errorBanner: HTMLElement;
  private readonly legend: HTMLElement;

  constructor(
    readonly root: HTMLElement,
    readonly api: ApiClient,
  ) {
    const doc = root.ownerDocument;
    const el = (cls: string, tag = "div"): HTMLElement => {
      const e = doc.createElement(tag);
      e.className = cls;
      root.append(e);
      return e;
    };
    this.offlineBanner = el("banner offline-banner hidden");
    this.offlineBanner.textContent = "server unreachable - showing last known state";
    this.errorBanner = el("banner error-banner hidden");
    const canvas = doc.createElement("canvas");
    canvas.width = 480;
    canvas.height = 360;
    canvas.className = "viewer";
    const compare = doc.createElement("canvas");
    compare.width = 240;
    compare.height = 180;
    compare.className = "viewer compare";
    root.append(canvas, compare);
    this.legend = el("legend");
    this.viewer = new MeshViewer(canvas);
    this.compareViewer = new MeshViewer(compare);
    this.tree = new TreeView(el("tree-root"), (e) => void this.handleEdit(e));
  }

  private setHidden(elm: HTMLElement, hidden: boolean): void {
    elm.classList.toggle("hidden", hidden);
  }

  showError(message: string): void {
    this.errorBanner.textContent = message;
    this.setHidden(this.errorBanner, false);
  }

  clearBanners(): void {
    this.setHidden(this.errorBanner, true);
    this.setHidden(this.offlineBanner, true);
  }

  /** Pull /health; read-only mode when no generator checkpoint is loaded. */
  async init(): Promise<void> {
    try {
      const health = await this.api.health();
      this.vocab = health.vocab;
      this.tree.setVocab(health.vocab);
      this.tree.setReadOnly(health.vocab === null);
      this.clearBanners();
    } catch (err) {
      this.handleFailure(err);
    }
  }

  setCodes(codes: CodeTreeDoc): void {
    const problems = validateCodeTree(codes, this.vocab);
    if (problems.length) {
      this.showError(`malformed code tree: ${problems.join("; ")}`);
      return;
    }
    this.state.codes = codes;
    this.tree.setTree(codes);
  }

  private updateLegend(): void {
    const n = this.state.model?.steps.length ?? 0;
    const shown = this.viewer.stats().steps.length;
    this.legend.textContent = n ? `${n} steps (${shown} rendered)` : "";
  }

  private showMesh(objText: string): void {
    if (this.state.currentObj !== null) {
      this.state.previousObj = this.state.currentObj;
      this.compareViewer.setMesh(parseObj(this.state.previousObj));
    }
    this.state.currentObj = objText;
    this.viewer.setMesh(parseObj(objText));
    this.updateLegend();
  }

  /** One edit = one regeneration request (the mesh fetch rides its result). */
  async handleEdit(e: EditEvent): Promise<void> {
    if (!this.state.codes) return;
    let edited: CodeTreeDoc;
    try {
      edited = editCodeTree(this.state.codes, e.path, e.level, e.newCode);
    } catch (err) {
      this.showError(String(err));
      return;
    }
    const problems = validateCodeTree(edited, this.vocab);
    if (problems.length) {
      this.showError(`edit rejected: ${problems.join("; ")}`);
      return;
    }
    await this.regenerate(edited);
  }

  async regenerate(codes: CodeTreeDoc): Promise<void> {
    try {
      const res = await this.api.regenerate(codes, this.state.partial, this.state.seed);
      const model = res.models[0];
      if (!model) {
        this.showError(`generation dropped (${res.dropped} failed)`);
        return;
      }
      this.state.codes = codes;
      this.tree.setTree(codes);
      this.state.model = model;
      this.showMesh(await this.api.mesh(model));
      this.clearBanners();
    } catch (err) {
      this.handleFailure(err);
    }
  }

  async autocomplete(partial: CadModelDoc, n: number): Promise<CadModelDoc[]> {
    try {
      const res = await this.api.autocomplete(partial, n, this.state.p, this.state.seed);
      this.clearBanners();
      return res.models;
    } catch (err) {
      this.handleFailure(err);
      return [];
    }
  }

  private handleFailure(err: unknown): void {
    if (err instanceof Error && err.name === "AbortError") return; // superseded
    if (err instanceof OfflineError) {
      this.setHidden(this.offlineBanner, false); // state is kept as-is
      return;
    }
    if (err instanceof ApiError) {
      this.showError(`${err.status} ${err.code}: ${err.message}`);
      return;
    }
    this.showError(String(err));
  }
}
