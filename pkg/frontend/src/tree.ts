/** Interactive code-tree view: S/P/L nodes with level badges and a
 * level-restricted code picker.
 */

import type { CodeTreeDoc, Level, SlotPath, Vocab } from "./types.js";

export interface EditEvent {
  path: SlotPath;
  level: Level;
  newCode: number;
}

export class TreeView {
  private tree: CodeTreeDoc | null = null;
  private vocab: Vocab | null = null;
  private readOnly = false;

  constructor(
    readonly root: HTMLElement,
    private readonly onEdit: (e: EditEvent) => void,
  ) {
    root.classList.add("code-tree");
  }

  setVocab(vocab: Vocab | null): void {
    this.vocab = vocab;
  }

  setReadOnly(flag: boolean): void {
    this.readOnly = flag;
    this.renderTree();
  }

  setTree(tree: CodeTreeDoc | null): void {
    this.tree = tree;
    this.renderTree();
  }

  private node(level: Level, code: number, path: SlotPath): HTMLElement {
    const doc = this.root.ownerDocument;
    const el = doc.createElement("div");
    el.className = `tree-node level-${level}`;
    el.dataset["level"] = level;
    el.dataset["path"] = path.join(",");
    const badge = doc.createElement("span");
    badge.className = "badge";
    badge.textContent = level === "solid" ? "S" : level === "profile" ? "P" : "L";
    const label = doc.createElement("span");
    label.className = "code";
    label.textContent = String(code);
    el.append(badge, label);
    if (!this.readOnly) {
      el.addEventListener("click", (ev) => {
        ev.stopPropagation();
        this.openPicker(el, level, code, path);
      });
    }
    return el;
  }

  /** Replace any open picker with one restricted to `level`'s code range. */
  private openPicker(anchor: HTMLElement, level: Level, code: number, path: SlotPath): void {
    this.closePicker();
    const doc = this.root.ownerDocument;
    const k = this.vocab ? this.vocab[level] : 0;
    const select = doc.createElement("select");
    select.className = "code-picker";
    select.dataset["level"] = level;
    for (let c = 0; c < k; c++) {
      const opt = doc.createElement("option");
      opt.value = String(c);
      opt.textContent = `${level} ${c}`;
      if (c === code) opt.selected = true;
      select.append(opt);
    }
    select.addEventListener("change", () => {
      const newCode = Number(select.value);
      this.closePicker();
      this.onEdit({ path, level, newCode });
    });
    anchor.append(select);
  }

  private closePicker(): void {
    this.root.querySelectorAll("select.code-picker").forEach((s) => s.remove());
  }

  private renderTree(): void {
    this.root.textContent = "";
    if (!this.tree) return;
    const doc = this.root.ownerDocument;
    const solid = this.node("solid", this.tree.solid, ["solid"]);
    this.root.append(solid);
    const stepList = doc.createElement("div");
    stepList.className = "tree-steps";
    solid.append(stepList);
    this.tree.steps.forEach((step, si) => {
      const prof = this.node("profile", step.profile, ["profile", si]);
      stepList.append(prof);
      const loopList = doc.createElement("div");
      loopList.className = "tree-loops";
      prof.append(loopList);
      step.loops.forEach((code, li) => {
        loopList.append(this.node("loop", code, ["loop", si, li]));
      });
    });
  }
}
