/** Client-side mirror of the server's code-tree slot grammar.
 *
 * A tree that fails these checks is never sent to the server; the caps
 * match the dataset filters (5 steps, 20 loops per profile).
 */

import type { CodeTreeDoc, Level, SlotPath, Vocab } from "./types.js";

export const MAX_STEPS = 5;
export const MAX_LOOPS_PER_PROFILE = 20;

export function validateCodeTree(tree: CodeTreeDoc, vocab: Vocab | null): string[] {
  const problems: string[] = [];
  const inRange = (level: Level, code: number) => {
    if (!Number.isInteger(code) || code < 0) return false;
    return vocab === null || code < vocab[level];
  };
  if (!inRange("solid", tree.solid)) {
    problems.push(`solid code ${tree.solid} out of range`);
  }
  if (tree.steps.length < 1 || tree.steps.length > MAX_STEPS) {
    problems.push(`${tree.steps.length} steps (must be 1..${MAX_STEPS})`);
  }
  tree.steps.forEach((step, si) => {
    if (!inRange("profile", step.profile)) {
      problems.push(`profile code ${step.profile} at step ${si} out of range`);
    }
    if (step.loops.length < 1 || step.loops.length > MAX_LOOPS_PER_PROFILE) {
      problems.push(
        `step ${si} has ${step.loops.length} loops (must be 1..${MAX_LOOPS_PER_PROFILE})`,
      );
    }
    step.loops.forEach((code, li) => {
      if (!inRange("loop", code)) {
        problems.push(`loop code ${code} at step ${si} slot ${li} out of range`);
      }
    });
  });
  return problems;
}

/** Pure slot edit; throws on level mismatch or a path outside the tree. */
export function editCodeTree(
  tree: CodeTreeDoc,
  path: SlotPath,
  level: Level,
  newCode: number,
): CodeTreeDoc {
  const [slotLevel, ...idx] = path;
  if (slotLevel !== level) {
    throw new Error(`slot is a ${slotLevel} slot, not ${level}`);
  }
  const copy: CodeTreeDoc = {
    solid: tree.solid,
    steps: tree.steps.map((s) => ({ profile: s.profile, loops: [...s.loops] })),
  };
  if (level === "solid") {
    copy.solid = newCode;
    return copy;
  }
  const si = idx[0];
  if (si === undefined || si < 0 || si >= copy.steps.length) {
    throw new Error(`step index ${si} out of range`);
  }
  const step = copy.steps[si]!;
  if (level === "profile") {
    step.profile = newCode;
    return copy;
  }
  const li = idx[1];
  if (li === undefined || li < 0 || li >= step.loops.length) {
    throw new Error(`loop index ${li} out of range`);
  }
  step.loops[li] = newCode;
  return copy;
}
