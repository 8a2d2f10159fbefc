import { execFile } from "node:child_process";
import { promisify } from "node:util";
import { describe, expect, it } from "vitest";

import { MacroNavEnv, type ResetRequest } from "../src/index.js";

const run = promisify(execFile);

// Verified to run the full 20 steps without terminating: node 0 never
// walks into the goal's success radius from this start.
const SCRIPTED: ResetRequest = {
  map: { size: 64, style: "rooms", density: 0.1, seed: 5 },
  start: [0.15000000000000002, 0.15000000000000002],
  goal: [1.1500000000000001, 1.6500000000000001],
  seed: 9,
  cfg: { nNodes: 8, ctxHw: 32, maxSteps: 64 },
};
const ACTIONS = Array(20).fill(0) as number[];

const MASK_REFERENCE_PY = `
import json
import numpy as np
from macronav import maskgen

out = {}
rng = np.random.default_rng(123)
spm = maskgen.spm_mask((16, 16), 0.35, 0.8, rng)
out["spm"] = spm.masked.tolist()
rng = np.random.default_rng(77)
fov = maskgen.fov_mask((16, 16), 0.12, 0.1, rng)
out["fov"] = {"masked": fov.masked.tolist(), "core": fov.core.tolist()}
rng = np.random.default_rng(2)
mae = maskgen.mae_mask((16, 16), 0.75, rng)
out["mae"] = mae.masked.tolist()
print(json.dumps(out))
`;

describe("binding equivalence with the native path", () => {
  it("a scripted 20-step episode reproduces the native log exactly", async () => {
    const env = new MacroNavEnv();
    try {
      const trace: Array<{
        pose: [number, number];
        reward: number;
        dGoal: number;
        outcome: string;
      }> = [];
      const first = await env.reset(SCRIPTED);
      trace.push({ pose: first.pose, reward: 0, dGoal: first.dGoal, outcome: first.outcome });
      for (const action of ACTIONS) {
        const sr = await env.step(action);
        trace.push({ pose: sr.pose, reward: sr.reward, dGoal: sr.dGoal, outcome: sr.outcome });
        if (sr.done) break;
      }

      const native = await env.nativeEpisode(SCRIPTED, ACTIONS);
      expect(native.log.length).toBe(21);
      expect(trace.length).toBe(native.log.length);
      native.log.forEach((entry, k) => {
        const mine = trace[k]!;
        // strict equality: both sides of every number took the same
        // JSON round-trip from the same native doubles
        expect(mine.pose[0]).toBe((entry.pose as number[])[0]);
        expect(mine.pose[1]).toBe((entry.pose as number[])[1]);
        expect(mine.reward).toBe(entry.reward as number);
        expect(mine.dGoal).toBe(entry.d_goal as number);
        expect(mine.outcome).toBe(entry.outcome as string);
      });
      expect(trace[trace.length - 1]!.outcome).toBe(native.outcome);
    } finally {
      await env.close();
    }
  });

  it("bound mask samplers match the native generators index for index", async () => {
    const { stdout } = await run("python3", ["-c", MASK_REFERENCE_PY]);
    const reference = JSON.parse(stdout) as {
      spm: number[];
      fov: { masked: number[]; core: number[] };
      mae: number[];
    };

    const env = new MacroNavEnv();
    try {
      const spm = await env.masks(
        { kind: "spm", grid: [16, 16], rho: 0.35, persistence: 0.8 }, 123);
      expect(Array.from(spm.masked.data)).toEqual(reference.spm);

      const fov = await env.masks(
        { kind: "fov", grid: [16, 16], rhoFov: 0.12, rhoExpand: 0.1 }, 77);
      expect(Array.from(fov.masked.data)).toEqual(reference.fov.masked);
      expect(Array.from(fov.core!.data)).toEqual(reference.fov.core);

      const mae = await env.masks(
        { kind: "mae", grid: [16, 16], ratio: 0.75 }, 2);
      expect(Array.from(mae.masked.data)).toEqual(reference.mae);
      expect(mae.masked.data.length).toBe(192);
    } finally {
      await env.close();
    }
  });
});
