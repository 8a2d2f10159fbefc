/**
 * Typed wrapper around the native navigation environment.
 *
 * Each MacroNavEnv owns one spawned server process, so independent
 * instances never share simulator state. All numeric payloads arrive as
 * contiguous typed arrays with explicit shapes.
 */

import { decodeF32, decodeI32, type F32Array, type I32Array, type PackedArray } from "./codec.js";
import { EnvServerClient, type ServerOptions } from "./rpc.js";

/** Procedural map request: generated on the native side from a seed. */
export interface MapSpec {
  size: number;
  style: "rooms" | "maze" | "cluttered";
  density: number;
  seed: number;
}

/** Map loaded from a PGM file on the native side. */
export interface MapFile {
  pgm: string;
}

export interface EnvConfig {
  nNodes?: number;
  knn?: number;
  ctxHw?: number;
  maxSteps?: number;
}

export interface ResetRequest {
  map: MapSpec | MapFile;
  start: [number, number];
  goal: [number, number];
  seed?: number;
  cfg?: EnvConfig;
}

export interface Observation {
  /** Egocentric belief crop, shape [ctxHw, ctxHw]. */
  context: F32Array;
  /** Per-slot candidate features, shape [nSlots, featureDim]. */
  nodeFeatures: F32Array;
  /** Candidate world positions, shape [nSlots, 2]. */
  nodePositions: F32Array;
  /** 1 for slots holding a real candidate; sums to nNodes. */
  nodeMask: I32Array;
  nNodes: number;
  goalInNodes: boolean;
  pose: [number, number];
  dGoal: number;
  steps: number;
  done: boolean;
  outcome: string;
  pathLengthM: number;
}

export interface StepResult extends Observation {
  reward: number;
}

export interface MaskResult {
  task: string;
  masked: I32Array;
  core?: I32Array;
}

export type MaskRequest =
  | { kind: "spm"; grid: [number, number]; rho: number; persistence: number }
  | { kind: "fov"; grid: [number, number]; rhoFov: number; rhoExpand: number }
  | { kind: "mae"; grid: [number, number]; ratio: number };

function wireCfg(cfg: EnvConfig | undefined): Record<string, number> {
  const out: Record<string, number> = {};
  if (cfg?.nNodes !== undefined) out.n_nodes = cfg.nNodes;
  if (cfg?.knn !== undefined) out.knn = cfg.knn;
  if (cfg?.ctxHw !== undefined) out.ctx_hw = cfg.ctxHw;
  if (cfg?.maxSteps !== undefined) out.max_steps = cfg.maxSteps;
  return out;
}

function parseObservation(reply: Record<string, unknown>): Observation {
  return {
    context: decodeF32(reply.context as PackedArray),
    nodeFeatures: decodeF32(reply.node_feats as PackedArray),
    nodePositions: decodeF32(reply.node_positions as PackedArray),
    nodeMask: decodeI32(reply.mask as PackedArray),
    nNodes: reply.n_nodes as number,
    goalInNodes: reply.goal_in_nodes as boolean,
    pose: reply.pose as [number, number],
    dGoal: reply.d_goal as number,
    steps: reply.steps as number,
    done: reply.done as boolean,
    outcome: reply.outcome as string,
    pathLengthM: reply.path_length_m as number,
  };
}

function wireMask(req: MaskRequest): { kind: string; params: Record<string, unknown> } {
  switch (req.kind) {
    case "spm":
      return { kind: "spm", params: { grid: req.grid, rho: req.rho, persistence: req.persistence } };
    case "fov":
      return { kind: "fov", params: { grid: req.grid, rho_fov: req.rhoFov, rho_expand: req.rhoExpand } };
    case "mae":
      return { kind: "mae", params: { grid: req.grid, ratio: req.ratio } };
  }
}

export class MacroNavEnv {
  private client: EnvServerClient;

  constructor(options: ServerOptions = {}) {
    this.client = new EnvServerClient(options);
  }

  /** Native package version, echoed from the server. */
  async version(): Promise<string> {
    const reply = await this.client.request("ping");
    return reply.version as string;
  }

  async reset(req: ResetRequest): Promise<Observation> {
    const reply = await this.client.request("reset", {
      map: req.map,
      start: req.start,
      goal: req.goal,
      seed: req.seed ?? 0,
      cfg: wireCfg(req.cfg),
    });
    return parseObservation(reply);
  }

  async step(action: number): Promise<StepResult> {
    const reply = await this.client.request("step", { action });
    return { ...parseObservation(reply), reward: reply.reward as number };
  }

  /** Sample a pretext mask with the environment's native samplers. */
  async masks(req: MaskRequest, seed = 0): Promise<MaskResult> {
    const reply = await this.client.request("masks", { ...wireMask(req), seed });
    return {
      task: reply.task as string,
      masked: decodeI32(reply.masked as PackedArray),
      core: reply.core === undefined ? undefined : decodeI32(reply.core as PackedArray),
    };
  }

  /**
   * Replay a scripted action list on a fresh native environment in one
   * request, returning its raw episode log. This is the reference the
   * binding equivalence tests compare stepwise results against.
   */
  async nativeEpisode(req: ResetRequest, actions: number[]): Promise<{
    log: Array<Record<string, unknown>>;
    outcome: string;
    pathLengthM: number;
  }> {
    const reply = await this.client.request("native_episode", {
      map: req.map,
      start: req.start,
      goal: req.goal,
      seed: req.seed ?? 0,
      cfg: wireCfg(req.cfg),
      actions,
    });
    return {
      log: reply.log as Array<Record<string, unknown>>,
      outcome: reply.outcome as string,
      pathLengthM: reply.path_length_m as number,
    };
  }

  /** Shut the native process down; later calls reject. */
  async close(): Promise<void> {
    await this.client.close();
  }
}

/** One-shot mask sampling without keeping an environment around. */
export async function masks(
  req: MaskRequest,
  seed = 0,
  options: ServerOptions = {},
): Promise<MaskResult> {
  const env = new MacroNavEnv(options);
  try {
    return await env.masks(req, seed);
  } finally {
    await env.close();
  }
}
