export { decodeF32, decodeI32 } from "./codec.js";
export type { F32Array, I32Array, PackedArray } from "./codec.js";
export { EnvServerClient } from "./rpc.js";
export type { ServerOptions } from "./rpc.js";
export { MacroNavEnv, masks } from "./env.js";
export type {
  EnvConfig,
  MapFile,
  MapSpec,
  MaskRequest,
  MaskResult,
  Observation,
  ResetRequest,
  StepResult,
} from "./env.js";
