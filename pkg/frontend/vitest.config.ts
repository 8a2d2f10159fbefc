import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // every test spawns the native server, which pays a torch import on a
    // single-core box; keep the limits generous
    testTimeout: 180_000,
    hookTimeout: 180_000,
    fileParallelism: false,
  },
});
