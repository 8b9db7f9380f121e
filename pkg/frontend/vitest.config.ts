import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["tests/**/*.test.ts"],
    // the integration test builds a small pipeline run before serving
    testTimeout: 240_000,
    hookTimeout: 240_000,
  },
});
