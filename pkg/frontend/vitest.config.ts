import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["test/**/*.test.ts"],
    testTimeout: 10_000,
    // the journey test boots the whole backend stack; keep files serial
    // so two stacks never compete for the same machine
    fileParallelism: false,
  },
});
