import { defineConfig } from 'vitest/config';

// `vite build` bundles the browser entry into dist/worker.js and copies
// public/ (worker.html) alongside it; point the coordinator's --static-dir
// at dist/ to serve the page. `vitest` picks up the `test` section.
export default defineConfig({
  publicDir: 'public',
  build: {
    outDir: 'dist',
    emptyOutDir: true,
    minify: false,
    lib: {
      entry: 'src/browser.ts',
      formats: ['iife'],
      name: 'ticketgridWorker',
      fileName: () => 'worker.js',
    },
  },
  test: {
    environment: 'node',
    include: ['tests/**/*.test.ts'],
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
