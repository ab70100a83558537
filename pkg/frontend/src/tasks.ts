/**
 * Statically bundled tasks, versioned by a content hash over a small
 * language-neutral definition document (canonical JSON, sha256). The hash is
 * the cross-implementation contract: the coordinator advertises a version per
 * task and this worker refuses tickets whose version differs from its local
 * hash, so both sides must derive identical hashes from identical documents.
 *
 * A task implementation is a pure function `fn(args, ctx) -> results` where
 * `args` is the ticket's input chunk and `results` is one output per input,
 * in order. `ctx` resolves declared resources and carries the delivery
 * attempt number.
 */

import { canonicalJson } from './canonical';
import { sha256Hex } from './sha256';

export interface TaskContext {
  attempt: number;
  resource(name: string): Promise<Uint8Array>;
}

export type TaskFn = (args: unknown[], ctx: TaskContext) => Promise<unknown[]>;

export interface TaskEntry {
  version: string;
  resourceDeps: string[];
  fn: TaskFn;
}

export type TaskRegistry = Map<string, TaskEntry>;

// -- definitions ------------------------------------------------------------------
// These documents mirror the coordinator's task definitions verbatim; the
// version hash is sha256 over their canonical JSON. Do not edit casually; a
// changed document is a new task version.

export const IS_PRIME_DEF = {
  task: 'is_prime',
  input: 'integer candidate >= 1',
  output: '{is_prime: boolean}',
  rule: 'prime iff no divisor in [2, isqrt(candidate)]; candidate 1 reports true',
};

export const CRASH_GATE_DEF = {
  task: 'crash_gate',
  input: '{fail_attempts: integer, value: any}',
  output: '{value: any, attempt: integer}',
  rule: 'raise while delivery attempt <= fail_attempts, then echo value',
};

export const KNN_CHUNK_DEF = {
  task: 'knn_chunk',
  input: 'integer test-image index',
  output: '{index: integer, label: integer}',
  rule: 'label of the L2-nearest training image; float64 scores; ties to lowest index',
  resources: ['knn-meta', 'knn-train-images', 'knn-train-labels', 'knn-test-images'],
};

export function definitionHash(doc: object): Promise<string> {
  return sha256Hex(canonicalJson(doc));
}

/** An error whose `name` is chosen by the thrower; error reports lead with it. */
export function taskError(name: string, message: string): Error {
  const err = new Error(message);
  err.name = name;
  return err;
}

/** `"<name>: <message>"`, the format error reports carry on the wire. */
export function errorMessageOf(err: unknown): string {
  if (err instanceof Error) return `${err.name}: ${err.message}`;
  return String(err);
}

// -- is_prime ---------------------------------------------------------------------

function isqrt(n: number): number {
  let r = Math.floor(Math.sqrt(n));
  while ((r + 1) * (r + 1) <= n) r += 1;
  while (r * r > n) r -= 1;
  return r;
}

/**
 * True iff candidate has no divisor in [2, isqrt(candidate)]. The loop never
 * runs for candidate=1, which therefore reports prime; kept deliberately,
 * results are read with that convention.
 */
export function isPrime(candidate: number): boolean {
  if (!Number.isInteger(candidate)) {
    throw taskError('ValueError', `candidate must be an integer, got ${candidate}`);
  }
  if (candidate < 1) {
    throw taskError('ValueError', `candidate must be >= 1, got ${candidate}`);
  }
  const limit = isqrt(candidate);
  for (let i = 2; i <= limit; i += 1) {
    if (candidate % i === 0) return false;
  }
  return true;
}

async function runIsPrime(args: unknown[]): Promise<unknown[]> {
  return args.map((c) => ({ is_prime: isPrime(Number(c)) }));
}

// -- crash_gate -------------------------------------------------------------------

async function runCrashGate(args: unknown[], ctx: TaskContext): Promise<unknown[]> {
  const out: unknown[] = [];
  for (const item of args) {
    const record = (item ?? {}) as Record<string, unknown>;
    const failAttempts = Number(record.fail_attempts ?? 0);
    if (ctx.attempt <= failAttempts) {
      throw taskError(
        'RuntimeError',
        `injected failure: attempt ${ctx.attempt} <= ${record.fail_attempts}`,
      );
    }
    out.push({ value: record.value === undefined ? null : record.value, attempt: ctx.attempt });
  }
  return out;
}

// -- knn_chunk --------------------------------------------------------------------

/** Reinterpret little-endian float32 resource bytes, validating the length. */
function floatsFrom(bytes: Uint8Array, count: number): Float32Array {
  const expected = count * 4;
  if (bytes.length !== expected) {
    throw taskError('DatasetError', `blob is ${bytes.length} bytes, expected ${expected}`);
  }
  if (bytes.byteOffset % 4 === 0) {
    return new Float32Array(bytes.buffer, bytes.byteOffset, count);
  }
  const aligned = new Uint8Array(bytes); // copy to a 4-aligned buffer
  return new Float32Array(aligned.buffer, 0, count);
}

async function runKnnChunk(args: unknown[], ctx: TaskContext): Promise<unknown[]> {
  const meta = JSON.parse(new TextDecoder().decode(await ctx.resource('knn-meta'))) as {
    train_count: number;
    test_count: number;
    dim: number;
  };
  const dim = Number(meta.dim);
  const trainCount = Number(meta.train_count);
  const testCount = Number(meta.test_count);
  const train = floatsFrom(await ctx.resource('knn-train-images'), trainCount * dim);
  const labels = await ctx.resource('knn-train-labels');
  const test = floatsFrom(await ctx.resource('knn-test-images'), testCount * dim);

  // ||t - x||^2 = ||x||^2 - 2 t.x + ||t||^2; the ||t||^2 term is constant per
  // test image and cannot change the argmin, so it is dropped. All arithmetic
  // in float64; ties go to the lowest training index (strict < keeps first).
  const trainSq = new Float64Array(trainCount);
  for (let j = 0; j < trainCount; j += 1) {
    let s = 0;
    const base = j * dim;
    for (let d = 0; d < dim; d += 1) s += train[base + d] * train[base + d];
    trainSq[j] = s;
  }

  const out: unknown[] = [];
  for (const raw of args) {
    const i = Number(raw);
    if (!Number.isInteger(i) || i < 0 || i >= testCount) {
      throw taskError('IndexError', `test index ${String(raw)} out of range [0, ${testCount})`);
    }
    if (trainCount === 0) {
      throw taskError('ValueError', 'attempt to get argmin of an empty sequence');
    }
    let bestScore = Infinity;
    let best = -1;
    for (let j = 0; j < trainCount; j += 1) {
      let dot = 0;
      const tb = j * dim;
      const qb = i * dim;
      for (let d = 0; d < dim; d += 1) dot += train[tb + d] * test[qb + d];
      const score = trainSq[j] - 2 * dot;
      if (score < bestScore) {
        bestScore = score;
        best = j;
      }
    }
    out.push({ index: i, label: labels[best] });
  }
  return out;
}

// -- registry & execution -----------------------------------------------------------

/** Every bundled task, keyed by task_id, with content-hash versions. */
export async function builtinRegistry(): Promise<TaskRegistry> {
  const registry: TaskRegistry = new Map();
  const defs: Array<[string, object, string[], TaskFn]> = [
    ['is_prime', IS_PRIME_DEF, [], runIsPrime],
    ['crash_gate', CRASH_GATE_DEF, [], runCrashGate],
    ['knn_chunk', KNN_CHUNK_DEF, KNN_CHUNK_DEF.resources.slice(), runKnnChunk],
  ];
  for (const [taskId, doc, resourceDeps, fn] of defs) {
    registry.set(taskId, { version: await definitionHash(doc), resourceDeps, fn });
  }
  return registry;
}

export interface ExecutionOutcome {
  ok: boolean;
  results?: unknown[];
  errorMessage: string;
  trace: string;
}

/** Run fn, converting any exception into a captured failure. */
export async function executeTask(
  fn: TaskFn,
  args: unknown[],
  ctx: TaskContext,
): Promise<ExecutionOutcome> {
  let results: unknown[];
  try {
    results = await fn(args, ctx);
  } catch (err) {
    const trace = err instanceof Error && err.stack ? err.stack : '(no stack)';
    return { ok: false, errorMessage: errorMessageOf(err), trace };
  }
  if (!Array.isArray(results) || results.length !== args.length) {
    const kind = Array.isArray(results) ? 'array' : typeof results;
    const length = Array.isArray(results) ? String(results.length) : 'n/a';
    return {
      ok: false,
      errorMessage: `task returned ${kind} of length ${length}, expected ${args.length}`,
      trace: '(no traceback: bad task return shape)',
    };
  }
  return { ok: true, results, errorMessage: '', trace: '' };
}
