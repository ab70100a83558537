/**
 * The loop around sessions: reconnect with capped exponential backoff,
 * restart with cleared caches on reload, switch endpoints on redirect, exit
 * on stop. In a browser the reload is a real page reload (injected via
 * `requestPageReload`); everywhere else the shell restarts in-process, which
 * is observably the same thing to the coordinator.
 */

import { LruCache } from './lru';
import { builtinRegistry } from './tasks';
import {
  DEFAULT_CACHE_BYTES,
  FetchLike,
  freshStats,
  runSession,
  sleep,
  SocketFactory,
  WorkerStats,
  WORKER_VERSION,
} from './session';

export interface ShellConfig {
  endpoint: string;
  makeSocket: SocketFactory;
  fetchFn: FetchLike;
  userAgent?: string;
  workerIdProposal?: string;
  cacheCapacityBytes?: number;
  replyTimeoutMs?: number;
  backoffBaseMs?: number;
  backoffCapMs?: number;
  /** Safety bound on session count, for tests; default unbounded. */
  maxSessions?: number;
  shouldStop?: () => boolean;
  onStats?: (stats: WorkerStats) => void;
  /** Browser hook: trigger a real page reload instead of an in-process restart. */
  requestPageReload?: () => void;
  /** Browser hook: persist a redirect target so page reloads keep honoring it. */
  rememberEndpoint?: (url: string) => void;
  log?: (message: string) => void;
}

/** One line of status-strip text, updated per completed ticket. */
export function renderStatus(stats: WorkerStats): string {
  return `processed: ${stats.processed}\nerrors: ${stats.errors}`;
}

export async function runWorkerShell(cfg: ShellConfig): Promise<WorkerStats> {
  const stats = freshStats();
  const registry = await builtinRegistry();
  const cache = new LruCache(cfg.cacheCapacityBytes ?? DEFAULT_CACHE_BYTES);
  const backoffBase = cfg.backoffBaseMs ?? 500;
  const backoffCap = cfg.backoffCapMs ?? 30_000;
  const maxSessions = cfg.maxSessions ?? Infinity;
  const notify = () => cfg.onStats?.({ ...stats });

  let endpoint = cfg.endpoint;
  let backoff = backoffBase;
  for (let sessions = 0; sessions < maxSessions; sessions += 1) {
    if (cfg.shouldStop?.() === true) break;
    const exit = await runSession({
      endpoint,
      registry,
      cache,
      stats,
      makeSocket: cfg.makeSocket,
      fetchFn: cfg.fetchFn,
      userAgent: cfg.userAgent ?? `ticketgrid-browser-worker/${WORKER_VERSION}`,
      workerIdProposal: cfg.workerIdProposal,
      replyTimeoutMs: cfg.replyTimeoutMs,
      shouldStop: cfg.shouldStop,
      onStats: cfg.onStats,
      log: cfg.log,
    });
    if (exit.opened) backoff = backoffBase;
    if (exit.reason === 'stop') break;
    if (exit.reason === 'reload') {
      stats.reloads += 1;
      notify();
      if (cfg.requestPageReload) {
        cfg.requestPageReload(); // the page is about to restart from scratch
        break;
      }
      cache.clear();
      continue;
    }
    if (exit.reason === 'redirect') {
      endpoint = exit.url;
      cfg.rememberEndpoint?.(exit.url);
      continue;
    }
    stats.reconnects += 1;
    notify();
    cfg.log?.(`connection lost (${exit.detail}); retrying in ${backoff}ms`);
    await sleep(backoff);
    backoff = Math.min(backoff * 2, backoffCap);
  }
  return stats;
}
