/**
 * One worker session over one WebSocket connection: say hello, then loop
 * request -> prepare -> execute -> submit with a single ticket in flight.
 *
 * The session is environment-agnostic: the socket, fetch and stop signal are
 * injected, so the same loop runs in a browser page and under Node tests.
 * Control frames are dispatched inline wherever a reply is awaited: `stop`
 * lets the in-flight ticket finish and exits at the top of the loop, `reload`
 * and `redirect` end the session immediately. Task failures never end the
 * session by accident: each one becomes an error report followed by a reload
 * (the page analogue of restarting the worker).
 */

import { LruCache } from './lru';
import {
  decodeFrame,
  encodeFrame,
  Frame,
  HASH_HEADER,
  Kind,
  parseTicketGrant,
  ProtocolError,
  TicketGrant,
} from './protocol';
import { sha256Hex } from './sha256';
import { errorMessageOf, executeTask, TaskContext, TaskEntry, TaskRegistry, taskError } from './tasks';

export const WORKER_VERSION = '0.1.0';
export const DEFAULT_CACHE_BYTES = 256 * 2 ** 20;
export const DEFAULT_REPLY_TIMEOUT_MS = 60_000;
const OPEN_TIMEOUT_MS = 10_000;
const RECV_SLICE_MS = 1_000; // granularity of stop-flag checks while waiting

export interface WireSocket {
  send(data: string): void;
  close(): void;
}

export interface SocketHooks {
  onOpen(): void;
  onMessage(data: string): void;
  onClose(detail: string): void;
}

export type SocketFactory = (url: string, hooks: SocketHooks) => WireSocket;

/** The slice of fetch() the worker needs; global fetch satisfies it. */
export type FetchLike = (url: string) => Promise<{
  ok: boolean;
  status: number;
  headers: { get(name: string): string | null };
  arrayBuffer(): Promise<ArrayBuffer>;
}>;

export interface WorkerStats {
  processed: number;
  errors: number;
  reconnects: number;
  reloads: number;
  fetchedResources: number;
}

export function freshStats(): WorkerStats {
  return { processed: 0, errors: 0, reconnects: 0, reloads: 0, fetchedResources: 0 };
}

export type SessionExit =
  | { reason: 'stop'; opened: boolean }
  | { reason: 'reload'; opened: boolean }
  | { reason: 'redirect'; url: string; opened: boolean }
  | { reason: 'closed'; detail: string; opened: boolean };

export interface SessionConfig {
  endpoint: string; // ws(s)://host/distributor
  registry: TaskRegistry;
  cache: LruCache;
  stats: WorkerStats;
  makeSocket: SocketFactory;
  fetchFn: FetchLike;
  userAgent?: string;
  workerIdProposal?: string;
  replyTimeoutMs?: number;
  shouldStop?: () => boolean;
  onStats?: (stats: WorkerStats) => void;
  log?: (message: string) => void;
}

// Control-flow signals: how a session ends.
class StopSignal extends Error {}
class ReloadSignal extends Error {}
class RedirectSignal extends Error {
  constructor(readonly url: string) {
    super(url);
  }
}

// Connection-level faults: the shell reconnects with backoff.
class ConnectionLost extends Error {}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Incoming frames, buffered until the session loop asks for the next one. */
class FrameQueue {
  private frames: Frame[] = [];
  private waiter: { resolve: (frame: Frame | null) => void; timer: ReturnType<typeof setTimeout> } | null = null;
  private closedDetail: string | null = null;

  push(frame: Frame): void {
    if (this.waiter) {
      const { resolve, timer } = this.waiter;
      this.waiter = null;
      clearTimeout(timer);
      resolve(frame);
    } else {
      this.frames.push(frame);
    }
  }

  close(detail: string): void {
    if (this.closedDetail === null) this.closedDetail = detail;
    if (this.waiter) {
      const { resolve, timer } = this.waiter;
      this.waiter = null;
      clearTimeout(timer);
      resolve(null);
    }
  }

  /** Next frame, or null after `ms` with nothing buffered; throws once closed. */
  async next(ms: number): Promise<Frame | null> {
    const buffered = this.frames.shift();
    if (buffered !== undefined) return buffered;
    if (this.closedDetail !== null) throw new ConnectionLost(this.closedDetail);
    if (this.waiter) throw new Error('concurrent FrameQueue.next calls');
    const frame = await new Promise<Frame | null>((resolve) => {
      const timer = setTimeout(() => {
        this.waiter = null;
        resolve(null);
      }, ms);
      this.waiter = { resolve, timer };
    });
    if (frame === null && this.closedDetail !== null) throw new ConnectionLost(this.closedDetail);
    return frame;
  }
}

export async function runSession(cfg: SessionConfig): Promise<SessionExit> {
  const session = new Session(cfg);
  return session.run();
}

class Session {
  private readonly cfg: SessionConfig;
  private readonly queue = new FrameQueue();
  private readonly verified = new Set<string>(); // task_ids version-checked this session
  private socket: WireSocket | null = null;
  private opened = false;
  private stopFlag = false;
  private readonly replyTimeoutMs: number;

  constructor(cfg: SessionConfig) {
    this.cfg = cfg;
    this.replyTimeoutMs = cfg.replyTimeoutMs ?? DEFAULT_REPLY_TIMEOUT_MS;
  }

  get httpBase(): string {
    const url = new URL(this.cfg.endpoint);
    const scheme = url.protocol === 'wss:' ? 'https:' : 'http:';
    return `${scheme}//${url.host}`;
  }

  async run(): Promise<SessionExit> {
    try {
      await this.connect();
      this.opened = true;
      await this.loop();
      throw new Error('session loop returned'); // unreachable; loop exits via signals
    } catch (err) {
      if (err instanceof StopSignal) return { reason: 'stop', opened: this.opened };
      if (err instanceof ReloadSignal) return { reason: 'reload', opened: this.opened };
      if (err instanceof RedirectSignal) {
        return { reason: 'redirect', url: err.url, opened: this.opened };
      }
      if (err instanceof ConnectionLost || err instanceof ProtocolError) {
        return { reason: 'closed', detail: err.message, opened: this.opened };
      }
      throw err;
    } finally {
      try {
        this.socket?.close();
      } catch {
        // already closed
      }
    }
  }

  private connect(): Promise<void> {
    return new Promise<void>((resolve, reject) => {
      let settled = false;
      const timer = setTimeout(() => {
        if (!settled) {
          settled = true;
          reject(new ConnectionLost(`connect timeout after ${OPEN_TIMEOUT_MS}ms`));
        }
      }, OPEN_TIMEOUT_MS);
      this.socket = this.cfg.makeSocket(this.cfg.endpoint, {
        onOpen: () => {
          if (!settled) {
            settled = true;
            clearTimeout(timer);
            resolve();
          }
        },
        onMessage: (data) => {
          try {
            this.queue.push(decodeFrame(data));
          } catch (err) {
            // a frame we cannot parse poisons the session, not the worker
            this.queue.close(errorMessageOf(err));
            this.socket?.close();
          }
        },
        onClose: (detail) => {
          this.queue.close(`connection closed (${detail})`);
          if (!settled) {
            settled = true;
            clearTimeout(timer);
            reject(new ConnectionLost(`connection closed before open (${detail})`));
          }
        },
      });
    });
  }

  private stopRequested(): boolean {
    return this.stopFlag || this.cfg.shouldStop?.() === true;
  }

  private send(kind: Kind, body: Record<string, unknown>): void {
    if (!this.socket) throw new ConnectionLost('send on unconnected session');
    try {
      this.socket.send(encodeFrame(kind, body));
    } catch (err) {
      throw new ConnectionLost(`send failed: ${errorMessageOf(err)}`);
    }
  }

  /**
   * Receive until a frame of an expected kind arrives; control frames are
   * dispatched inline. `midTicket` defers a stop until the in-flight ticket
   * is finished.
   */
  private async awaitReply(kinds: Kind[], midTicket: boolean): Promise<Frame> {
    const deadline = Date.now() + this.replyTimeoutMs;
    while (true) {
      if (!midTicket && this.stopRequested()) throw new StopSignal();
      const remaining = deadline - Date.now();
      if (remaining <= 0) {
        throw new ConnectionLost(`no ${kinds.join('|')} reply within ${this.replyTimeoutMs}ms`);
      }
      const frame = await this.queue.next(Math.min(remaining, RECV_SLICE_MS));
      if (frame === null) continue;
      if (frame.kind === 'control') {
        this.onControl(frame.body);
        continue;
      }
      if (kinds.includes(frame.kind)) return frame;
      throw new ProtocolError(`unexpected ${frame.kind}, wanted ${kinds.join('|')}`);
    }
  }

  private onControl(body: Record<string, unknown>): void {
    const command = body.command;
    if (command === 'stop') {
      // finish the in-flight ticket; the loop exits at the next top
      this.stopFlag = true;
    } else if (command === 'reload') {
      throw new ReloadSignal();
    } else if (command === 'redirect') {
      if (typeof body.url !== 'string' || body.url === '') {
        throw new ProtocolError('redirect control without url');
      }
      throw new RedirectSignal(body.url);
    } else {
      this.cfg.log?.(`ignoring unknown control command ${JSON.stringify(command)}`);
    }
  }

  private async loop(): Promise<never> {
    const userAgent = this.cfg.userAgent ?? `ticketgrid-browser-worker/${WORKER_VERSION}`;
    this.send('hello', { worker_id: this.cfg.workerIdProposal, user_agent: userAgent });
    await this.awaitReply(['hello'], false);
    this.verified.clear();
    while (true) {
      if (this.stopRequested()) throw new StopSignal();
      this.send('ticket_request', {});
      const frame = await this.awaitReply(['ticket_grant', 'no_ticket'], false);
      if (frame.kind === 'no_ticket') {
        const retryMs = typeof frame.body.retry_after_ms === 'number' ? frame.body.retry_after_ms : 1000;
        await sleep(retryMs);
        continue;
      }
      await this.runTicket(parseTicketGrant(frame.body));
    }
  }

  private async runTicket(grant: TicketGrant): Promise<void> {
    let entry: TaskEntry;
    try {
      entry = await this.prepareTask(grant.task_id);
      for (const name of entry.resourceDeps) {
        await this.resolveResource(name); // warm the cache before execution
      }
    } catch (err) {
      if (
        err instanceof StopSignal ||
        err instanceof ReloadSignal ||
        err instanceof RedirectSignal ||
        err instanceof ConnectionLost ||
        err instanceof ProtocolError
      ) {
        throw err;
      }
      this.reportError(grant.ticket_id, errorMessageOf(err), '(setup)');
      throw new ReloadSignal(); // error reported; restart from a clean page
    }
    const ctx: TaskContext = {
      attempt: grant.attempt,
      resource: (name) => this.resolveResource(name),
    };
    const outcome = await executeTask(entry.fn, grant.args, ctx);
    if (outcome.ok) {
      this.send('result_submit', { ticket_id: grant.ticket_id, result: outcome.results });
      const ack = await this.awaitReply(['result_ack'], true);
      if (ack.body.ticket_id !== grant.ticket_id) {
        throw new ProtocolError(`ack for ${String(ack.body.ticket_id)}, expected ${grant.ticket_id}`);
      }
      this.cfg.stats.processed += 1;
      this.notifyStats();
    } else {
      this.reportError(grant.ticket_id, outcome.errorMessage, outcome.trace);
      throw new ReloadSignal(); // error reported; restart from a clean page
    }
  }

  private reportError(ticketId: string, message: string, trace: string): void {
    this.cfg.stats.errors += 1;
    this.send('error_submit', { ticket_id: ticketId, message, trace });
    this.notifyStats();
  }

  private notifyStats(): void {
    this.cfg.onStats?.({ ...this.cfg.stats });
  }

  /** Version-check the task against the coordinator once per session. */
  private async prepareTask(taskId: string): Promise<TaskEntry> {
    const entry = this.cfg.registry.get(taskId);
    if (!this.verified.has(taskId)) {
      this.send('task_request', { task_id: taskId });
      const payload = (await this.awaitReply(['task_payload'], true)).body;
      if (payload.found !== true) {
        throw taskError('TaskPreparationError', `coordinator does not know task '${taskId}'`);
      }
      if (entry === undefined) {
        throw taskError('TaskPreparationError', `task '${taskId}' not registered in this worker`);
      }
      if (payload.version !== entry.version) {
        throw taskError(
          'TaskPreparationError',
          `task '${taskId}' version mismatch: coordinator ${String(payload.version)}, local ${entry.version}`,
        );
      }
      this.verified.add(taskId);
      return entry;
    }
    if (entry === undefined) {
      throw taskError('TaskPreparationError', `task '${taskId}' not registered in this worker`);
    }
    return entry;
  }

  // -- resources ------------------------------------------------------------------

  private async resolveResource(name: string): Promise<Uint8Array> {
    const hit = this.cfg.cache.get(name);
    if (hit !== undefined) return hit.data;
    const { data, digest } = await this.fetchResource(name);
    this.cfg.cache.put(name, data, digest);
    this.cfg.stats.fetchedResources += 1;
    return data;
  }

  private async fetchResource(name: string): Promise<{ data: Uint8Array; digest: string }> {
    for (const attempt of [1, 2]) {
      const resp = await this.cfg.fetchFn(`${this.httpBase}/resource/${name}`);
      if (!resp.ok) {
        throw taskError('HttpError', `GET /resource/${name} returned ${resp.status}`);
      }
      const data = new Uint8Array(await resp.arrayBuffer());
      const advertised = resp.headers.get(HASH_HEADER) ?? '';
      const digest = await sha256Hex(data);
      if (digest === advertised) return { data, digest };
      this.cfg.log?.(`resource ${name} hash mismatch on fetch ${attempt}`);
    }
    throw taskError('ResourceIntegrityError', `resource '${name}' hash mismatch after refetch`);
  }
}
