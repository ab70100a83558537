/**
 * Wire protocol speaking to the coordinator's /distributor WebSocket.
 *
 * Every frame is one UTF-8 JSON text message of the shape
 *
 *     {"kind": "<kind>", "protocol_version": 1, "body": {...}}
 *
 * encoded canonically (sorted keys, compact, unset optionals omitted).
 * Decoding ignores unknown body fields but rejects unknown kinds and foreign
 * protocol versions. Field names inside bodies are the protocol's snake_case
 * names, kept verbatim.
 */

import { canonicalJson } from './canonical';

export const PROTOCOL_VERSION = 1;
export const WS_PATH = '/distributor';
export const HASH_HEADER = 'X-Content-Hash';

export type Kind =
  | 'hello'
  | 'ticket_request'
  | 'ticket_grant'
  | 'no_ticket'
  | 'task_request'
  | 'task_payload'
  | 'result_submit'
  | 'result_ack'
  | 'error_submit'
  | 'control';

const KINDS: ReadonlySet<string> = new Set<Kind>([
  'hello',
  'ticket_request',
  'ticket_grant',
  'no_ticket',
  'task_request',
  'task_payload',
  'result_submit',
  'result_ack',
  'error_submit',
  'control',
]);

export interface Frame {
  kind: Kind;
  body: Record<string, unknown>;
}

export interface TicketGrant {
  ticket_id: string;
  project_id: string;
  task_id: string;
  input_index: number;
  args: unknown[];
  attempt: number;
}

export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ProtocolError';
  }
}

/** Serialize one frame; body fields set to null/undefined are omitted. */
export function encodeFrame(kind: Kind, body: Record<string, unknown>): string {
  const cleaned: Record<string, unknown> = {};
  for (const [key, value] of Object.entries(body)) {
    if (value !== null && value !== undefined) cleaned[key] = value;
  }
  return canonicalJson({ kind, protocol_version: PROTOCOL_VERSION, body: cleaned });
}

/** Parse and validate one frame; throws ProtocolError on anything foreign. */
export function decodeFrame(data: string): Frame {
  let payload: unknown;
  try {
    payload = JSON.parse(data);
  } catch (err) {
    throw new ProtocolError(`malformed JSON: ${(err as Error).message}`);
  }
  if (typeof payload !== 'object' || payload === null || Array.isArray(payload)) {
    throw new ProtocolError('message must be a JSON object');
  }
  const record = payload as Record<string, unknown>;
  const kind = record.kind;
  if (typeof kind !== 'string') throw new ProtocolError('missing message kind');
  if (!KINDS.has(kind)) throw new ProtocolError(`unknown message kind: '${kind}'`);
  const version = record.protocol_version;
  if (version === undefined || version === null) {
    throw new ProtocolError('missing protocol_version');
  }
  if (version !== PROTOCOL_VERSION) {
    throw new ProtocolError(
      `protocol version mismatch: got ${JSON.stringify(version)}, want ${PROTOCOL_VERSION}`,
    );
  }
  const body = record.body ?? {};
  if (typeof body !== 'object' || body === null || Array.isArray(body)) {
    throw new ProtocolError('body must be a JSON object');
  }
  return { kind: kind as Kind, body: body as Record<string, unknown> };
}

/** Validate a ticket_grant body; throws ProtocolError when fields are missing. */
export function parseTicketGrant(body: Record<string, unknown>): TicketGrant {
  const ticketId = body.ticket_id;
  const projectId = body.project_id;
  const taskId = body.task_id;
  const inputIndex = body.input_index;
  const args = body.args;
  if (
    typeof ticketId !== 'string' ||
    typeof projectId !== 'string' ||
    typeof taskId !== 'string' ||
    typeof inputIndex !== 'number' ||
    !Array.isArray(args)
  ) {
    throw new ProtocolError('ticket_grant: missing required field');
  }
  const attempt = typeof body.attempt === 'number' ? body.attempt : 1;
  return {
    ticket_id: ticketId,
    project_id: projectId,
    task_id: taskId,
    input_index: inputIndex,
    args,
    attempt,
  };
}
