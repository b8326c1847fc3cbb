/** Canonical envelope handling on the browser side. Field order matches the
 * services' canonical form so encoded bytes are interchangeable. */

export type Kind =
  | 'command'
  | 'ack'
  | 'publish'
  | 'subscribe'
  | 'unsubscribe'
  | 'query'
  | 'result'
  | 'event'
  | 'register'
  | 'lookup'
  | 'error'

export type Envelope = {
  id: string
  kind: Kind
  correlation_id?: string
  session_id?: string
  source: string
  target: string
  issued_at: string
  body: Record<string, unknown>
}

export const SEVERITIES = ['debug', 'info', 'warn', 'error', 'fatal'] as const
export type SeverityLabel = (typeof SEVERITIES)[number]

export function severityRank(label: string): number {
  const idx = SEVERITIES.indexOf(label as SeverityLabel)
  return idx < 0 ? 0 : idx
}

function uuid(): string {
  if (typeof crypto !== 'undefined' && crypto.randomUUID) return crypto.randomUUID()
  return 'xxxxxxxx-xxxx-4xxx-8xxx-xxxxxxxxxxxx'.replace(/x/g, () =>
    Math.floor(Math.random() * 16).toString(16),
  )
}

/** RFC 3339 UTC with microsecond precision (JS clocks give milliseconds). */
export function nowTimestamp(): string {
  return new Date().toISOString().replace('Z', '000Z')
}

export function makeEnvelope(
  kind: Kind,
  source: string,
  target: string,
  body: Record<string, unknown>,
): Envelope {
  return { id: uuid(), kind, source, target, issued_at: nowTimestamp(), body }
}

/** Serialize with the canonical top-level key order. */
export function encodeEnvelope(env: Envelope): string {
  const ordered: Record<string, unknown> = { id: env.id, kind: env.kind }
  if (env.correlation_id !== undefined) ordered['correlation_id'] = env.correlation_id
  if (env.session_id !== undefined) ordered['session_id'] = env.session_id
  ordered['source'] = env.source
  ordered['target'] = env.target
  ordered['issued_at'] = env.issued_at
  ordered['body'] = env.body
  return JSON.stringify(ordered)
}

export function decodeEnvelope(text: string): Envelope {
  const obj = JSON.parse(text) as Record<string, unknown>
  for (const field of ['id', 'kind', 'source', 'target', 'issued_at', 'body']) {
    if (!(field in obj)) throw new Error(`envelope missing field '${field}'`)
  }
  return obj as unknown as Envelope
}

/** A stored monitor record as delivered by the stream and query results. */
export type StoredRecord = {
  seq: number
  received_at: string
  instance_id: string
  msg: {
    source: string
    msg_type: string
    severity: SeverityLabel
    timestamp: string
    payload: string
  }
}
