/** HTTP access to the documented endpoints: envelope exchanges with the
 * session manager / monitor service, and registry lookups. */

import { Envelope, Kind, StoredRecord, decodeEnvelope, encodeEnvelope, makeEnvelope } from './envelope.js'

export class ApiError extends Error {
  code: string
  details: Record<string, unknown>

  constructor(code: string, message: string, details: Record<string, unknown> = {}) {
    super(message || code)
    this.code = code
    this.details = details
  }
}

export async function sendEnvelope(url: string, env: Envelope): Promise<Envelope> {
  let response: Response
  try {
    response = await fetch(url, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: encodeEnvelope(env),
    })
  } catch (err) {
    throw new ApiError('TransportError', `request to ${url} failed: ${String(err)}`)
  }
  const text = await response.text()
  let reply: Envelope
  try {
    reply = decodeEnvelope(text)
  } catch {
    throw new ApiError('ProtocolError', `response is not an envelope (HTTP ${response.status})`)
  }
  if (reply.correlation_id !== env.id) {
    throw new ApiError('ProtocolError', 'response correlation does not match the request')
  }
  if (reply.kind === 'error') {
    const body = reply.body as { code?: string; message?: string; details?: Record<string, unknown> }
    throw new ApiError(body.code ?? 'InternalError', body.message ?? '', body.details ?? {})
  }
  return reply
}

export type ServiceRecord = { name: string; instance_id: string; url: string }

export async function registryLookup(registryUrl: string, name: string): Promise<ServiceRecord[]> {
  const reply = await sendEnvelope(registryUrl, makeEnvelope('lookup', 'console', 'registry', { name }))
  return (reply.body as { instances: ServiceRecord[] }).instances
}

export type SessionSummary = {
  id: string
  partition_id: string
  state: string
  users: string[]
  created_at: string
  closed: boolean
}

export type TreeNode = {
  partition_id: string
  state: string
  leaves: { id: string; state: string | null }[]
  children: TreeNode[]
}

export type OutcomeBody = { state?: string; error?: { code: string; message: string } }

export type Report = {
  session_id: string
  verb: string
  state: string
  steps: { verb: string; selector: string; outcomes: Record<string, OutcomeBody>; elapsed: number }[]
  elapsed: number
  failed: string[]
}

export type SessionDetail = {
  tree: TreeNode
  state: string
  closed: boolean
  last_report: Report | null
}

export type FsmTable = {
  states: string[]
  verbs: string[]
  table: { state: string; verb: string; target: string }[]
}

export type Proposal = {
  rule_id: string
  fired_at: string
  evidence: number[]
  action: Record<string, unknown>
}

/** Typed client for the session manager's envelope surface. */
export class SessionManagerApi {
  constructor(private url: string) {}

  private command(verb: string, params: Record<string, string>): Promise<Envelope> {
    return sendEnvelope(this.url, makeEnvelope('command', 'console', 'session-manager', {
      verb,
      parameters: params,
    }))
  }

  private query(body: Record<string, unknown>): Promise<Envelope> {
    return sendEnvelope(this.url, makeEnvelope('query', 'console', 'session-manager', body))
  }

  async openSession(partitionId: string, user: string): Promise<SessionSummary> {
    const reply = await this.command('open_session', { partition_id: partitionId, user })
    return (reply.body as { session: SessionSummary }).session
  }

  async closeSession(sessionId: string): Promise<void> {
    await this.command('close_session', { session_id: sessionId })
  }

  /** Throws ApiError with the report in `details.report` on partial failure. */
  async control(sessionId: string, verb: string): Promise<Report> {
    const reply = await this.command('control', { session_id: sessionId, control_verb: verb })
    return (reply.body as { report: Report }).report
  }

  async listSessions(): Promise<SessionSummary[]> {
    const reply = await this.query({ subject: 'sessions' })
    return (reply.body as { sessions: SessionSummary[] }).sessions
  }

  async sessionDetail(sessionId: string): Promise<SessionDetail> {
    const reply = await this.query({ subject: 'session', id: sessionId })
    return reply.body as SessionDetail
  }

  async fsmTable(): Promise<FsmTable> {
    const reply = await this.query({ subject: 'fsm' })
    return reply.body as FsmTable
  }

  async proposals(): Promise<Proposal[]> {
    const reply = await this.query({ subject: 'proposals' })
    return (reply.body as { proposals: Proposal[] }).proposals
  }
}

/** Publish one monitor record (used by harness scripts, not the console UI). */
export async function publishLogMessage(
  imsUrl: string,
  msg: { source: string; msg_type: string; severity: string; timestamp: string; payload: string },
): Promise<number> {
  const reply = await sendEnvelope(imsUrl, makeEnvelope('publish', 'console-harness', 'ims', msg))
  return (reply.body as { seq: number }).seq
}

export function queryMessages(
  imsUrl: string,
  criteria: Record<string, unknown>,
): Promise<Envelope> {
  return sendEnvelope(imsUrl, makeEnvelope('query', 'console', 'ims', { subject: 'messages', criteria }))
}

/** StoredRecord list from an ims messages query. */
export async function listMessages(
  imsUrl: string,
  criteria: Record<string, unknown>,
): Promise<StoredRecord[]> {
  const reply = await queryMessages(imsUrl, criteria)
  return (reply.body as { messages: StoredRecord[] }).messages
}
