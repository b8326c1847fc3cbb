/** Console state and the transitions the panels drive. No business logic
 * lives here: enabled controls derive from server-reported state plus the
 * server-fetched transition table, and every action is an envelope exchange.
 */

import {
  ApiError,
  FsmTable,
  Proposal,
  Report,
  SessionManagerApi,
  SessionSummary,
  TreeNode,
} from './api.js'
import { StoredRecord, severityRank } from './envelope.js'
import { legalVerbs } from './fsm.js'

export type Banner = { code: string; message: string; details: Record<string, unknown> } | null

const FEED_CAP = 500

export class ConsoleViewModel {
  sessions: SessionSummary[] = []
  selectedId: string | null = null
  tree: TreeNode | null = null
  sessionState: string | null = null
  sessionClosed = false
  lastReport: Report | null = null
  banner: Banner = null
  proposals: Proposal[] = []

  feed: StoredRecord[] = []
  severityCounts: Record<string, number> = {}
  gapIndicator = false
  private lastSeq = 0

  busy = false

  constructor(
    private api: SessionManagerApi,
    private fsm: FsmTable,
    private changed: () => void = () => {},
  ) {}

  private fail(err: unknown): void {
    if (err instanceof ApiError) {
      this.banner = { code: err.code, message: err.message, details: err.details }
    } else {
      this.banner = { code: 'InternalError', message: String(err), details: {} }
    }
    this.changed()
  }

  dismissBanner(): void {
    this.banner = null
    this.changed()
  }

  // session panel ----------------------------------------------------------

  async refreshSessions(): Promise<void> {
    try {
      this.sessions = await this.api.listSessions()
      this.changed()
    } catch (err) {
      this.fail(err)
    }
  }

  async openSession(partitionId: string, user: string): Promise<void> {
    this.busy = true
    try {
      const session = await this.api.openSession(partitionId, user)
      await this.refreshSessions()
      await this.selectSession(session.id)
    } catch (err) {
      this.fail(err)
    } finally {
      this.busy = false
      this.changed()
    }
  }

  async selectSession(sessionId: string): Promise<void> {
    this.selectedId = sessionId
    await this.refreshDetail()
  }

  async refreshDetail(): Promise<void> {
    if (!this.selectedId) return
    try {
      const detail = await this.api.sessionDetail(this.selectedId)
      this.tree = detail.tree
      this.sessionState = detail.state
      this.sessionClosed = detail.closed
      this.lastReport = detail.last_report ?? this.lastReport
      this.changed()
    } catch (err) {
      this.fail(err)
    }
  }

  async closeSelected(): Promise<void> {
    if (!this.selectedId) return
    this.busy = true
    try {
      await this.api.closeSession(this.selectedId)
      await this.refreshSessions()
      await this.refreshDetail()
    } catch (err) {
      this.fail(err)
    } finally {
      this.busy = false
      this.changed()
    }
  }

  // command buttons ---------------------------------------------------------

  /** Exactly the verbs legal from the current aggregate state. Mixed and
   * Failed have no rows in the table except reset-from-Failed, so the
   * projection handles them with no special cases here. */
  enabledVerbs(): string[] {
    if (!this.sessionState || this.sessionClosed || this.busy) return []
    return legalVerbs(this.fsm, this.sessionState)
  }

  allVerbs(): string[] {
    return this.fsm.verbs
  }

  async command(verb: string): Promise<void> {
    if (!this.selectedId) return
    this.busy = true
    try {
      this.lastReport = await this.api.control(this.selectedId, verb)
      this.banner = null
    } catch (err) {
      if (err instanceof ApiError && err.details && err.details['report']) {
        // partial failure still carries the full per-node report
        this.lastReport = err.details['report'] as Report
      }
      this.fail(err)
    } finally {
      this.busy = false
      await this.refreshDetail()
      this.changed()
    }
  }

  /** Leaves whose last command failed (for highlighting in the tree). */
  failedLeaves(): Set<string> {
    return new Set(this.lastReport?.failed ?? [])
  }

  // live feed -----------------------------------------------------------------

  applyFeedRecord(record: StoredRecord): void {
    if (record.seq <= this.lastSeq) return // duplicates after reconnect
    this.lastSeq = record.seq
    this.feed.push(record)
    if (this.feed.length > FEED_CAP) this.feed.shift()
    const label = record.msg.severity
    this.severityCounts[label] = (this.severityCounts[label] ?? 0) + 1
    this.changed()
  }

  markGap(): void {
    this.gapIndicator = true
    this.changed()
  }

  dismissGap(): void {
    this.gapIndicator = false
    this.changed()
  }

  feedAtLeast(minSeverity: string): StoredRecord[] {
    const rank = severityRank(minSeverity)
    return this.feed.filter((r) => severityRank(r.msg.severity) >= rank)
  }

  // proposals ------------------------------------------------------------------

  async refreshProposals(): Promise<void> {
    try {
      this.proposals = await this.api.proposals()
      this.changed()
    } catch (err) {
      this.fail(err)
    }
  }
}
