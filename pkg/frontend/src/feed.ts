/** Live feed client: follows the monitor service's server-sent-events
 * endpoint with filter criteria, reconnecting with backoff on stream drops.
 * Implemented over fetch streaming so the same code runs in browsers and in
 * the node test runner. */

import { StoredRecord, decodeEnvelope } from './envelope.js'

export type FeedFilters = {
  min_severity?: string
  source_pattern?: string
  msg_types?: string
}

export type FeedHandlers = {
  onRecord: (record: StoredRecord) => void
  /** the stream dropped; records may have been missed until reconnect */
  onGap?: () => void
  onStatus?: (status: 'connected' | 'reconnecting' | 'stopped') => void
}

const INITIAL_BACKOFF_MS = 500
const MAX_BACKOFF_MS = 5000

export class FeedClient {
  private controller: AbortController | null = null
  private stopped = false
  private backoffMs = INITIAL_BACKOFF_MS
  private everConnected = false

  constructor(
    private streamUrl: string,
    private filters: FeedFilters,
    private handlers: FeedHandlers,
  ) {}

  private url(): string {
    const params = new URLSearchParams()
    for (const [key, value] of Object.entries(this.filters)) {
      if (value !== undefined && value !== '') params.set(key, value)
    }
    const qs = params.toString()
    return qs ? `${this.streamUrl}?${qs}` : this.streamUrl
  }

  start(): void {
    this.stopped = false
    void this.loop()
  }

  stop(): void {
    this.stopped = true
    this.controller?.abort()
    this.handlers.onStatus?.('stopped')
  }

  /** Abort the current connection without stopping; the client reconnects.
   * Exists so drop/reconnect behavior is testable end to end. */
  dropForTesting(): void {
    this.controller?.abort()
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      this.controller = new AbortController()
      try {
        const response = await fetch(this.url(), { signal: this.controller.signal })
        if (!response.ok || !response.body) throw new Error(`HTTP ${response.status}`)
        this.handlers.onStatus?.('connected')
        if (this.everConnected) this.handlers.onGap?.()
        this.everConnected = true
        this.backoffMs = INITIAL_BACKOFF_MS
        await this.consume(response.body)
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) return
      this.handlers.onStatus?.('reconnecting')
      await new Promise((resolve) => setTimeout(resolve, this.backoffMs))
      this.backoffMs = Math.min(this.backoffMs * 2, MAX_BACKOFF_MS)
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader()
    const decoder = new TextDecoder()
    let buffer = ''
    for (;;) {
      const { done, value } = await reader.read()
      if (done) return
      buffer += decoder.decode(value, { stream: true })
      let idx: number
      while ((idx = buffer.indexOf('\n\n')) >= 0) {
        const block = buffer.slice(0, idx)
        buffer = buffer.slice(idx + 2)
        for (const line of block.split('\n')) {
          if (!line.startsWith('data: ')) continue // comments are keep-alives
          try {
            const env = decodeEnvelope(line.slice('data: '.length))
            this.handlers.onRecord(env.body as unknown as StoredRecord)
          } catch {
            // a malformed event must not kill the stream
          }
        }
      }
    }
  }
}
