import { describe, expect, it } from 'vitest'

import { ApiError, FsmTable, Report, SessionManagerApi } from '../src/api.js'
import { StoredRecord } from '../src/envelope.js'
import { legalVerbs, transitionTarget } from '../src/fsm.js'
import { ConsoleViewModel } from '../src/viewmodel.js'

const FSM: FsmTable = {
  states: ['Initial', 'Halted', 'Configured', 'Running', 'Paused', 'Failed', 'Mixed'],
  verbs: ['initialize', 'configure', 'start', 'pause', 'resume', 'stop', 'halt', 'reset'],
  table: [
    { state: 'Initial', verb: 'initialize', target: 'Halted' },
    { state: 'Initial', verb: 'reset', target: 'Initial' },
    { state: 'Halted', verb: 'configure', target: 'Configured' },
    { state: 'Halted', verb: 'reset', target: 'Initial' },
    { state: 'Configured', verb: 'start', target: 'Running' },
    { state: 'Configured', verb: 'halt', target: 'Halted' },
    { state: 'Configured', verb: 'reset', target: 'Initial' },
    { state: 'Running', verb: 'pause', target: 'Paused' },
    { state: 'Running', verb: 'stop', target: 'Configured' },
    { state: 'Running', verb: 'halt', target: 'Halted' },
    { state: 'Running', verb: 'reset', target: 'Initial' },
    { state: 'Failed', verb: 'reset', target: 'Initial' },
  ],
}

function record(seq: number, severity: StoredRecord['msg']['severity']): StoredRecord {
  return {
    seq,
    received_at: '2026-01-01T00:00:00.000000Z',
    instance_id: 'ims-1',
    msg: {
      source: 'node-0',
      msg_type: 'status',
      severity,
      timestamp: '2026-01-01T00:00:00.000000Z',
      payload: `p${seq}`,
    },
  }
}

/** Offline stub: canned responses, records calls. */
function fakeApi(overrides: Partial<Record<keyof SessionManagerApi, unknown>> = {}) {
  const calls: string[] = []
  const api = {
    calls,
    async listSessions() {
      calls.push('listSessions')
      return []
    },
    async openSession() {
      calls.push('openSession')
      throw new ApiError('ContentionConflict', 'resources held', { ids: ['r1'], holder: 'sess-x' })
    },
    async closeSession() {
      calls.push('closeSession')
    },
    async control() {
      calls.push('control')
      return {} as Report
    },
    async sessionDetail() {
      calls.push('sessionDetail')
      return { tree: null, state: 'Halted', closed: false, last_report: null }
    },
    async fsmTable() {
      return FSM
    },
    async proposals() {
      calls.push('proposals')
      return []
    },
    ...overrides,
  }
  return api as unknown as SessionManagerApi & { calls: string[] }
}

describe('fsm table projection', () => {
  it('derives legal verbs from the server table only', () => {
    expect(legalVerbs(FSM, 'Halted')).toEqual(['configure', 'reset'])
    expect(legalVerbs(FSM, 'Running')).toEqual(['halt', 'pause', 'reset', 'stop'])
    expect(legalVerbs(FSM, 'Mixed')).toEqual([])
    expect(legalVerbs(FSM, 'Failed')).toEqual(['reset'])
  })

  it('resolves transition targets', () => {
    expect(transitionTarget(FSM, 'Configured', 'start')).toBe('Running')
    expect(transitionTarget(FSM, 'Configured', 'pause')).toBeNull()
  })
})

describe('command buttons', () => {
  it('enables exactly the legal verbs for the current aggregate', () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    vm.sessionState = 'Halted'
    expect(vm.enabledVerbs()).toEqual(['configure', 'reset'])
    expect(vm.allVerbs()).toHaveLength(8)
  })

  it('disables everything when the session is closed or none selected', () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    expect(vm.enabledVerbs()).toEqual([])
    vm.sessionState = 'Halted'
    vm.sessionClosed = true
    expect(vm.enabledVerbs()).toEqual([])
  })
})

describe('error surfacing', () => {
  it('shows server error codes in the banner, never swallows them', async () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    await vm.openSession('daq', 'u')
    expect(vm.banner).not.toBeNull()
    expect(vm.banner!.code).toBe('ContentionConflict')
    expect(vm.banner!.details['ids']).toEqual(['r1'])
  })

  it('keeps the partial-failure report for per-node diagnostics', async () => {
    const report: Report = {
      session_id: 's1',
      verb: 'configure',
      state: 'Mixed',
      steps: [],
      elapsed: 0.1,
      failed: ['node-002'],
    }
    const api = fakeApi({
      async control() {
        throw new ApiError('PartialFailure', 'nodes failed', { failed: ['node-002'], report })
      },
    })
    const vm = new ConsoleViewModel(api, FSM)
    vm.selectedId = 's1'
    await vm.command('configure')
    expect(vm.banner!.code).toBe('PartialFailure')
    expect(vm.lastReport).toEqual(report)
    expect(vm.failedLeaves()).toEqual(new Set(['node-002']))
  })
})

describe('live feed', () => {
  it('orders by seq, counts severities, dedupes redelivered seqs', () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    vm.applyFeedRecord(record(1, 'info'))
    vm.applyFeedRecord(record(2, 'error'))
    vm.applyFeedRecord(record(2, 'error')) // duplicate after reconnect
    vm.applyFeedRecord(record(3, 'error'))
    expect(vm.feed.map((r) => r.seq)).toEqual([1, 2, 3])
    expect(vm.severityCounts).toEqual({ info: 1, error: 2 })
  })

  it('filters a copy of the feed by severity floor', () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    vm.applyFeedRecord(record(1, 'debug'))
    vm.applyFeedRecord(record(2, 'warn'))
    vm.applyFeedRecord(record(3, 'fatal'))
    expect(vm.feedAtLeast('warn').map((r) => r.seq)).toEqual([2, 3])
  })

  it('raises and dismisses the gap indicator', () => {
    const vm = new ConsoleViewModel(fakeApi(), FSM)
    expect(vm.gapIndicator).toBe(false)
    vm.markGap()
    expect(vm.gapIndicator).toBe(true)
    vm.dismissGap()
    expect(vm.gapIndicator).toBe(false)
  })
})
