/** End-to-end console flow against the real services (demo stack spawned as
 * a child process): session lifecycle, state tree, fault highlighting, feed
 * filtering and reconnect behavior. */

import { afterAll, beforeAll, describe, expect, it } from 'vitest'
import { spawn, ChildProcess } from 'node:child_process'
import { mkdtempSync, existsSync, readFileSync, rmSync } from 'node:fs'
import { tmpdir } from 'node:os'
import { join } from 'node:path'

import { SessionManagerApi, publishLogMessage, sendEnvelope } from '../src/api.js'
import { StoredRecord, makeEnvelope, nowTimestamp } from '../src/envelope.js'
import { FeedClient } from '../src/feed.js'
import { ConsoleViewModel } from '../src/viewmodel.js'

type Stack = {
  session_manager: string
  ims: string
  stream: string
  partitions: string[]
  nodes: Record<string, string>
}

let proc: ChildProcess
let stack: Stack
let workdir: string

async function waitFor(pred: () => boolean | Promise<boolean>, timeoutMs = 15000): Promise<void> {
  const deadline = Date.now() + timeoutMs
  while (Date.now() < deadline) {
    if (await pred()) return
    await new Promise((resolve) => setTimeout(resolve, 50))
  }
  throw new Error('condition not met in time')
}

function setFailMode(nodeUrl: string, mode: string) {
  return sendEnvelope(nodeUrl, makeEnvelope('command', 'e2e', 'node', {
    verb: 'set_fail_mode',
    parameters: { mode },
  }))
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), 'console-e2e-'))
  const portsFile = join(workdir, 'stack.json')
  proc = spawn('python3', ['-m', 'runctl.cli', 'demo-stack', '--nodes', '4',
                           '--ports-file', portsFile],
               { stdio: ['ignore', 'pipe', 'pipe'] })
  await waitFor(() => existsSync(portsFile), 30000)
  stack = JSON.parse(readFileSync(portsFile, 'utf-8')) as Stack
}, 60000)

afterAll(async () => {
  proc?.kill('SIGTERM')
  await new Promise((resolve) => {
    proc?.on('exit', resolve)
    setTimeout(resolve, 5000)
  })
  rmSync(workdir, { recursive: true, force: true })
})

describe('console end to end', () => {
  it('drives a 4-node partition tree to Running, renders faults, filters the feed', async () => {
    const api = new SessionManagerApi(stack.session_manager)
    const fsm = await api.fsmTable()
    expect(fsm.table.length).toBeGreaterThan(10)

    const vm = new ConsoleViewModel(api, fsm)
    await vm.refreshSessions()
    expect(vm.sessions).toEqual([])

    // open on the free 4-node partition: appears with state Initial
    await vm.openSession('daq', 'e2e-user')
    expect(vm.banner).toBeNull()
    expect(vm.sessions).toHaveLength(1)
    expect(vm.sessionState).toBe('Initial')
    const sessionId = vm.selectedId!

    // a second tab sees the same session list after refresh
    const vm2 = new ConsoleViewModel(api, fsm)
    await vm2.refreshSessions()
    expect(vm2.sessions.map((s) => s.id)).toEqual([sessionId])

    // opening a contended partition surfaces the resource ids in the banner
    await vm2.openSession('daq-left', 'rival')
    expect(vm2.banner).not.toBeNull()
    expect(vm2.banner!.code).toBe('ContentionConflict')
    expect(vm2.banner!.details['ids']).toEqual(['node-000', 'node-001'])

    // verbs come from the table projection: Initial allows initialize/reset
    expect(vm.enabledVerbs()).toEqual(['initialize', 'reset'])

    // initialize -> configure -> start turns the whole tree Running
    await vm.command('initialize')
    expect(vm.sessionState).toBe('Halted')
    await vm.command('configure')
    expect(vm.sessionState).toBe('Configured')
    await vm.command('start')
    expect(vm.banner).toBeNull()
    expect(vm.sessionState).toBe('Running')
    expect(vm.tree!.state).toBe('Running')
    const leafStates = [
      ...vm.tree!.children.flatMap((c) => c.leaves.map((l) => l.state)),
      ...vm.tree!.leaves.map((l) => l.state),
    ]
    expect(leafStates).toEqual(['Running', 'Running', 'Running', 'Running'])

    // live feed with severity filter: exactly the errors from a scripted burst
    const records: StoredRecord[] = []
    let gaps = 0
    const feed = new FeedClient(stack.stream, { min_severity: 'error' }, {
      onRecord: (r) => {
        records.push(r)
        vm.applyFeedRecord(r)
      },
      onGap: () => {
        gaps += 1
        vm.markGap()
      },
    })
    vm.feed = []
    feed.start()
    await new Promise((resolve) => setTimeout(resolve, 300)) // stream attach

    const burstSeqs: number[] = []
    for (let i = 0; i < 10; i++) {
      const severity = i % 3 === 0 ? 'error' : 'info'
      const seq = await publishLogMessage(stack.ims, {
        source: 'burst-script',
        msg_type: 'burst',
        severity,
        timestamp: nowTimestamp(),
        payload: `burst-${i}`,
      })
      if (severity === 'error') burstSeqs.push(seq)
    }
    await waitFor(() => records.filter((r) => r.msg.msg_type === 'burst').length >= 4)
    const burstRows = vm.feed.filter((r) => r.msg.msg_type === 'burst')
    expect(burstRows.map((r) => r.seq)).toEqual(burstSeqs)
    expect(burstRows.every((r) => r.msg.severity === 'error')).toBe(true)

    // stream drop: gap indicator appears, redelivered seqs are not duplicated
    feed.dropForTesting()
    await waitFor(() => gaps >= 1, 20000)
    expect(vm.gapIndicator).toBe(true)
    const countBefore = vm.feed.length
    const extraSeq = await publishLogMessage(stack.ims, {
      source: 'burst-script',
      msg_type: 'burst',
      severity: 'error',
      timestamp: nowTimestamp(),
      payload: 'after-reconnect',
    })
    await waitFor(() => vm.feed.some((r) => r.seq === extraSeq))
    expect(vm.feed.length).toBe(countBefore + 1)
    expect(new Set(vm.feed.map((r) => r.seq)).size).toBe(vm.feed.length)
    feed.stop()

    // injected leaf fault: aggregate renders Mixed, faulty leaf highlighted
    await setFailMode(stack.nodes['node-001'], 'error')
    await vm.command('pause')
    expect(vm.banner).not.toBeNull()
    expect(vm.banner!.code).toBe('PartialFailure')
    expect(vm.sessionState).toBe('Mixed')
    expect(vm.tree!.state).toBe('Mixed')
    expect(vm.failedLeaves()).toEqual(new Set(['node-001']))
    expect(vm.enabledVerbs()).toEqual([]) // no uniform verb is legal from Mixed
    await setFailMode(stack.nodes['node-001'], 'none')

    // close from the panel: session marked closed, controls disabled
    await vm.closeSelected()
    expect(vm.sessionClosed).toBe(true)
    expect(vm.enabledVerbs()).toEqual([])
    await vm2.refreshSessions()
    expect(vm2.sessions[0].closed).toBe(true)
  })
})
