/** Browser bootstrap: locate services, build the view model, wire events.
 *
 * Service URLs come from query parameters (?sm=...&stream=...) or from a
 * registry URL (?registry=...), falling back to /stack.json served next to
 * the page (what `runctl demo-stack --ports-file` writes).
 */

import { SessionManagerApi, registryLookup } from './api.js'
import { FeedClient } from './feed.js'
import { render } from './render.js'
import { ConsoleViewModel } from './viewmodel.js'

type StackInfo = { session_manager: string; stream: string; partitions?: string[] }

async function locateServices(): Promise<StackInfo> {
  const params = new URLSearchParams(window.location.search)
  const sm = params.get('sm')
  const stream = params.get('stream')
  if (sm && stream) return { session_manager: sm, stream }
  const registry = params.get('registry')
  if (registry) {
    const managers = await registryLookup(registry, 'session-manager')
    const ims = await registryLookup(registry, 'ims')
    if (!managers.length || !ims.length) throw new Error('registry has no live services')
    const imsBase = ims[0].url.replace(/\/rcms\/v1\/envelope$/, '')
    return { session_manager: managers[0].url, stream: `${imsBase}/rcms/v1/stream` }
  }
  const response = await fetch('/stack.json')
  if (!response.ok) throw new Error('no service urls: pass ?sm=&stream= or serve /stack.json')
  return (await response.json()) as StackInfo
}

async function boot(): Promise<void> {
  const stack = await locateServices()
  const api = new SessionManagerApi(stack.session_manager)
  const fsm = await api.fsmTable()
  const vm = new ConsoleViewModel(api, fsm, () => render(vm))

  const feed = new FeedClient(
    stack.stream,
    {
      min_severity: (document.getElementById('feed-severity') as HTMLSelectElement).value,
      source_pattern: (document.getElementById('feed-source') as HTMLInputElement).value || '*',
    },
    {
      onRecord: (record) => vm.applyFeedRecord(record),
      onGap: () => vm.markGap(),
    },
  )
  feed.start()

  document.getElementById('open-btn')!.addEventListener('click', () => {
    const partition = (document.getElementById('partition-input') as HTMLInputElement).value
    const user = (document.getElementById('user-input') as HTMLInputElement).value || 'operator'
    if (partition) void vm.openSession(partition, user)
  })
  document.getElementById('close-btn')!.addEventListener('click', () => void vm.closeSelected())
  document.getElementById('refresh-btn')!.addEventListener('click', () => {
    void vm.refreshSessions()
    void vm.refreshProposals()
  })
  document.getElementById('sessions')!.addEventListener('click', (event) => {
    const row = (event.target as HTMLElement).closest('[data-session]')
    if (row) void vm.selectSession(row.getAttribute('data-session')!)
  })
  document.getElementById('verbs')!.addEventListener('click', (event) => {
    const button = (event.target as HTMLElement).closest('[data-verb]')
    if (button && !(button as HTMLButtonElement).disabled) {
      void vm.command(button.getAttribute('data-verb')!)
    }
  })
  document.getElementById('banner')!.addEventListener('click', () => vm.dismissBanner())
  document.getElementById('gap')!.addEventListener('click', () => vm.dismissGap())

  const applyFilters = () => {
    feed.stop()
    vm.feed = []
    vm.severityCounts = {}
    const next = new FeedClient(
      stack.stream,
      {
        min_severity: (document.getElementById('feed-severity') as HTMLSelectElement).value,
        source_pattern: (document.getElementById('feed-source') as HTMLInputElement).value || '*',
      },
      { onRecord: (record) => vm.applyFeedRecord(record), onGap: () => vm.markGap() },
    )
    next.start()
  }
  document.getElementById('feed-severity')!.addEventListener('change', applyFilters)

  await vm.refreshSessions()
  await vm.refreshProposals()
  setInterval(() => void vm.refreshProposals(), 5000)
  render(vm)
}

void boot().catch((err) => {
  const banner = document.getElementById('banner')
  if (banner) {
    banner.hidden = false
    banner.textContent = `console failed to start: ${String(err)}`
  }
})
