/** DOM rendering for the console page. The view model owns all state; this
 * module only projects it into the elements declared in index.html. */

import { TreeNode } from './api.js'
import { ConsoleViewModel } from './viewmodel.js'

const STATE_CLASSES: Record<string, string> = {
  Initial: 'badge',
  Halted: 'badge',
  Configured: 'badge ok',
  Running: 'badge run',
  Paused: 'badge warn',
  Failed: 'badge bad',
  Mixed: 'badge mixed',
}

function el(id: string): HTMLElement {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node
}

function badge(state: string | null): string {
  const label = state ?? '?'
  const cls = STATE_CLASSES[label] ?? 'badge'
  return `<span class="${cls}">${label}</span>`
}

function renderTree(node: TreeNode, failed: Set<string>): string {
  const leaves = node.leaves
    .map((leaf) => {
      const flag = failed.has(leaf.id) ? ' leaf-failed' : ''
      return `<li class="leaf${flag}" data-leaf="${leaf.id}">${leaf.id} ${badge(leaf.state)}</li>`
    })
    .join('')
  const children = node.children.map((child) => renderTree(child, failed)).join('')
  return `<li class="partition" data-partition="${node.partition_id}">
    ${node.partition_id} ${badge(node.state)}
    <ul>${leaves}${children}</ul></li>`
}

export function render(vm: ConsoleViewModel): void {
  const bannerEl = el('banner')
  if (vm.banner) {
    bannerEl.hidden = false
    const ids = vm.banner.details['ids']
    const extra = Array.isArray(ids) && ids.length ? ` [${ids.join(', ')}]` : ''
    bannerEl.textContent = `${vm.banner.code}: ${vm.banner.message}${extra}`
  } else {
    bannerEl.hidden = true
  }

  el('sessions').innerHTML = vm.sessions
    .map((s) => {
      const cls = s.id === vm.selectedId ? 'session selected' : 'session'
      const closed = s.closed ? ' (closed)' : ''
      return `<tr class="${cls}" data-session="${s.id}">
        <td>${s.id}</td><td>${s.partition_id}</td>
        <td>${badge(s.state)}${closed}</td><td>${s.users.join(', ')}</td></tr>`
    })
    .join('')

  el('session-state').innerHTML = vm.sessionState
    ? `${badge(vm.sessionState)}${vm.sessionClosed ? ' closed' : ''}`
    : 'no session selected'

  const enabled = vm.enabledVerbs()
  el('verbs').innerHTML = vm.allVerbs()
    .map((verb: string) => {
      const disabled = enabled.includes(verb) ? '' : ' disabled'
      return `<button class="btn verb" data-verb="${verb}"${disabled}>${verb}</button>`
    })
    .join('')

  el('tree').innerHTML = vm.tree ? `<ul>${renderTree(vm.tree, vm.failedLeaves())}</ul>` : ''

  el('gap').hidden = !vm.gapIndicator
  el('counters').textContent = Object.entries(vm.severityCounts)
    .sort()
    .map(([severity, count]) => `${severity}: ${count}`)
    .join('   ')

  el('feed').innerHTML = vm.feed
    .slice(-200)
    .map(
      (r) => `<tr><td>${r.seq}</td><td>${badgeSeverity(r.msg.severity)}</td>
        <td>${r.msg.source}</td><td>${r.msg.msg_type}</td><td>${escapeHtml(r.msg.payload)}</td></tr>`,
    )
    .join('')

  el('proposals').innerHTML = vm.proposals
    .map(
      (p) => `<li>rule <b>${p.rule_id}</b> suggests ${JSON.stringify(p.action)}
        (evidence: ${p.evidence.length} records)</li>`,
    )
    .join('')
}

function badgeSeverity(severity: string): string {
  const cls = severity === 'error' || severity === 'fatal' ? 'badge bad'
    : severity === 'warn' ? 'badge warn' : 'badge'
  return `<span class="${cls}">${severity}</span>`
}

function escapeHtml(text: string): string {
  return text.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;')
}
