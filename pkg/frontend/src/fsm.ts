/** Command legality comes from the server-fetched transition table; the
 * console never hardcodes state-machine rules. */

import { FsmTable } from './api.js'

export function legalVerbs(table: FsmTable, state: string): string[] {
  const verbs = table.table.filter((row) => row.state === state).map((row) => row.verb)
  return [...new Set(verbs)].sort()
}

export function transitionTarget(table: FsmTable, state: string, verb: string): string | null {
  const row = table.table.find((r) => r.state === state && r.verb === verb)
  return row ? row.target : null
}
