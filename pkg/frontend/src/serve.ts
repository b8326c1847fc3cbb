/** Tiny static server for the console: serves index.html, the compiled
 * modules, and optionally a stack.json pointing at live services.
 *
 *   node dist/serve.js [--port 8080] [--stack path/to/stack.json]
 */

import { createServer } from 'node:http'
import { readFile } from 'node:fs/promises'
import { extname, join, normalize } from 'node:path'
import { fileURLToPath } from 'node:url'

const root = join(fileURLToPath(new URL('.', import.meta.url)), '..')

const MIME: Record<string, string> = {
  '.html': 'text/html; charset=utf-8',
  '.js': 'text/javascript; charset=utf-8',
  '.json': 'application/json',
  '.css': 'text/css',
}

function arg(name: string, fallback: string): string {
  const idx = process.argv.indexOf(name)
  return idx >= 0 && process.argv[idx + 1] ? process.argv[idx + 1] : fallback
}

const port = Number(arg('--port', '8080'))
const stackPath = arg('--stack', '')

const server = createServer(async (req, res) => {
  const url = (req.url ?? '/').split('?')[0]
  try {
    if (url === '/stack.json' && stackPath) {
      res.writeHead(200, { 'Content-Type': 'application/json' })
      res.end(await readFile(stackPath))
      return
    }
    const rel = url === '/' ? '/index.html' : url
    const path = normalize(join(root, rel))
    if (!path.startsWith(root)) throw new Error('traversal')
    const data = await readFile(path)
    res.writeHead(200, { 'Content-Type': MIME[extname(path)] ?? 'application/octet-stream' })
    res.end(data)
  } catch {
    res.writeHead(404)
    res.end('not found')
  }
})

server.listen(port, '127.0.0.1', () => {
  console.log(`console at http://127.0.0.1:${port}/`)
  if (stackPath) console.log(`serving service urls from ${stackPath}`)
})
