// Minimal static server for the console: serves public/index.html and the
// compiled modules from dist/. Configuration of the console itself happens
// via query parameters; this server holds no state.

import { createServer } from "node:http";
import { readFile } from "node:fs/promises";
import { extname, join, normalize } from "node:path";
import { fileURLToPath } from "node:url";

const here = fileURLToPath(new URL(".", import.meta.url));
const roots = [join(here, "..", "public"), here];

const TYPES: Record<string, string> = {
  ".html": "text/html; charset=utf-8",
  ".js": "text/javascript; charset=utf-8",
  ".css": "text/css; charset=utf-8",
  ".json": "application/json",
};

async function load(path: string): Promise<Buffer | null> {
  for (const root of roots) {
    const full = normalize(join(root, path));
    if (!full.startsWith(root)) continue; // no traversal
    try {
      return await readFile(full);
    } catch {
      continue;
    }
  }
  return null;
}

const port = Number(process.env.CONSOLE_PORT ?? 8080);

createServer(async (request, response) => {
  const url = new URL(request.url ?? "/", `http://${request.headers.host}`);
  const path = url.pathname === "/" ? "index.html" : url.pathname.slice(1);
  const body = await load(path);
  if (body === null) {
    response.writeHead(404);
    response.end("not found");
    return;
  }
  response.writeHead(200, { "Content-Type": TYPES[extname(path)] ?? "application/octet-stream" });
  response.end(body);
}).listen(port, () => {
  console.log(`expert console on http://127.0.0.1:${port}/?service=http://127.0.0.1:8765&run=run-0001`);
});
