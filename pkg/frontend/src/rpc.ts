/**
 * Line-delimited JSON RPC over the stdio of a spawned native server.
 *
 * The server answers strictly in request order, so a FIFO of pending
 * promises is all the correlation we need.
 */

import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import { createInterface } from "node:readline";

interface Pending {
  resolve: (value: Record<string, unknown>) => void;
  reject: (err: Error) => void;
}

export interface ServerOptions {
  /** Interpreter that runs the server (default "python3"). */
  command?: string;
  /** Arguments producing the server process. */
  args?: string[];
}

const DEFAULT_ARGS = ["-m", "macronav.cli", "env-server"];

export class EnvServerClient {
  private proc: ChildProcessWithoutNullStreams;
  private pending: Pending[] = [];
  private stderrTail = "";
  private exited = false;
  closed = false;

  constructor(options: ServerOptions = {}) {
    this.proc = spawn(options.command ?? "python3", options.args ?? DEFAULT_ARGS, {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const lines = createInterface({ input: this.proc.stdout });
    lines.on("line", (line) => {
      const next = this.pending.shift();
      if (!next) return;
      try {
        next.resolve(JSON.parse(line) as Record<string, unknown>);
      } catch (err) {
        next.reject(err as Error);
      }
    });
    this.proc.stderr.on("data", (chunk: Buffer) => {
      this.stderrTail = (this.stderrTail + chunk.toString()).slice(-4000);
    });
    this.proc.on("exit", () => {
      this.exited = true;
      const abandoned = this.pending.splice(0);
      for (const p of abandoned) {
        p.reject(new Error(`server exited early: ${this.stderrTail.trim()}`));
      }
    });
  }

  /**
   * Send one request and await its reply. Replies with ok=false become
   * rejections carrying the native error text.
   */
  request(op: string, body: Record<string, unknown> = {}): Promise<Record<string, unknown>> {
    if (this.closed) {
      return Promise.reject(new Error("client is closed"));
    }
    if (this.exited) {
      return Promise.reject(new Error(`server exited early: ${this.stderrTail.trim()}`));
    }
    return new Promise((resolve, reject) => {
      this.pending.push({
        resolve: (reply) => {
          if (reply.ok === true) {
            resolve(reply);
          } else {
            reject(new Error(String(reply.error ?? "unknown server error")));
          }
        },
        reject,
      });
      this.proc.stdin.write(JSON.stringify({ op, ...body }) + "\n");
    });
  }

  /** Ask the server to shut down and reap the process. */
  async close(): Promise<void> {
    if (this.closed) return;
    try {
      await this.request("close");
    } finally {
      this.closed = true;
      this.proc.stdin.end();
      if (!this.exited) {
        await new Promise<void>((resolve) => {
          const timer = setTimeout(() => {
            this.proc.kill();
            resolve();
          }, 2000);
          this.proc.once("exit", () => {
            clearTimeout(timer);
            resolve();
          });
        });
      }
    }
  }
}
