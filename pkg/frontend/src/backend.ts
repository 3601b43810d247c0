/**
 * Minimal backend handle: connect to a broker or gateway, submit one
 * source circuit at a time, get counts back. No transpilation happens
 * on this side; the server compiles.
 */

import * as net from "node:net";
import { randomBytes } from "node:crypto";

import {
  DEFAULT_PORT,
  FrameError,
  MsgType,
  NULL_JOB_ID,
  StreamDecoder,
  encodeEnvelope,
  jobspecDoc,
} from "./protocol.js";
import type { Envelope, Json, SubmitOptions } from "./protocol.js";

export class SdkError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** TCP-level failure: refused, reset, or closed mid-request. */
export class ConnectionError extends SdkError {}

/** The server did not answer within the configured deadline. */
export class TimeoutError extends SdkError {}

/** The server answered with an ERROR envelope. */
export class BrokerError extends SdkError {
  readonly code: string;
  readonly stage: string | null;

  constructor(code: string, message: string, stage: string | null) {
    super(message);
    this.code = code;
    this.stage = stage;
  }
}

export interface BackendConfig {
  host?: string;
  port?: number;
  /** Per-request deadline in milliseconds. */
  timeoutMs?: number;
}

export interface RunResult {
  counts: Record<string, number>;
  shots: number;
  engine: string;
  estimatedWallTime: number;
  effectivePeriod: number;
  memory: string[] | null;
  timings: Record<string, number>;
  warnings: string[];
  jobIdHex: string;
  /** The RESULT payload exactly as received. */
  raw: { [key: string]: Json };
}

interface Pending {
  resolve: (env: Envelope) => void;
  reject: (err: Error) => void;
  timer: NodeJS.Timeout;
}

export class Backend {
  readonly host: string;
  readonly port: number;
  readonly timeoutMs: number;

  private socket: net.Socket | null = null;
  private decoder = new StreamDecoder();
  private pending: Pending | null = null;

  constructor(config: BackendConfig = {}) {
    this.host = config.host ?? "127.0.0.1";
    this.port = config.port ?? DEFAULT_PORT;
    this.timeoutMs = config.timeoutMs ?? 130_000;
  }

  async connect(): Promise<void> {
    if (this.socket) return;
    const socket = new net.Socket();
    socket.setNoDelay(true);
    await new Promise<void>((resolve, reject) => {
      const onError = (err: Error) => {
        socket.destroy();
        reject(
          new ConnectionError(
            `cannot connect to ${this.host}:${this.port}: ${err.message}`
          )
        );
      };
      socket.once("error", onError);
      socket.connect(this.port, this.host, () => {
        socket.removeListener("error", onError);
        resolve();
      });
    });
    socket.on("data", (chunk) => this.onData(chunk));
    socket.on("error", (err) =>
      this.failPending(new ConnectionError(`connection error: ${err.message}`))
    );
    socket.on("close", () =>
      this.failPending(new ConnectionError("connection closed by peer"))
    );
    this.socket = socket;
  }

  close(): void {
    if (this.socket) {
      this.socket.removeAllListeners("close");
      this.socket.destroy();
      this.socket = null;
    }
  }

  private onData(chunk: Buffer): void {
    let envs: Envelope[];
    try {
      envs = this.decoder.push(chunk);
    } catch (err) {
      this.failPending(
        err instanceof FrameError
          ? err
          : new ConnectionError(`undecodable reply: ${err}`)
      );
      this.close();
      return;
    }
    for (const env of envs) {
      const p = this.pending;
      if (p) {
        this.pending = null;
        clearTimeout(p.timer);
        p.resolve(env);
      }
    }
  }

  private failPending(err: Error): void {
    const p = this.pending;
    if (p) {
      this.pending = null;
      clearTimeout(p.timer);
      p.reject(err);
    }
  }

  /** One frame out, one frame back. A handle carries one request at a time. */
  async request(env: Envelope): Promise<Envelope> {
    await this.connect();
    if (this.pending) {
      throw new SdkError("one request in flight per handle");
    }
    const frame = encodeEnvelope(env);
    return new Promise<Envelope>((resolve, reject) => {
      const timer = setTimeout(() => {
        this.pending = null;
        this.close();
        reject(new TimeoutError(`no reply within ${this.timeoutMs}ms`));
      }, this.timeoutMs);
      this.pending = { resolve, reject, timer };
      this.socket!.write(frame);
    });
  }

  async ping(): Promise<number> {
    const t0 = Date.now();
    const reply = await this.request({
      msgType: MsgType.PING,
      jobId: NULL_JOB_ID,
      payload: null,
    });
    if (reply.msgType !== MsgType.PONG) {
      throw new ConnectionError(`expected PONG, got type ${reply.msgType}`);
    }
    return Date.now() - t0;
  }

  async status(): Promise<{ [key: string]: Json }> {
    const reply = await this.request({
      msgType: MsgType.STATUS_REQ,
      jobId: NULL_JOB_ID,
      payload: null,
    });
    this.raiseIfError(reply);
    if (reply.msgType !== MsgType.STATUS_REP || reply.payload === null) {
      throw new ConnectionError(`expected STATUS_REP, got ${reply.msgType}`);
    }
    return reply.payload;
  }

  async run(
    qasm: string,
    shots: number,
    options: SubmitOptions = {}
  ): Promise<RunResult> {
    const jobId = randomBytes(16);
    const reply = await this.request({
      msgType: MsgType.SUBMIT,
      jobId,
      payload: jobspecDoc(qasm, shots, options),
    });
    this.raiseIfError(reply);
    if (reply.msgType !== MsgType.RESULT || reply.payload === null) {
      throw new ConnectionError(
        `expected RESULT, got message type ${reply.msgType}`
      );
    }
    if (!reply.jobId.equals(jobId)) {
      throw new ConnectionError("reply names a different job id");
    }
    const doc = reply.payload;
    const result = doc["result"] as { [key: string]: Json };
    return {
      counts: result["counts"] as Record<string, number>,
      shots: result["shots"] as number,
      engine: result["engine"] as string,
      estimatedWallTime: result["estimated_wall_time"] as number,
      effectivePeriod: result["effective_period"] as number,
      memory: (result["memory"] as string[] | null) ?? null,
      timings: doc["timings"] as Record<string, number>,
      warnings: (doc["warnings"] as string[]) ?? [],
      jobIdHex: jobId.toString("hex"),
      raw: doc,
    };
  }

  private raiseIfError(env: Envelope): void {
    if (env.msgType !== MsgType.ERROR) return;
    const p = env.payload ?? {};
    throw new BrokerError(
      String(p["code"] ?? "unknown"),
      String(p["message"] ?? "server error"),
      p["stage"] == null ? null : String(p["stage"])
    );
  }
}

/**
 * Convenience one-shot: connect, run, close. Accepts an existing
 * Backend (left open) or a config object (closed afterwards).
 */
export async function backendRun(
  handle: Backend | BackendConfig,
  qasm: string,
  shots: number,
  options: SubmitOptions = {}
): Promise<RunResult> {
  if (handle instanceof Backend) {
    return handle.run(qasm, shots, options);
  }
  const backend = new Backend(handle);
  try {
    return await backend.run(qasm, shots, options);
  } finally {
    backend.close();
  }
}
