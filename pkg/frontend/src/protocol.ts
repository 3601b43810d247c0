/**
 * Wire codec for the qhq binary protocol.
 *
 * A frame is a 25-byte header (magic "QHQ1", one type byte, a 16-byte
 * job id, a big-endian u32 payload length) followed by the payload:
 * one canonically serialized JSON object, or nothing. The layout and
 * the canonical-JSON rules are documented in ../../docs/protocol.md
 * and enforced byte-for-byte against shared golden fixtures.
 */

export const MAGIC = Buffer.from("QHQ1", "latin1");
export const HEADER_LEN = 25;
export const MAX_PAYLOAD = 64 * 1024 * 1024;
export const DEFAULT_PORT = 5555;
export const NULL_JOB_ID = Buffer.alloc(16);

export enum MsgType {
  SUBMIT = 1,
  RESULT = 2,
  ERROR = 3,
  STATUS_REQ = 4,
  STATUS_REP = 5,
  CANCEL = 6,
  PING = 7,
  PONG = 8,
}

const TYPE_VALUES = new Set<number>([1, 2, 3, 4, 5, 6, 7, 8]);

export type Json =
  | null
  | boolean
  | number
  | string
  | Json[]
  | { [key: string]: Json };

export interface Envelope {
  msgType: MsgType;
  jobId: Buffer;
  payload: { [key: string]: Json } | null;
}

export class FrameError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "FrameError";
  }
}

/**
 * Shortest round-trip decimal for a non-integral (or forced-float)
 * number, matching the peer's repr formatting: positional when the
 * decimal exponent is in [-4, 16), otherwise scientific with a signed,
 * minimum-two-digit exponent. Integral values in positional form get a
 * trailing ".0".
 */
export function formatFloat(v: number): string {
  if (!Number.isFinite(v)) {
    throw new FrameError("non-finite numbers cannot be serialized");
  }
  const neg = v < 0 || Object.is(v, -0);
  const abs = Math.abs(v);
  if (abs === 0) return neg ? "-0.0" : "0.0";
  const [mant, expRaw] = abs.toExponential().split("e") as [string, string];
  const exp = parseInt(expRaw, 10);
  const digits = mant.replace(".", "");
  const sign = neg ? "-" : "";
  if (exp < -4 || exp >= 16) {
    const head =
      digits.length > 1 ? `${digits[0]}.${digits.slice(1)}` : digits;
    const esign = exp < 0 ? "-" : "+";
    const emag = String(Math.abs(exp)).padStart(2, "0");
    return `${sign}${head}e${esign}${emag}`;
  }
  if (exp >= 0) {
    const intPart = digits.slice(0, exp + 1).padEnd(exp + 1, "0");
    const frac = digits.slice(exp + 1);
    return `${sign}${intPart}.${frac === "" ? "0" : frac}`;
  }
  return `${sign}0.${"0".repeat(-exp - 1)}${digits}`;
}

function formatNumber(v: number): string {
  if (Number.isInteger(v) && !Object.is(v, -0) && Math.abs(v) < 2 ** 53) {
    return String(v);
  }
  return formatFloat(v);
}

/**
 * Canonical JSON: keys sorted, "," and ":" separators with no spaces,
 * non-ASCII characters kept raw (the frame is UTF-8 on the wire).
 * Key order is plain code-unit sort; identical to the peer for any key
 * within the basic multilingual plane, which covers every wire field.
 */
export function canonicalJson(value: Json): string {
  if (value === null) return "null";
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "number") return formatNumber(value);
  if (typeof value === "string") return JSON.stringify(value);
  if (Array.isArray(value)) {
    return `[${value.map(canonicalJson).join(",")}]`;
  }
  const keys = Object.keys(value).sort();
  const parts = keys.map(
    (k) => `${JSON.stringify(k)}:${canonicalJson(value[k] as Json)}`
  );
  return `{${parts.join(",")}}`;
}

export function encodeEnvelope(env: Envelope): Buffer {
  if (env.jobId.length !== 16) {
    throw new FrameError(`job id must be 16 bytes, got ${env.jobId.length}`);
  }
  if (!TYPE_VALUES.has(env.msgType)) {
    throw new FrameError(`unknown message type ${env.msgType}`);
  }
  let body = Buffer.alloc(0);
  if (env.payload !== null) {
    if (
      typeof env.payload !== "object" ||
      Array.isArray(env.payload)
    ) {
      throw new FrameError("payload must be a JSON object or null");
    }
    body = Buffer.from(canonicalJson(env.payload), "utf8");
    if (body.length > MAX_PAYLOAD) {
      throw new FrameError(
        `payload of ${body.length} bytes exceeds the ${MAX_PAYLOAD} cap`
      );
    }
  }
  const header = Buffer.alloc(HEADER_LEN);
  MAGIC.copy(header, 0);
  header.writeUInt8(env.msgType, 4);
  env.jobId.copy(header, 5);
  header.writeUInt32BE(body.length, 21);
  return Buffer.concat([header, body]);
}

/**
 * Decode one frame from the front of `buf`. Returns null when the
 * buffer is a valid prefix that simply needs more bytes; throws
 * FrameError the moment the bytes cannot become a frame (wrong magic,
 * unknown type, oversized or malformed payload).
 */
export function tryDecode(
  buf: Buffer
): { envelope: Envelope; consumed: number } | null {
  const magicLen = Math.min(buf.length, 4);
  for (let i = 0; i < magicLen; i++) {
    if (buf[i] !== MAGIC[i]) {
      throw new FrameError(
        `bad magic ${buf.subarray(0, 4).toString("hex")}`
      );
    }
  }
  if (buf.length < 5) return null;
  const typeByte = buf.readUInt8(4);
  if (!TYPE_VALUES.has(typeByte)) {
    throw new FrameError(`unknown message type byte ${typeByte}`);
  }
  if (buf.length < HEADER_LEN) return null;
  const payloadLen = buf.readUInt32BE(21);
  if (payloadLen > MAX_PAYLOAD) {
    throw new FrameError(
      `declared payload of ${payloadLen} bytes exceeds the ${MAX_PAYLOAD} cap`
    );
  }
  const total = HEADER_LEN + payloadLen;
  if (buf.length < total) return null;
  const jobId = Buffer.from(buf.subarray(5, 21));
  let payload: { [key: string]: Json } | null = null;
  if (payloadLen > 0) {
    let parsed: unknown;
    try {
      parsed = JSON.parse(buf.subarray(HEADER_LEN, total).toString("utf8"));
    } catch (err) {
      throw new FrameError(`payload is not valid JSON: ${err}`);
    }
    if (
      parsed === null ||
      typeof parsed !== "object" ||
      Array.isArray(parsed)
    ) {
      throw new FrameError("payload must decode to a JSON object");
    }
    payload = parsed as { [key: string]: Json };
  }
  return {
    envelope: { msgType: typeByte as MsgType, jobId, payload },
    consumed: total,
  };
}

/** Incremental decoder for a byte stream carrying back-to-back frames. */
export class StreamDecoder {
  private buf: Buffer = Buffer.alloc(0);

  push(chunk: Buffer): Envelope[] {
    this.buf = this.buf.length === 0 ? chunk : Buffer.concat([this.buf, chunk]);
    const out: Envelope[] = [];
    for (;;) {
      const hit = tryDecode(this.buf);
      if (hit === null) break;
      out.push(hit.envelope);
      this.buf = this.buf.subarray(hit.consumed);
    }
    return out;
  }

  get pending(): number {
    return this.buf.length;
  }
}

export interface SubmitOptions {
  repetitionPeriod?: number;
  outputFormat?: "counts" | "memory";
  metadata?: { [key: string]: Json };
}

/** Job document for a raw source submission; mirrors the broker's schema. */
export function jobspecDoc(
  qasm: string,
  shots: number,
  options: SubmitOptions = {}
): { [key: string]: Json } {
  if (!Number.isInteger(shots) || shots < 1) {
    throw new FrameError(`shots must be a positive integer, got ${shots}`);
  }
  return {
    aot_artifact: null,
    ir_kind: "qasm2",
    ir_text: qasm,
    metadata: options.metadata ?? {},
    output_format: options.outputFormat ?? "counts",
    parameter_values: null,
    repetition_period: options.repetitionPeriod ?? null,
    shots,
  };
}
