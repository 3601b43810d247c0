export {
  DEFAULT_PORT,
  FrameError,
  HEADER_LEN,
  MAGIC,
  MAX_PAYLOAD,
  MsgType,
  NULL_JOB_ID,
  StreamDecoder,
  canonicalJson,
  encodeEnvelope,
  formatFloat,
  jobspecDoc,
  tryDecode,
} from "./protocol.js";
export type { Envelope, Json, SubmitOptions } from "./protocol.js";

export {
  Backend,
  BrokerError,
  ConnectionError,
  SdkError,
  TimeoutError,
  backendRun,
} from "./backend.js";
export type { BackendConfig, RunResult } from "./backend.js";
