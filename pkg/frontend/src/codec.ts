/**
 * Wire codec for the inferix stream protocol.
 *
 * Layout per message: magic "INFX", version u8 (=1), kind u8, payload length
 * u32 LE, payload bytes, crc32 u32 LE over the payload. Must stay in
 * lockstep with the engine-side codec; the shared golden vectors file keeps
 * both honest.
 */

export const MAGIC = new Uint8Array([0x49, 0x4e, 0x46, 0x58]); // "INFX"
export const VERSION = 1;
export const HEADER_SIZE = 10;
export const TRAILER_SIZE = 4;
export const MAX_PAYLOAD = 16 * 1024 * 1024;
export const MAX_PROMPT_BYTES = 4096;

export const Kind = {
  HELLO: 1,
  FRAME: 2,
  PROMPT_UPDATE: 3,
  METRICS: 4,
  END: 5,
  ERROR: 6,
} as const;

export type KindValue = (typeof Kind)[keyof typeof Kind];

const KNOWN_KINDS = new Set<number>(Object.values(Kind));

export interface StreamMessage {
  kind: KindValue;
  payload: Uint8Array;
}

export class ProtocolError extends Error {}
/** Thrown when the buffer holds only a prefix of a message (retriable). */
export class NeedMoreData extends Error {}

// standard CRC-32 (IEEE 802.3), table-driven
const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(data: Uint8Array): number {
  let crc = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    crc = CRC_TABLE[(crc ^ data[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

export function encodeMessage(msg: StreamMessage): Uint8Array {
  if (!KNOWN_KINDS.has(msg.kind)) {
    throw new ProtocolError(`unknown message kind ${msg.kind}`);
  }
  if (msg.payload.length > MAX_PAYLOAD) {
    throw new ProtocolError(`payload too large: ${msg.payload.length} bytes`);
  }
  const out = new Uint8Array(HEADER_SIZE + msg.payload.length + TRAILER_SIZE);
  const view = new DataView(out.buffer);
  out.set(MAGIC, 0);
  out[4] = VERSION;
  out[5] = msg.kind;
  view.setUint32(6, msg.payload.length, true);
  out.set(msg.payload, HEADER_SIZE);
  view.setUint32(HEADER_SIZE + msg.payload.length, crc32(msg.payload), true);
  return out;
}

export function decodeMessage(buf: Uint8Array): { msg: StreamMessage; consumed: number } {
  if (buf.length < HEADER_SIZE) {
    throw new NeedMoreData(`need ${HEADER_SIZE} header bytes, have ${buf.length}`);
  }
  for (let i = 0; i < 4; i++) {
    if (buf[i] !== MAGIC[i]) throw new ProtocolError("bad magic");
  }
  if (buf[4] !== VERSION) throw new ProtocolError(`unsupported version ${buf[4]}`);
  const kind = buf[5];
  if (!KNOWN_KINDS.has(kind)) throw new ProtocolError(`unknown message kind ${kind}`);
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const length = view.getUint32(6, true);
  if (length > MAX_PAYLOAD) throw new ProtocolError(`declared payload too large: ${length}`);
  const total = HEADER_SIZE + length + TRAILER_SIZE;
  if (buf.length < total) throw new NeedMoreData(`need ${total} bytes, have ${buf.length}`);
  const payload = buf.slice(HEADER_SIZE, HEADER_SIZE + length);
  const crc = view.getUint32(HEADER_SIZE + length, true);
  if (crc !== crc32(payload)) throw new ProtocolError("payload crc mismatch");
  return { msg: { kind: kind as KindValue, payload }, consumed: total };
}

/** Incremental reassembly for a byte stream of messages. */
export class StreamDecoder {
  private buf = new Uint8Array(0);

  feed(data: Uint8Array): void {
    const joined = new Uint8Array(this.buf.length + data.length);
    joined.set(this.buf, 0);
    joined.set(data, this.buf.length);
    this.buf = joined;
  }

  /** Decodes every complete message currently buffered. */
  drain(): StreamMessage[] {
    const out: StreamMessage[] = [];
    for (;;) {
      let decoded;
      try {
        decoded = decodeMessage(this.buf);
      } catch (e) {
        if (e instanceof NeedMoreData) return out;
        throw e;
      }
      out.push(decoded.msg);
      this.buf = this.buf.slice(decoded.consumed);
    }
  }
}

// -- payload structs --------------------------------------------------------

export interface FramePayload {
  chunkIndex: number;
  frameIndex: number;
  width: number;
  height: number;
  pixels: Uint8Array; // width*height grayscale bytes
}

const FRAME_HEAD_SIZE = 10; // u32 chunk, u16 frame, u16 width, u16 height

export function encodeFramePayload(fp: FramePayload): Uint8Array {
  if (fp.pixels.length !== fp.width * fp.height) {
    throw new ProtocolError(
      `pixel count ${fp.pixels.length} != ${fp.width}x${fp.height}`,
    );
  }
  const out = new Uint8Array(FRAME_HEAD_SIZE + fp.pixels.length + 4);
  const view = new DataView(out.buffer);
  view.setUint32(0, fp.chunkIndex, true);
  view.setUint16(4, fp.frameIndex, true);
  view.setUint16(6, fp.width, true);
  view.setUint16(8, fp.height, true);
  out.set(fp.pixels, FRAME_HEAD_SIZE);
  view.setUint32(FRAME_HEAD_SIZE + fp.pixels.length, crc32(fp.pixels), true);
  return out;
}

export function decodeFramePayload(payload: Uint8Array): FramePayload {
  if (payload.length < FRAME_HEAD_SIZE + 4) {
    throw new ProtocolError("frame payload truncated");
  }
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const chunkIndex = view.getUint32(0, true);
  const frameIndex = view.getUint16(4, true);
  const width = view.getUint16(6, true);
  const height = view.getUint16(8, true);
  const end = FRAME_HEAD_SIZE + width * height;
  if (payload.length !== end + 4) {
    throw new ProtocolError("frame payload size mismatch");
  }
  const pixels = payload.slice(FRAME_HEAD_SIZE, end);
  if (view.getUint32(end, true) !== crc32(pixels)) {
    throw new ProtocolError("frame pixel crc mismatch");
  }
  return { chunkIndex, frameIndex, width, height, pixels };
}

export interface PromptUpdatePayload {
  effectiveChunk: number;
  text: string;
}

export function encodePromptUpdate(p: PromptUpdatePayload): Uint8Array {
  const raw = new TextEncoder().encode(p.text);
  if (raw.length > MAX_PROMPT_BYTES) {
    throw new ProtocolError(`prompt too long: ${raw.length} bytes`);
  }
  const out = new Uint8Array(6 + raw.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, p.effectiveChunk, true);
  view.setUint16(4, raw.length, true);
  out.set(raw, 6);
  return out;
}

export function decodePromptUpdate(payload: Uint8Array): PromptUpdatePayload {
  if (payload.length < 6) throw new ProtocolError("prompt payload truncated");
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const effectiveChunk = view.getUint32(0, true);
  const length = view.getUint16(4, true);
  if (payload.length !== 6 + length) {
    throw new ProtocolError("prompt payload size mismatch");
  }
  const text = new TextDecoder("utf-8", { fatal: true }).decode(payload.slice(6));
  return { effectiveChunk, text };
}

export function promptUpdateMessage(effectiveChunk: number, text: string): StreamMessage {
  return {
    kind: Kind.PROMPT_UPDATE,
    payload: encodePromptUpdate({ effectiveChunk, text }),
  };
}

export function decodeJsonPayload(payload: Uint8Array): Record<string, unknown> {
  return JSON.parse(new TextDecoder().decode(payload));
}
