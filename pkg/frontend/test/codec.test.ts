import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  Kind,
  KindValue,
  NeedMoreData,
  ProtocolError,
  StreamDecoder,
  crc32,
  decodeFramePayload,
  decodeMessage,
  decodePromptUpdate,
  encodeFramePayload,
  encodeMessage,
  encodePromptUpdate,
  promptUpdateMessage,
} from "../src/codec.js";

const vectorsPath = fileURLToPath(
  new URL("../../tests/golden/wire_vectors.json", import.meta.url),
);

interface Vector {
  desc: string;
  kind: number;
  payload_hex: string;
  wire_hex: string;
  frame?: {
    chunk_index: number;
    frame_index: number;
    width: number;
    height: number;
    pixels_hex: string;
  };
  prompt?: { effective_chunk: number; text: string };
}

const golden: { version: number; vectors: Vector[] } = JSON.parse(
  readFileSync(vectorsPath, "utf-8"),
);

function fromHex(hex: string): Uint8Array {
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(i * 2, i * 2 + 2), 16);
  }
  return out;
}

function toHex(data: Uint8Array): string {
  return [...data].map((b) => b.toString(16).padStart(2, "0")).join("");
}

describe("crc32", () => {
  it("matches the IEEE check value", () => {
    expect(crc32(new TextEncoder().encode("123456789"))).toBe(0xcbf43926);
  });

  it("of empty input is zero", () => {
    expect(crc32(new Uint8Array(0))).toBe(0);
  });
});

describe("golden vectors", () => {
  it("has the expected shape", () => {
    expect(golden.version).toBe(1);
    expect(golden.vectors.length).toBeGreaterThanOrEqual(10);
  });

  for (const v of golden.vectors) {
    it(`encodes "${v.desc}" byte-for-byte`, () => {
      const wire = encodeMessage({
        kind: v.kind as KindValue,
        payload: fromHex(v.payload_hex),
      });
      expect(toHex(wire)).toBe(v.wire_hex);
    });

    it(`decodes "${v.desc}"`, () => {
      const { msg, consumed } = decodeMessage(fromHex(v.wire_hex));
      expect(msg.kind).toBe(v.kind);
      expect(toHex(msg.payload)).toBe(v.payload_hex);
      expect(consumed).toBe(v.wire_hex.length / 2);
    });
  }

  it("decodes the golden frame payload fields", () => {
    const v = golden.vectors.find((x) => x.frame)!;
    const fp = decodeFramePayload(fromHex(v.payload_hex));
    expect(fp.chunkIndex).toBe(v.frame!.chunk_index);
    expect(fp.frameIndex).toBe(v.frame!.frame_index);
    expect(fp.width).toBe(v.frame!.width);
    expect(fp.height).toBe(v.frame!.height);
    expect(toHex(fp.pixels)).toBe(v.frame!.pixels_hex);
    expect(toHex(encodeFramePayload(fp))).toBe(v.payload_hex);
  });

  it("decodes the golden prompt payload fields", () => {
    const v = golden.vectors.find((x) => x.prompt)!;
    const p = decodePromptUpdate(fromHex(v.payload_hex));
    expect(p.effectiveChunk).toBe(v.prompt!.effective_chunk);
    expect(p.text).toBe(v.prompt!.text);
    expect(toHex(encodePromptUpdate(p))).toBe(v.payload_hex);
    const msg = promptUpdateMessage(v.prompt!.effective_chunk, v.prompt!.text);
    expect(toHex(encodeMessage(msg))).toBe(v.wire_hex);
  });
});

describe("round trips", () => {
  it("survives random payloads", () => {
    let seed = 12345;
    const rand = () => {
      // xorshift32: deterministic without pulling in a dependency
      seed ^= seed << 13; seed ^= seed >>> 17; seed ^= seed << 5;
      return (seed >>> 0) / 0x100000000;
    };
    const kinds = Object.values(Kind);
    for (let i = 0; i < 500; i++) {
      const kind = kinds[Math.floor(rand() * kinds.length)];
      const payload = new Uint8Array(Math.floor(rand() * 300));
      for (let j = 0; j < payload.length; j++) payload[j] = Math.floor(rand() * 256);
      const wire = encodeMessage({ kind, payload });
      const { msg, consumed } = decodeMessage(wire);
      expect(consumed).toBe(wire.length);
      expect(msg.kind).toBe(kind);
      expect(msg.payload).toEqual(payload);
    }
  });

  it("reassembles messages split at every byte boundary", () => {
    const wires = golden.vectors.slice(0, 4).map((v) => fromHex(v.wire_hex));
    const stream = new Uint8Array(wires.reduce((n, w) => n + w.length, 0));
    let off = 0;
    for (const w of wires) { stream.set(w, off); off += w.length; }

    for (const cut of [1, 3, 7, stream.length - 1]) {
      const dec = new StreamDecoder();
      const got: number[] = [];
      for (let pos = 0; pos < stream.length; pos += cut) {
        dec.feed(stream.slice(pos, pos + cut));
        for (const m of dec.drain()) got.push(m.kind);
      }
      expect(got).toEqual(golden.vectors.slice(0, 4).map((v) => v.kind));
    }
  });
});

describe("malformed input", () => {
  const goodWire = fromHex(golden.vectors[2].wire_hex);

  it("asks for more data on truncation", () => {
    for (const n of [0, 4, 9, goodWire.length - 1]) {
      expect(() => decodeMessage(goodWire.slice(0, n))).toThrow(NeedMoreData);
    }
  });

  it("rejects a flipped crc byte", () => {
    const bad = goodWire.slice();
    bad[bad.length - 1] ^= 0xff;
    expect(() => decodeMessage(bad)).toThrow(ProtocolError);
  });

  it("rejects a flipped payload byte", () => {
    const bad = goodWire.slice();
    bad[12] ^= 0x01;
    expect(() => decodeMessage(bad)).toThrow(ProtocolError);
  });

  it("rejects bad magic, version, and kind", () => {
    const badMagic = goodWire.slice();
    badMagic[0] = 0x58;
    expect(() => decodeMessage(badMagic)).toThrow(/magic/);

    const badVersion = goodWire.slice();
    badVersion[4] = 2;
    expect(() => decodeMessage(badVersion)).toThrow(/version/);

    const badKind = goodWire.slice();
    badKind[5] = 9;
    expect(() => decodeMessage(badKind)).toThrow(/kind/);
  });

  it("rejects oversized declared lengths without allocating", () => {
    const bad = goodWire.slice();
    new DataView(bad.buffer).setUint32(6, 0xffffffff, true);
    expect(() => decodeMessage(bad)).toThrow(/too large/);
  });

  it("rejects frame payloads whose pixel count disagrees", () => {
    const fp = decodeFramePayload(fromHex(golden.vectors[2].payload_hex));
    fp.pixels = fp.pixels.slice(0, 3);
    expect(() => encodeFramePayload(fp)).toThrow(ProtocolError);
  });

  it("rejects prompt payloads with a wrong length field", () => {
    const raw = encodePromptUpdate({ effectiveChunk: 1, text: "hello" });
    new DataView(raw.buffer).setUint16(4, 99, true);
    expect(() => decodePromptUpdate(raw)).toThrow(ProtocolError);
  });
});
