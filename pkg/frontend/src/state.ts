/**
 * Console state: a pure reducer over decoded stream messages, so rendering
 * and tests share one source of truth. Malformed input bumps a counter
 * instead of wedging the session.
 */

import {
  FramePayload,
  Kind,
  ProtocolError,
  StreamDecoder,
  StreamMessage,
  decodeFramePayload,
  decodeJsonPayload,
} from "./codec.js";

export type ConnectionStatus = "connecting" | "open" | "ended" | "closed" | "error";

export interface HelloSummary {
  blockLen: number;
  frameWidth: number;
  frameHeight: number;
  layers: number;
  heads: number;
}

export interface PromptRecord {
  effectiveChunk: number;
  text: string;
  status: "pending" | "accepted" | "rejected";
  detail: string;
}

export class ConsoleState {
  status: ConnectionStatus = "connecting";
  hello: HelloSummary | null = null;
  latestFrame: FramePayload | null = null;
  /** frame counts keyed by chunk index */
  chunkFrames = new Map<number, number>();
  /** highest chunk index seen; never regresses on out-of-order delivery */
  currentChunk = -1;
  framesReceived = 0;
  metrics: Record<string, unknown> = {};
  prompts: PromptRecord[] = [];
  decodeErrors = 0;
  lastError = "";

  private decoder = new StreamDecoder();

  onOpen(): void {
    if (this.status === "connecting") this.status = "open";
  }

  onClose(): void {
    if (this.status !== "ended") this.status = "closed";
  }

  /** Feed raw bytes from the socket; applies every complete message. */
  feed(data: Uint8Array): void {
    this.decoder.feed(data);
    let msgs: StreamMessage[];
    try {
      msgs = this.decoder.drain();
    } catch (e) {
      // the byte stream is unrecoverable past a framing error; start a
      // fresh decoder so later reconnects can reuse the state object
      this.decodeErrors += 1;
      this.lastError = e instanceof Error ? e.message : String(e);
      this.decoder = new StreamDecoder();
      return;
    }
    for (const msg of msgs) this.apply(msg);
  }

  apply(msg: StreamMessage): void {
    if (this.status === "ended") return; // frozen after END
    try {
      this.applyInner(msg);
    } catch (e) {
      if (e instanceof ProtocolError || e instanceof SyntaxError) {
        this.decodeErrors += 1;
        this.lastError = e.message;
        return;
      }
      throw e;
    }
  }

  private applyInner(msg: StreamMessage): void {
    switch (msg.kind) {
      case Kind.HELLO: {
        const info = decodeJsonPayload(msg.payload);
        this.hello = {
          blockLen: Number(info["block_len"]),
          frameWidth: Number(info["frame_width"]),
          frameHeight: Number(info["frame_height"]),
          layers: Number(info["layers"]),
          heads: Number(info["heads"]),
        };
        break;
      }
      case Kind.FRAME: {
        const fp = decodeFramePayload(msg.payload);
        this.latestFrame = fp;
        this.framesReceived += 1;
        this.chunkFrames.set(fp.chunkIndex, (this.chunkFrames.get(fp.chunkIndex) ?? 0) + 1);
        if (fp.chunkIndex > this.currentChunk) this.currentChunk = fp.chunkIndex;
        break;
      }
      case Kind.METRICS: {
        this.metrics = decodeJsonPayload(msg.payload);
        break;
      }
      case Kind.ERROR: {
        const text = new TextDecoder().decode(msg.payload);
        this.lastError = text;
        // a rejection names the chunk; mark the matching pending prompt
        const m = text.match(/chunk (\d+)/);
        if (m) this.markPrompt(Number(m[1]), "rejected", text);
        break;
      }
      case Kind.END: {
        this.status = "ended";
        break;
      }
      case Kind.PROMPT_UPDATE:
        // server never sends these back; count it as noise
        this.decodeErrors += 1;
        break;
    }
  }

  /** Record a prompt the user just submitted. */
  promptSent(effectiveChunk: number, text: string): void {
    this.prompts.push({ effectiveChunk, text, status: "pending", detail: "" });
  }

  /** Pending prompts for chunks generation has passed were accepted. */
  reconcilePrompts(): void {
    for (const p of this.prompts) {
      if (p.status === "pending" && p.effectiveChunk <= this.currentChunk) {
        p.status = "accepted";
      }
    }
  }

  private markPrompt(chunk: number, status: "accepted" | "rejected", detail: string): void {
    for (let i = this.prompts.length - 1; i >= 0; i--) {
      const p = this.prompts[i];
      if (p.effectiveChunk === chunk && p.status === "pending") {
        p.status = status;
        p.detail = detail;
        return;
      }
    }
  }

  progressLine(): string {
    if (!this.hello) return "waiting for HELLO";
    const done = [...this.chunkFrames.entries()]
      .sort((a, b) => a[0] - b[0])
      .map(([c, n]) => `chunk ${c}: ${n}/${this.hello!.blockLen}`)
      .join(", ");
    return done || "no frames yet";
  }
}
