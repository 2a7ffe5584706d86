/**
 * Browser glue: WebSocket connection, canvas rendering, prompt form.
 * All protocol/state logic lives in codec.ts / state.ts; this file only
 * touches the DOM.
 */

import { promptUpdateMessage, encodeMessage } from "./codec.js";
import { ConsoleState } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startConsole(): void {
  const state = new ConsoleState();
  const canvas = el<HTMLCanvasElement>("frame");
  const ctx = canvas.getContext("2d")!;
  const statusEl = el<HTMLSpanElement>("status");
  const progressEl = el<HTMLDivElement>("progress");
  const metricsEl = el<HTMLPreElement>("metrics");
  const promptsEl = el<HTMLUListElement>("prompts");
  const form = el<HTMLFormElement>("prompt-form");
  const chunkInput = el<HTMLInputElement>("prompt-chunk");
  const textInput = el<HTMLInputElement>("prompt-text");
  const errorsEl = el<HTMLDivElement>("errors");

  const endpoint = new URLSearchParams(location.search).get("ws")
    ?? `ws://${location.host}/`;
  const ws = new WebSocket(endpoint);
  ws.binaryType = "arraybuffer";

  ws.onopen = () => { state.onOpen(); render(); };
  ws.onclose = () => { state.onClose(); render(); };
  ws.onerror = () => { state.status = "error"; render(); };
  ws.onmessage = (ev: MessageEvent) => {
    state.feed(new Uint8Array(ev.data as ArrayBuffer));
    state.reconcilePrompts();
    render();
  };

  form.onsubmit = (ev) => {
    ev.preventDefault();
    const text = textInput.value.trim();
    const chunk = Number(chunkInput.value);
    if (!text) {
      errorsEl.textContent = "prompt text must be non-empty";
      return;
    }
    if (!Number.isInteger(chunk) || chunk < 0) {
      errorsEl.textContent = "effective chunk must be a non-negative integer";
      return;
    }
    const wire = encodeMessage(promptUpdateMessage(chunk, text));
    ws.send(wire.buffer as ArrayBuffer);
    state.promptSent(chunk, text);
    textInput.value = "";
    render();
  };

  function render(): void {
    statusEl.textContent = state.status;
    statusEl.className = `status-${state.status}`;
    progressEl.textContent = state.progressLine();
    metricsEl.textContent = Object.keys(state.metrics).length
      ? JSON.stringify(state.metrics, null, 2)
      : "(no metrics yet)";
    errorsEl.textContent = state.decodeErrors
      ? `${state.decodeErrors} decode error(s); last: ${state.lastError}`
      : state.lastError;

    const frame = state.latestFrame;
    if (frame) {
      if (canvas.width !== frame.width || canvas.height !== frame.height) {
        canvas.width = frame.width;
        canvas.height = frame.height;
      }
      const img = ctx.createImageData(frame.width, frame.height);
      for (let i = 0; i < frame.pixels.length; i++) {
        const v = frame.pixels[i];
        img.data[i * 4] = v;
        img.data[i * 4 + 1] = v;
        img.data[i * 4 + 2] = v;
        img.data[i * 4 + 3] = 255;
      }
      ctx.putImageData(img, 0, 0);
    }

    promptsEl.replaceChildren(
      ...state.prompts.map((p) => {
        const li = document.createElement("li");
        li.textContent = `chunk ${p.effectiveChunk}: "${p.text}" — ${p.status}`
          + (p.detail ? ` (${p.detail})` : "");
        li.className = `prompt-${p.status}`;
        return li;
      }),
    );
  }

  render();
}
