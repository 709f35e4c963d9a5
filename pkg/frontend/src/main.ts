/**
 * DOM wiring.  Keeps zero logic of its own: every visual decision is a
 * function of ConsoleState, and every control handler goes through
 * actionAllowed before sending.
 */

import { SessionClient } from "./client.js";
import {
  ConsoleState,
  actionAllowed,
  applyParseResult,
  bannerVisible,
  gateColor,
  initialState,
  overlayEnabled,
  pressAction,
  reacquireAction,
  rescanAction,
  slowDownAction,
} from "./state.js";

let state: ConsoleState = initialState();

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

function render(): void {
  const gate = byId<HTMLDivElement>("gate");
  gate.dataset.color = gateColor(state.gate);
  gate.textContent = state.gate ?? "waiting";

  const banner = byId<HTMLDivElement>("banner");
  if (bannerVisible(state) && state.banner) {
    banner.hidden = false;
    // catalog text shown verbatim
    banner.textContent = state.banner.message;
  } else {
    banner.hidden = true;
    banner.textContent = "";
  }

  byId<HTMLDivElement>("status").textContent = state.degraded
    ? "protocol version mismatch: read-only"
    : state.connection;

  drawSparkline(byId<HTMLCanvasElement>("sparkline"), state.sigma2Series);

  const overlayToggle = byId<HTMLInputElement>("overlay-toggle");
  overlayToggle.disabled = !overlayEnabled(state);

  byId<HTMLButtonElement>("press").disabled = !actionAllowed(state, "press");
  byId<HTMLButtonElement>("rescan").disabled = !actionAllowed(state, "rescan");
  byId<HTMLButtonElement>("reacquire").disabled = !actionAllowed(
    state,
    "reacquire",
  );
  byId<HTMLInputElement>("speed").disabled = !actionAllowed(state, "slow-down");

  if (state.lastError) {
    byId<HTMLDivElement>("errors").textContent = state.lastError;
  }
}

function drawSparkline(canvas: HTMLCanvasElement, series: number[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx || series.length < 2) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  const max = Math.max(...series, 1e-12);
  ctx.beginPath();
  series.forEach((v, i) => {
    const x = (i / (series.length - 1)) * w;
    const y = h - (v / max) * h;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.strokeStyle = "#4a90d9";
  ctx.stroke();
}

export function boot(): void {
  const client = new SessionClient({
    onParsed: (r) => {
      state = applyParseResult(state, r);
      render();
    },
    onConnectionChange: (connected) => {
      state = { ...state, connection: connected ? "connected" : "disconnected" };
      render();
    },
    onQueuedWarning: (n) => {
      byId<HTMLDivElement>("errors").textContent =
        `disconnected: ${n} action(s) queued`;
    },
  });

  const url = byId<HTMLInputElement>("server-url").value;
  const ws = new WebSocket(url);
  ws.addEventListener("open", () =>
    client.attach({ send: (d) => ws.send(d), close: () => ws.close() }),
  );
  ws.addEventListener("message", (ev) => client.receive(String(ev.data)));
  ws.addEventListener("close", () => client.detach());

  byId<HTMLButtonElement>("start").addEventListener("click", () => {
    client.startSession(byId<HTMLInputElement>("session-id").value, "sim");
  });
  byId<HTMLInputElement>("speed").addEventListener("change", (ev) => {
    const factor = Number((ev.target as HTMLInputElement).value);
    if (actionAllowed(state, "slow-down")) {
      client.sendAction(slowDownAction(factor));
    }
  });
  byId<HTMLButtonElement>("press").addEventListener("click", () => {
    if (actionAllowed(state, "press")) client.sendAction(pressAction());
  });
  byId<HTMLButtonElement>("rescan").addEventListener("click", () => {
    if (actionAllowed(state, "rescan")) client.sendAction(rescanAction());
  });
  byId<HTMLButtonElement>("reacquire").addEventListener("click", () => {
    if (actionAllowed(state, "reacquire")) client.sendAction(reacquireAction());
  });
  byId<HTMLInputElement>("overlay-toggle").addEventListener("change", (ev) => {
    state = {
      ...state,
      overlayVisible: (ev.target as HTMLInputElement).checked,
    };
    render();
  });

  render();
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  boot();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", boot);
}
