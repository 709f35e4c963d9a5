/**
 * Console state and its pure reducer.
 *
 * All rendering decisions (gate color, banner, overlay availability, which
 * action controls are live) derive from this state; the DOM layer just
 * mirrors it.
 */

import {
  OperatorAction,
  PROTOCOL_VERSION,
  ParseResult,
  ServerMessage,
} from "./protocol.js";

export type GateLevel = "safe" | "caution" | "critical";
export type GateColor = "green" | "amber" | "red";
export type Connection = "disconnected" | "connecting" | "connected";

export interface PromptBanner {
  cause: string;
  /** Catalog text, displayed byte-for-byte as received. */
  message: string;
  frameIndex: number;
  addressed: boolean;
}

export interface ConsoleState {
  connection: Connection;
  degraded: boolean; // schema-version mismatch: read-only view
  sessionId: string | null;
  frameIndex: number | null;
  gate: GateLevel | null;
  sigma2Series: number[];
  latestPose: number[] | null;
  saliencyPngByIndex: Map<number, string>;
  overlayVisible: boolean;
  banner: PromptBanner | null;
  summary: { frames: number; accepted: number; prompts: number } | null;
  lastError: string | null;
}

export function initialState(): ConsoleState {
  return {
    connection: "disconnected",
    degraded: false,
    sessionId: null,
    frameIndex: null,
    gate: null,
    sigma2Series: [],
    latestPose: null,
    saliencyPngByIndex: new Map(),
    overlayVisible: false,
    banner: null,
    summary: null,
    lastError: null,
  };
}

export function gateColor(gate: GateLevel | null): GateColor {
  if (gate === "caution") return "amber";
  if (gate === "critical") return "red";
  return "green";
}

/** A banner shows for caution/critical; safe clears it. */
export function bannerVisible(s: ConsoleState): boolean {
  return s.banner !== null && !s.banner.addressed;
}

/** Overlay toggle is live once a saliency payload exists for any frame. */
export function overlayEnabled(s: ConsoleState): boolean {
  return s.saliencyPngByIndex.size > 0;
}

export function applyMessage(
  s: ConsoleState,
  msg: ServerMessage,
): ConsoleState {
  switch (msg.type) {
    case "started":
      return { ...s, sessionId: msg.session_id };
    case "frame_meta":
      return { ...s, frameIndex: msg.index };
    case "pose_estimate":
      return { ...s, latestPose: msg.pose };
    case "uncertainty_report": {
      const next: ConsoleState = {
        ...s,
        frameIndex: msg.index,
        gate: msg.gate,
        sigma2Series: [...s.sigma2Series, msg.sigma2],
      };
      if (msg.gate === "safe") {
        // recovery confirms the last prompt was addressed
        next.banner = s.banner ? { ...s.banner, addressed: true } : null;
      }
      return next;
    }
    case "saliency_png": {
      const maps = new Map(s.saliencyPngByIndex);
      maps.set(msg.index, msg.png);
      return { ...s, saliencyPngByIndex: maps };
    }
    case "prompt":
      return {
        ...s,
        banner: {
          cause: msg.cause,
          message: msg.message,
          frameIndex: msg.index,
          addressed: false,
        },
      };
    case "session_summary":
      return {
        ...s,
        summary: {
          frames: msg.frames,
          accepted: msg.accepted,
          prompts: msg.prompts,
        },
      };
    case "error":
      return { ...s, lastError: msg.message };
  }
}

export function applyParseResult(s: ConsoleState, r: ParseResult): ConsoleState {
  if (r.ok) return applyMessage(s, r.message);
  if (r.reason === "version") return { ...s, degraded: true };
  return { ...s, lastError: `unreadable message (${r.reason})` };
}

// ---------------------------------------------------------------------
// operator actions: gate-consistency rules

export type ActionKind = OperatorAction["kind"];

/**
 * Whether a control is live: connected, schema understood, and the gate
 * warrants an intervention (no actions while everything is safe).
 */
export function actionAllowed(s: ConsoleState, kind: ActionKind): boolean {
  if (s.connection !== "connected" || s.degraded) return false;
  if (s.gate === "caution") return kind !== "reacquire";
  if (s.gate === "critical") return true;
  return false; // safe or unknown gate: UI blocks with a tooltip
}

export function slowDownAction(factor: number): OperatorAction {
  return { v: PROTOCOL_VERSION, type: "operator_action", kind: "slow-down", factor };
}

export function pressAction(): OperatorAction {
  return { v: PROTOCOL_VERSION, type: "operator_action", kind: "press" };
}

export function rescanAction(frames?: number): OperatorAction {
  return frames === undefined
    ? { v: PROTOCOL_VERSION, type: "operator_action", kind: "rescan" }
    : { v: PROTOCOL_VERSION, type: "operator_action", kind: "rescan", frames };
}

export function reacquireAction(): OperatorAction {
  return { v: PROTOCOL_VERSION, type: "operator_action", kind: "reacquire" };
}
