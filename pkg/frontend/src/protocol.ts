/**
 * Wire protocol schemas (newline-delimited JSON, version 1).
 *
 * Every message carries `v`; the console only renders schema versions it
 * understands and drops into a read-only degraded mode otherwise.
 */

import { z } from "zod";

export const PROTOCOL_VERSION = 1;

const base = { v: z.literal(PROTOCOL_VERSION) };

export const frameMeta = z.object({
  ...base,
  type: z.literal("frame_meta"),
  index: z.number().int().nonnegative(),
  timestamp: z.number(),
  width: z.number().int().positive(),
  height: z.number().int().positive(),
  mean_intensity: z.number(),
});

export const poseEstimate = z.object({
  ...base,
  type: z.literal("pose_estimate"),
  index: z.number().int().nonnegative(),
  pose: z.array(z.number()).length(6),
});

export const gateLevel = z.enum(["safe", "caution", "critical"]);

export const uncertaintyReport = z.object({
  ...base,
  type: z.literal("uncertainty_report"),
  index: z.number().int().nonnegative(),
  mu: z.array(z.number()).length(6),
  sigma2: z.number().nonnegative(),
  gate: gateLevel,
});

export const saliencyPng = z.object({
  ...base,
  type: z.literal("saliency_png"),
  index: z.number().int().nonnegative(),
  png: z.string(),
});

export const prompt = z.object({
  ...base,
  type: z.literal("prompt"),
  index: z.number().int().nonnegative(),
  cause: z.string(),
  message: z.string(),
});

export const sessionSummary = z.object({
  ...base,
  type: z.literal("session_summary"),
  frames: z.number().int().nonnegative(),
  accepted: z.number().int().nonnegative(),
  prompts: z.number().int().nonnegative(),
  mean_sigma2: z.number(),
});

export const errorMessage = z.object({
  ...base,
  type: z.literal("error"),
  message: z.string(),
});

export const started = z.object({
  ...base,
  type: z.literal("started"),
  session_id: z.string(),
  mode: z.string(),
});

export const serverMessage = z.discriminatedUnion("type", [
  frameMeta,
  poseEstimate,
  uncertaintyReport,
  saliencyPng,
  prompt,
  sessionSummary,
  errorMessage,
  started,
]);
export type ServerMessage = z.infer<typeof serverMessage>;

export const operatorAction = z.discriminatedUnion("kind", [
  z.object({
    ...base,
    type: z.literal("operator_action"),
    kind: z.literal("slow-down"),
    factor: z.number().positive(),
  }),
  z.object({
    ...base,
    type: z.literal("operator_action"),
    kind: z.literal("press"),
  }),
  z.object({
    ...base,
    type: z.literal("operator_action"),
    kind: z.literal("rescan"),
    frames: z.number().int().positive().optional(),
  }),
  z.object({
    ...base,
    type: z.literal("operator_action"),
    kind: z.literal("reacquire"),
  }),
]);
export type OperatorAction = z.infer<typeof operatorAction>;

export type ParseResult =
  | { ok: true; message: ServerMessage }
  | { ok: false; reason: "version" | "schema" | "json" };

/** Parse one NDJSON line into a typed server message. */
export function parseLine(line: string): ParseResult {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return { ok: false, reason: "json" };
  }
  if (
    typeof raw === "object" &&
    raw !== null &&
    (raw as { v?: unknown }).v !== PROTOCOL_VERSION
  ) {
    return { ok: false, reason: "version" };
  }
  const parsed = serverMessage.safeParse(raw);
  if (!parsed.success) return { ok: false, reason: "schema" };
  return { ok: true, message: parsed.data };
}

export function encodeAction(action: OperatorAction): string {
  // validate on the way out too; a malformed action must never hit the wire
  return JSON.stringify(operatorAction.parse(action)) + "\n";
}
