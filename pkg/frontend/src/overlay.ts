/**
 * Saliency overlay compositing, kept pure so it is testable without a DOM.
 *
 * The server sends a grayscale PNG; the console tints it and alpha-blends it
 * over the live frame.  Blending math lives here; the canvas layer just
 * uploads the result.
 */

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

/** Map a saliency value in [0, 1] to a tinted translucent pixel. */
export function tint(value: number, maxAlpha = 0.6): Rgba {
  const v = Math.min(1, Math.max(0, value));
  // warm tint: low saliency fades out entirely
  return { r: 255, g: Math.round(180 * (1 - v)), b: 0, a: v * maxAlpha };
}

/** Alpha-composite `over` onto `under` (both straight-alpha). */
export function composite(under: Rgba, over: Rgba): Rgba {
  const a = over.a + under.a * (1 - over.a);
  if (a === 0) return { r: 0, g: 0, b: 0, a: 0 };
  const mix = (o: number, u: number) =>
    (o * over.a + u * under.a * (1 - over.a)) / a;
  return {
    r: mix(over.r, under.r),
    g: mix(over.g, under.g),
    b: mix(over.b, under.b),
    a,
  };
}

/**
 * Blend a saliency field over a grayscale frame.  Both arrays are row-major
 * with values in [0, 1] and must be the same length.
 */
export function blendFrame(
  frame: Float64Array | number[],
  saliency: Float64Array | number[],
  maxAlpha = 0.6,
): Rgba[] {
  if (frame.length !== saliency.length) {
    throw new Error(
      `frame and saliency sizes differ: ${frame.length} vs ${saliency.length}`,
    );
  }
  const out: Rgba[] = new Array(frame.length);
  for (let i = 0; i < frame.length; i++) {
    const g = Math.round(255 * Math.min(1, Math.max(0, frame[i] ?? 0)));
    const base: Rgba = { r: g, g, b: g, a: 1 };
    out[i] = composite(base, tint(saliency[i] ?? 0, maxAlpha));
  }
  return out;
}
