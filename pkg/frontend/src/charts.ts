/** Pure SVG chart builders.
 *
 * Every plotted number comes from a service response field; these functions
 * only scale and draw.  Pure string output keeps rendering deterministic and
 * snapshot-testable.
 */

import { GRADE_BANDS } from "./types.js";

const W = 560;
const H = 300;
const PAD = { left: 52, right: 14, top: 12, bottom: 34 };

const GRADE_FILL: Record<number, string> = {
  0: "#eef4ff",
  1: "#e8f7e8",
  2: "#fdf6dd",
  3: "#fdead2",
  4: "#fbdddd",
};

function fmt(x: number): string {
  return Number.isInteger(x) ? String(x) : x.toFixed(2);
}

interface Scale {
  (v: number): number;
}

function linScale(lo: number, hi: number, outLo: number, outHi: number): Scale {
  const span = hi - lo || 1;
  return (v) => outLo + ((v - lo) / span) * (outHi - outLo);
}

function logScale(lo: number, hi: number, outLo: number, outHi: number): Scale {
  const llo = Math.log10(lo);
  const span = Math.log10(hi) - llo || 1;
  return (v) => outLo + ((Math.log10(Math.max(v, lo)) - llo) / span) * (outHi - outLo);
}

function polyline(
  xs: readonly number[],
  ys: readonly number[],
  sx: Scale,
  sy: Scale,
): string {
  return xs.map((x, i) => `${sx(x).toFixed(1)},${sy(ys[i]!).toFixed(1)}`).join(" ");
}

/** Neutrophil time course: log-scale axis, CTCAE grade bands shaded,
 * posterior percentile fan, observed points, and nadir markers. */
export function neutrophilChart(series: {
  bandTimesH: number[];
  p5: number[];
  p50: number[];
  p95: number[];
  observations: Array<{ time_h: number; value: number }>;
}): string {
  const yLo = 0.1;
  const yHi = 30;
  const tMax = Math.max(
    series.bandTimesH[series.bandTimesH.length - 1] ?? 504,
    ...series.observations.map((o) => o.time_h),
    504,
  );
  const sx = linScale(0, tMax, PAD.left, W - PAD.right);
  const sy = logScale(yLo, yHi, H - PAD.bottom, PAD.top);

  const bands = GRADE_BANDS.map((b) => {
    const top = sy(Math.min(b.hi, yHi));
    const bottom = sy(Math.max(b.lo, yLo));
    return `<rect x="${PAD.left}" y="${top.toFixed(1)}" width="${W - PAD.left - PAD.right}" height="${(bottom - top).toFixed(1)}" fill="${GRADE_FILL[b.grade]}" data-grade="${b.grade}"/>`;
  }).join("");

  let fan = "";
  if (series.bandTimesH.length > 1) {
    const upper = polyline(series.bandTimesH, series.p95, sx, sy);
    const lowerPts = [...series.bandTimesH].reverse().map((t, i) => {
      const v = series.p5[series.p5.length - 1 - i]!;
      return `${sx(t).toFixed(1)},${sy(v).toFixed(1)}`;
    });
    fan =
      `<polygon points="${upper} ${lowerPts.join(" ")}" fill="#7aa6d855" stroke="none"/>` +
      `<polyline points="${polyline(series.bandTimesH, series.p50, sx, sy)}" fill="none" stroke="#2b6cb0" stroke-width="1.6"/>`;
  }

  const dots = series.observations
    .map(
      (o) =>
        `<circle cx="${sx(o.time_h).toFixed(1)}" cy="${sy(o.value).toFixed(1)}" r="3.4" fill="#1a202c" data-obs="${fmt(o.value)}"/>`,
    )
    .join("");

  const yticks = [0.1, 0.5, 1, 2, 5, 10, 20]
    .map((v) => {
      const y = sy(v).toFixed(1);
      return (
        `<line x1="${PAD.left - 4}" x2="${PAD.left}" y1="${y}" y2="${y}" stroke="#555"/>` +
        `<text x="${PAD.left - 7}" y="${y}" text-anchor="end" dominant-baseline="middle" font-size="10">${fmt(v)}</text>`
      );
    })
    .join("");
  const xticks = Array.from({ length: Math.floor(tMax / 504) + 1 }, (_, c) => c * 504)
    .map((t) => {
      const x = sx(t).toFixed(1);
      return (
        `<line x1="${x}" x2="${x}" y1="${H - PAD.bottom}" y2="${H - PAD.bottom + 4}" stroke="#555"/>` +
        `<text x="${x}" y="${H - PAD.bottom + 15}" text-anchor="middle" font-size="10">d${t / 24}</text>`
      );
    })
    .join("");

  return (
    `<svg viewBox="0 0 ${W} ${H}" class="chart" role="img" aria-label="neutrophil concentration, 1e9 cells/L, log scale">` +
    bands +
    fan +
    dots +
    yticks +
    xticks +
    `<text x="14" y="${H / 2}" transform="rotate(-90 14 ${H / 2})" text-anchor="middle" font-size="10">ANC [1e9 cells/L]</text>` +
    `</svg>`
  );
}

/** Risk-vs-dose curve (DA objective) with the chosen dose marked. */
export function riskChart(
  dosesMgm2: number[],
  risk: number[],
  chosenMgm2?: number,
): string {
  const sx = linScale(dosesMgm2[0] ?? 60, dosesMgm2[dosesMgm2.length - 1] ?? 250, PAD.left, W - PAD.right);
  const hi = Math.max(...risk, 0.01);
  const sy = linScale(0, hi, H - PAD.bottom, PAD.top);
  const marker =
    chosenMgm2 !== undefined
      ? `<line x1="${sx(chosenMgm2).toFixed(1)}" x2="${sx(chosenMgm2).toFixed(1)}" y1="${PAD.top}" y2="${H - PAD.bottom}" stroke="#c53030" stroke-dasharray="4 3" data-chosen="${fmt(chosenMgm2)}"/>`
      : "";
  return (
    `<svg viewBox="0 0 ${W} ${H}" class="chart" role="img" aria-label="weighted grade-0/4 risk across the dose range">` +
    `<polyline points="${polyline(dosesMgm2, risk, sx, sy)}" fill="none" stroke="#805ad5" stroke-width="1.8"/>` +
    marker +
    axisLabels("dose [mg/m2]", "risk") +
    `</svg>`
  );
}

/** Expected long-term return (q row) vs dose, with visit histogram. */
export function qChart(
  dosesMgm2: number[],
  q: number[],
  visits?: number[],
  chosenMgm2?: number,
): string {
  const sx = linScale(dosesMgm2[0] ?? 60, dosesMgm2[dosesMgm2.length - 1] ?? 250, PAD.left, W - PAD.right);
  const lo = Math.min(...q, -0.1);
  const hi = Math.max(...q, 0.1);
  const sy = linScale(lo, hi, H - PAD.bottom, PAD.top);
  let bars = "";
  if (visits && visits.length === dosesMgm2.length) {
    const vMax = Math.max(...visits, 1);
    bars = visits
      .map((v, i) => {
        const h = (v / vMax) * (H - PAD.top - PAD.bottom) * 0.35;
        const x = sx(dosesMgm2[i]!) - 2;
        return `<rect x="${x.toFixed(1)}" y="${(H - PAD.bottom - h).toFixed(1)}" width="4" height="${h.toFixed(1)}" fill="#b2c5e2" data-visits="${v}"/>`;
      })
      .join("");
  }
  const marker =
    chosenMgm2 !== undefined
      ? `<line x1="${sx(chosenMgm2).toFixed(1)}" x2="${sx(chosenMgm2).toFixed(1)}" y1="${PAD.top}" y2="${H - PAD.bottom}" stroke="#c53030" stroke-dasharray="4 3"/>`
      : "";
  return (
    `<svg viewBox="0 0 ${W} ${H}" class="chart" role="img" aria-label="expected long-term return across the dose range">` +
    bars +
    `<polyline points="${polyline(dosesMgm2, q, sx, sy)}" fill="none" stroke="#2f855a" stroke-width="1.8"/>` +
    marker +
    axisLabels("dose [mg/m2]", "q(s, d)") +
    `</svg>`
  );
}

function axisLabels(x: string, y: string): string {
  return (
    `<text x="${W / 2}" y="${H - 6}" text-anchor="middle" font-size="10">${x}</text>` +
    `<text x="14" y="${H / 2}" transform="rotate(-90 14 ${H / 2})" text-anchor="middle" font-size="10">${y}</text>`
  );
}
