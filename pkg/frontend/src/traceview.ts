/**
 * Live key-motion trace rendering: displacement vs. time as an SVG string.
 *
 * The vertical scale is fixed (0..travel mm, matching the shared-axis
 * convention of bench traces) so different keys and sessions compare
 * directly. Host-configured detection window edges are drawn as dashed
 * guides and upward crossings of the pluck edge are marked; the view only
 * displays host thresholds, it never computes detection itself.
 */

import { TraceBuffer } from "./ringbuffer.js";
import { KeyEventMessage } from "./protocol.js";

export interface TraceViewOptions {
  travelMm: number;
  spanS: number;
  onWindowMm?: [number, number];
  width?: number;
  height?: number;
  staleS?: number | null;
  disabledReason?: string | null;
  events?: KeyEventMessage[];
  title?: string;
}

const MARGIN = { left: 42, right: 10, top: 18, bottom: 22 };

export function renderTrace(buffer: TraceBuffer, opts: TraceViewOptions): string {
  const width = opts.width ?? 640;
  const height = opts.height ?? 240;
  const plotW = width - MARGIN.left - MARGIN.right;
  const plotH = height - MARGIN.top - MARGIN.bottom;
  const travel = opts.travelMm;
  const yLo = -1.0;
  const yHi = travel + 1.0;

  const points = buffer.toArray();
  const tEnd = points.length ? points[points.length - 1].t_s : 0;
  const tStart = tEnd - opts.spanS;

  const x = (t: number) =>
    MARGIN.left + ((t - tStart) / opts.spanS) * plotW;
  const y = (mm: number) =>
    MARGIN.top + (1 - (mm - yLo) / (yHi - yLo)) * plotH;

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" ` +
    `height="${height}" viewBox="0 0 ${width} ${height}" class="trace-view">`,
  );
  parts.push(
    `<rect x="0" y="0" width="${width}" height="${height}" fill="#fdfdfb"/>`,
  );
  if (opts.title) {
    parts.push(
      `<text x="${MARGIN.left}" y="12" font-size="11" fill="#333">` +
      `${escapeXml(opts.title)}</text>`,
    );
  }

  // fixed displacement gridlines every 3 mm plus the travel rails
  for (const mm of [0, 3, 6, 9].filter((v) => v <= travel)) {
    parts.push(
      `<line x1="${MARGIN.left}" y1="${y(mm)}" x2="${width - MARGIN.right}" ` +
      `y2="${y(mm)}" stroke="#e0e0d8" stroke-width="1"/>`,
    );
    parts.push(
      `<text x="4" y="${y(mm) + 3}" font-size="10" fill="#666">${mm} mm</text>`,
    );
  }

  // host detection window edges (displayed, not computed here)
  if (opts.onWindowMm) {
    for (const edge of opts.onWindowMm) {
      parts.push(
        `<line class="window-edge" x1="${MARGIN.left}" y1="${y(edge)}" ` +
        `x2="${width - MARGIN.right}" y2="${y(edge)}" stroke="#b8860b" ` +
        `stroke-width="1" stroke-dasharray="5,4"/>`,
      );
    }
  }

  if (opts.disabledReason) {
    parts.push(
      `<text class="panel-disabled" x="${width / 2}" y="${height / 2}" ` +
      `font-size="13" fill="#888" text-anchor="middle">` +
      `${escapeXml(opts.disabledReason)}</text>`,
    );
    parts.push("</svg>");
    return parts.join("");
  }

  if (points.length >= 2) {
    const path = points
      .filter((p) => p.t_s >= tStart)
      .map((p) => `${x(p.t_s).toFixed(1)},${y(p.mm).toFixed(1)}`)
      .join(" ");
    parts.push(
      `<polyline class="trace-line" points="${path}" fill="none" ` +
      `stroke="#2b5d8a" stroke-width="1.4"/>`,
    );

    // mark upward crossings of the pluck edge (on-window top)
    if (opts.onWindowMm) {
      const edge = opts.onWindowMm[1];
      for (let i = 1; i < points.length; i++) {
        const a = points[i - 1];
        const b = points[i];
        if (a.mm < edge && b.mm >= edge && b.t_s >= tStart) {
          const frac = (edge - a.mm) / (b.mm - a.mm);
          const tCross = a.t_s + frac * (b.t_s - a.t_s);
          parts.push(
            `<circle class="pluck-marker" cx="${x(tCross).toFixed(1)}" ` +
            `cy="${y(edge).toFixed(1)}" r="5" fill="none" ` +
            `stroke="#c23b22" stroke-width="1.6"/>`,
          );
        }
      }
    }
  }

  // detected key events from the host, when any are known for this key
  for (const ev of opts.events ?? []) {
    if (ev.t_s < tStart || ev.t_s > tEnd) continue;
    const glyph = ev.kind === "note_on" ? "▲" : "▽";
    parts.push(
      `<text class="event-marker" x="${x(ev.t_s).toFixed(1)}" ` +
      `y="${MARGIN.top + 10}" font-size="10" fill="#c23b22" ` +
      `text-anchor="middle">${glyph}${ev.velocity}</text>`,
    );
  }

  if (opts.staleS != null && opts.staleS > 1.0) {
    parts.push(
      `<text class="stale-indicator" x="${width - MARGIN.right}" y="12" ` +
      `font-size="11" fill="#b03030" text-anchor="end">` +
      `stale (${opts.staleS.toFixed(1)} s)</text>`,
    );
  }

  parts.push("</svg>");
  return parts.join("");
}

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
