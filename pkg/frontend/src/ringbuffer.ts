/**
 * Rolling trace buffer: keeps the last few seconds of (t, mm) samples for
 * one monitored sensor. Capacity is bounded by the configured span, so a
 * long session never grows the buffer.
 */

export interface TracePoint {
  t_s: number;
  mm: number;
}

export class TraceBuffer {
  readonly spanS: number;
  private points: TracePoint[] = [];

  constructor(spanS = 5.0) {
    this.spanS = spanS;
  }

  push(t_s: number, mm: number): void {
    this.points.push({ t_s, mm });
    const cutoff = t_s - this.spanS;
    // drop from the front; samples arrive in time order
    let drop = 0;
    while (drop < this.points.length && this.points[drop].t_s < cutoff) {
      drop += 1;
    }
    if (drop > 0) this.points = this.points.slice(drop);
  }

  latestT(): number | null {
    return this.points.length ? this.points[this.points.length - 1].t_s : null;
  }

  get length(): number {
    return this.points.length;
  }

  toArray(): readonly TracePoint[] {
    return this.points;
  }

  clear(): void {
    this.points = [];
  }
}
