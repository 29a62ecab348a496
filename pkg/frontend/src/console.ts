/**
 * Console state: one connection, one ordered event stream, thin-client rule.
 *
 * Everything the console shows comes from server messages; the only way it
 * changes session state is by sending host commands (wizard steps, mode
 * switches). Trace buffers hold the last few seconds per monitored sensor
 * and the render loop redraws at most once per tick, at least ten times a
 * second while data flows.
 */

import {
  BoardInfo,
  CalibEntryMessage,
  KeyEventMessage,
  ServerMessage,
  StatusMessage,
} from "./protocol.js";
import { TraceBuffer } from "./ringbuffer.js";
import { renderTrace } from "./traceview.js";
import { Transport } from "./transport.js";
import { CalibrationWizard } from "./wizard.js";

export type ConnectionState = "disconnected" | "connecting" | "connected";

const TRACE_SPAN_S = 5.0;

export class ConsoleState {
  connection: ConnectionState = "disconnected";
  status: StatusMessage | null = null;
  selectedKey: [number, number] | null = null;
  wizard: CalibrationWizard;
  calibEntries: CalibEntryMessage[] = [];
  recentEvents: KeyEventMessage[] = [];
  renderCount = 0;

  private transport: Transport | null = null;
  private buffers = new Map<number, TraceBuffer>();
  private lastPositionWallMs: number | null = null;
  private dirty = false;
  private lastStale = false;
  private requestCounter = 0;
  private now: () => number;

  constructor(now: () => number = () => Date.now()) {
    this.now = now;
    this.wizard = new CalibrationWizard((msg) => this.send(msg));
  }

  attach(transport: Transport): void {
    this.transport = transport;
    this.connection = "connected";
    transport.onMessage((msg) => this.handle(msg));
    transport.onClose(() => {
      this.connection = "disconnected";
      this.wizard.onDisconnect();
      this.dirty = true;
    });
    this.send({ type: "status_req", request_id: this.nextId() });
  }

  get boards(): BoardInfo[] {
    return this.status?.boards ?? [];
  }

  get mode(): string {
    return this.status?.mode ?? "unknown";
  }

  selectKey(manual: number, key: number): void {
    this.selectedKey = [manual, key];
  }

  send(msg: Parameters<Transport["send"]>[0]): void {
    if (!this.transport || this.connection !== "connected") {
      throw new Error("not connected");
    }
    this.transport.send(msg);
  }

  nextId(): string {
    return `con-${this.requestCounter++}`;
  }

  requestStream(keys: [number, number][]): void {
    this.send({
      type: "set_mode",
      mode: "position_stream",
      subset_keys: keys,
      request_id: this.nextId(),
    });
  }

  requestMidiMode(): void {
    this.send({ type: "set_mode", mode: "midi", request_id: this.nextId() });
  }

  refreshStatus(): void {
    this.send({ type: "status_req", request_id: this.nextId() });
  }

  // -- inbound ---------------------------------------------------------------

  handle(msg: ServerMessage): void {
    if (this.wizard.handle(msg)) {
      this.dirty = true;
      return;
    }
    switch (msg.type) {
      case "status":
        this.status = msg;
        this.dirty = true;
        break;
      case "position": {
        let buffer = this.buffers.get(msg.sensor);
        if (!buffer) {
          buffer = new TraceBuffer(TRACE_SPAN_S);
          this.buffers.set(msg.sensor, buffer);
        }
        if (typeof msg.mm === "number") {
          buffer.push(msg.t_s, msg.mm);
        }
        this.lastPositionWallMs = this.now();
        this.dirty = true;
        break;
      }
      case "key_event":
        this.recentEvents.push(msg);
        if (this.recentEvents.length > 256) {
          this.recentEvents = this.recentEvents.slice(-128);
        }
        this.dirty = true;
        break;
      case "calib_entry":
        this.calibEntries.push(msg);
        this.dirty = true;
        break;
      default:
        break;
    }
  }

  monitoredBuffer(): TraceBuffer | null {
    if (this.buffers.size === 0) return null;
    if (this.status && this.status.subset.length > 0) {
      const buffer = this.buffers.get(this.status.subset[0]);
      if (buffer) return buffer;
    }
    return this.buffers.values().next().value ?? null;
  }

  staleS(): number | null {
    if (this.lastPositionWallMs === null) return null;
    return (this.now() - this.lastPositionWallMs) / 1000;
  }

  /**
   * Render tick: returns a fresh SVG when there is something new to draw
   * (new samples, state changes, or a staleness flip), null otherwise.
   * Call at 10 Hz or faster; with a 250 Hz stream every tick redraws.
   */
  tick(): string | null {
    const stale = (this.staleS() ?? Infinity) > 1.0;
    if (!this.dirty && stale === this.lastStale) return null;
    this.dirty = false;
    this.lastStale = stale;
    this.renderCount += 1;
    return this.renderTracePanel();
  }

  renderTracePanel(): string {
    const travel = this.status?.instrument.travel_mm ?? 9.0;
    const onWindow = this.status?.detection.on_window_mm;
    const buffer = this.monitoredBuffer() ?? new TraceBuffer(TRACE_SPAN_S);
    const midiMode = this.status !== null && this.status.mode === "midi";
    const key = this.selectedKey;
    const events = key
      ? this.recentEvents.filter(
          (ev) => ev.manual === key[0] && ev.key === key[1],
        )
      : [];
    return renderTrace(buffer, {
      travelMm: travel,
      spanS: TRACE_SPAN_S,
      onWindowMm: onWindow,
      staleS: this.staleS(),
      disabledReason: midiMode
        ? "trace panel disabled: host is in MIDI mode (switch to position streaming)"
        : null,
      events,
      title: key ? `manual ${key[0]}, key ${key[1]}` : "no key selected",
    });
  }
}
