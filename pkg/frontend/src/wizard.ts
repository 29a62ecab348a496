/**
 * Per-key calibration wizard: a thin state machine over the host protocol.
 *
 * Phases advance only along idle -> capture_rest -> capture_full ->
 * (capture_anchor)* -> confirm -> idle. Every confirm issues the matching
 * host command; a nack drops the wizard back to the failed phase with the
 * reason kept for display. All commands carry client-generated request ids
 * and the commit id is reused on retry, so a reconnect can never
 * double-commit a capture. The wizard itself never mutates session state;
 * only host commands do.
 */

import {
  AckMessage,
  ClientMessage,
  NackMessage,
  ServerMessage,
} from "./protocol.js";

export type WizardPhase =
  | "idle"
  | "capture_rest"
  | "capture_full"
  | "capture_anchor"
  | "confirm";

type Intent =
  | { kind: "begin" }
  | { kind: "capture"; phase: "rest" | "full" | "anchor"; position_mm?: number }
  | { kind: "commit" }
  | { kind: "abort" };

export interface WizardSnapshot {
  phase: WizardPhase;
  key: [number, number] | null;
  busy: boolean;
  lastError: string | null;
  restMedian: number | null;
  fullMedian: number | null;
  anchors: { position_mm: number; median: number }[];
  committedSensor: number | null;
}

export class CalibrationWizard {
  phase: WizardPhase = "idle";
  key: [number, number] | null = null;
  lastError: string | null = null;
  restMedian: number | null = null;
  fullMedian: number | null = null;
  anchors: { position_mm: number; median: number }[] = [];
  committedSensor: number | null = null;

  private send: (msg: ClientMessage) => void;
  private nextId: () => string;
  private pending = new Map<string, Intent>();
  private commitId: string | null = null;

  constructor(send: (msg: ClientMessage) => void, idGen?: () => string) {
    this.send = send;
    let counter = 0;
    this.nextId = idGen ?? (() => `wiz-${Date.now().toString(36)}-${counter++}`);
  }

  get busy(): boolean {
    return this.pending.size > 0;
  }

  snapshot(): WizardSnapshot {
    return {
      phase: this.phase,
      key: this.key,
      busy: this.busy,
      lastError: this.lastError,
      restMedian: this.restMedian,
      fullMedian: this.fullMedian,
      anchors: [...this.anchors],
      committedSensor: this.committedSensor,
    };
  }

  // -- operator actions -----------------------------------------------------

  begin(manual: number, key: number): void {
    this.requirePhase("idle");
    this.key = [manual, key];
    this.lastError = null;
    this.restMedian = null;
    this.fullMedian = null;
    this.anchors = [];
    this.committedSensor = null;
    this.request({ kind: "begin" }, {
      type: "calib_begin",
      manual,
      key,
    });
  }

  captureRest(fixture = false): void {
    this.requirePhase("capture_rest");
    this.request({ kind: "capture", phase: "rest" }, {
      type: "calib_capture",
      phase: "rest",
      fixture,
    });
  }

  captureFull(fixture = false): void {
    this.requirePhase("capture_full");
    this.request({ kind: "capture", phase: "full" }, {
      type: "calib_capture",
      phase: "full",
      fixture,
    });
  }

  captureAnchor(position_mm: number, fixture = false): void {
    this.requirePhase("capture_anchor");
    this.request({ kind: "capture", phase: "anchor", position_mm }, {
      type: "calib_capture",
      phase: "anchor",
      position_mm,
      fixture,
    });
  }

  /** Anchors are optional: skip ahead to the confirm step. */
  finishAnchors(): void {
    this.requirePhase("capture_anchor");
    this.phase = "confirm";
  }

  commit(): void {
    this.requirePhase("confirm");
    // Reuse the id on retry: the host treats a repeated commit id as already
    // done and acks again instead of double-committing.
    if (this.commitId === null) this.commitId = this.nextId();
    this.pending.set(this.commitId, { kind: "commit" });
    this.send({ type: "calib_commit", request_id: this.commitId });
  }

  abort(): void {
    if (this.phase === "idle") return;
    const id = this.nextId();
    this.pending.set(id, { kind: "abort" });
    this.send({ type: "calib_abort", request_id: id });
    this.reset();
  }

  /** Connection dropped: discard safely; the host discards its side too. */
  onDisconnect(): void {
    this.reset();
    this.lastError = "disconnected mid-wizard; capture discarded";
  }

  // -- protocol ---------------------------------------------------------------

  handle(msg: ServerMessage): boolean {
    if (msg.type !== "ack" && msg.type !== "nack") return false;
    const id = (msg as { request_id?: string }).request_id;
    if (!id || !this.pending.has(id)) return false;
    const intent = this.pending.get(id)!;
    this.pending.delete(id);
    if (msg.type === "ack") {
      this.applyAck(intent, msg);
    } else {
      this.applyNack(intent, msg);
    }
    return true;
  }

  private applyAck(intent: Intent, ack: AckMessage): void {
    this.lastError = null;
    switch (intent.kind) {
      case "begin":
        this.phase = "capture_rest";
        break;
      case "capture": {
        const median = typeof ack.median === "number" ? ack.median : NaN;
        if (intent.phase === "rest") {
          this.restMedian = median;
          this.phase = "capture_full";
        } else if (intent.phase === "full") {
          this.fullMedian = median;
          this.phase = "capture_anchor";
        } else {
          this.anchors.push({
            position_mm: intent.position_mm ?? NaN,
            median,
          });
          // stay in capture_anchor: the operator may jig more positions
        }
        break;
      }
      case "commit":
        this.committedSensor =
          typeof ack.sensor === "number" ? ack.sensor : null;
        this.reset();
        break;
      case "abort":
        break;
    }
  }

  private applyNack(intent: Intent, nack: NackMessage): void {
    this.lastError = nack.reason;
    switch (intent.kind) {
      case "begin":
        this.phase = "idle";
        break;
      case "capture":
        // stay at the failed capture phase so the operator can retry
        break;
      case "commit":
        // the usual rejection is an insufficient rest/full span: return to
        // the full-travel capture so it can be redone
        this.phase = "capture_full";
        this.commitId = null;
        break;
      case "abort":
        break;
    }
  }

  private request(intent: Intent, msg: ClientMessage): void {
    const id = this.nextId();
    this.pending.set(id, intent);
    this.send({ ...msg, request_id: id } as ClientMessage);
  }

  private requirePhase(expected: WizardPhase): void {
    if (this.phase !== expected) {
      throw new Error(`wizard is ${this.phase}, expected ${expected}`);
    }
    if (this.busy) {
      throw new Error("wizard is waiting for the host");
    }
  }

  private reset(): void {
    this.phase = "idle";
    this.key = null;
    this.pending.clear();
    this.commitId = null;
  }
}
