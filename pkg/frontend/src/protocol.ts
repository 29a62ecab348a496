/**
 * Message types for the keymotion streaming endpoint (see docs/api.md).
 *
 * Single JSON objects in both directions over one WebSocket. Requests carry
 * a client-generated request_id echoed on the matching ack/nack.
 */

export type HostMode = "midi" | "position_stream";

export interface BoardInfo {
  address: number;
  board_id: string;
  sensor_count: number;
}

export interface StatusMessage {
  type: "status";
  request_id?: string;
  clock_s: number;
  mode: HostMode;
  subset: number[];
  calibrated_sensors: number;
  boards: BoardInfo[];
  instrument: {
    manuals: number;
    keys_per_manual: number;
    travel_mm: number;
  };
  detection: {
    on_window_mm: [number, number];
    off_window_mm: [number, number];
    rearm_mm: number;
  };
}

export interface AckMessage {
  type: "ack";
  request_id?: string;
  [extra: string]: unknown;
}

export interface NackMessage {
  type: "nack";
  request_id?: string;
  reason: string;
}

export interface PositionMessage {
  type: "position";
  sensor: number;
  manual: number;
  key: number;
  t_s: number;
  counts: number;
  mm?: number;
}

export interface KeyEventMessage {
  type: "key_event";
  kind: "note_on" | "note_off";
  manual: number;
  key: number;
  t_s: number;
  traversal_s: number;
  velocity: number;
}

export interface CalibEntryMessage {
  type: "calib_entry";
  sensor: number;
  raw_rest: number;
  raw_full: number;
  travel_mm: number;
  anchors: [number, number][];
  captured_at: number;
}

export type ServerMessage =
  | StatusMessage
  | AckMessage
  | NackMessage
  | PositionMessage
  | KeyEventMessage
  | CalibEntryMessage
  | { type: "pong"; request_id?: string };

export type CapturePhase = "rest" | "full" | "anchor";

export type ClientMessage =
  | { type: "ping"; request_id?: string }
  | { type: "status_req"; request_id?: string }
  | { type: "set_mode"; mode: "midi"; request_id?: string }
  | {
      type: "set_mode";
      mode: "position_stream";
      subset_keys: [number, number][];
      request_id?: string;
    }
  | { type: "calib_begin"; manual: number; key: number; request_id?: string }
  | {
      type: "calib_capture";
      phase: CapturePhase;
      fixture?: boolean;
      position_mm?: number;
      request_id?: string;
    }
  | { type: "calib_commit"; request_id?: string }
  | { type: "calib_abort"; request_id?: string }
  | {
      type: "inject_gesture";
      manual: number;
      key: number;
      press_duration_s?: number;
      request_id?: string;
    }
  | { type: "save_session"; request_id?: string };

export function parseServerMessage(raw: string): ServerMessage | null {
  let value: unknown;
  try {
    value = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof value !== "object" || value === null) return null;
  const type = (value as { type?: unknown }).type;
  if (typeof type !== "string") return null;
  return value as ServerMessage;
}

export function isAckFor(msg: ServerMessage, requestId: string): boolean {
  return (
    (msg.type === "ack" || msg.type === "nack" || msg.type === "status" ||
      msg.type === "pong") &&
    (msg as { request_id?: string }).request_id === requestId
  );
}
