import { describe, expect, it } from "vitest";

import { ClientMessage, ServerMessage } from "../src/protocol.js";
import { CalibrationWizard } from "../src/wizard.js";

function harness() {
  const sent: ClientMessage[] = [];
  let n = 0;
  const wizard = new CalibrationWizard((msg) => sent.push(msg), () => `id-${n++}`);
  const lastId = () => (sent[sent.length - 1] as { request_id?: string }).request_id!;
  const ack = (extra: Record<string, unknown> = {}) =>
    wizard.handle({ type: "ack", request_id: lastId(), ...extra } as ServerMessage);
  const nack = (reason: string) =>
    wizard.handle({ type: "nack", request_id: lastId(), reason } as ServerMessage);
  return { wizard, sent, ack, nack, lastId };
}

describe("calibration wizard", () => {
  it("walks the happy path idle→rest→full→anchor→confirm→idle", () => {
    const { wizard, sent, ack } = harness();
    expect(wizard.phase).toBe("idle");

    wizard.begin(1, 3);
    expect(sent.at(-1)).toMatchObject({ type: "calib_begin", manual: 1, key: 3 });
    expect(wizard.phase).toBe("idle"); // not yet acknowledged
    ack();
    expect(wizard.phase).toBe("capture_rest");

    wizard.captureRest(true);
    expect(sent.at(-1)).toMatchObject({
      type: "calib_capture", phase: "rest", fixture: true,
    });
    ack({ median: 3500 });
    expect(wizard.phase).toBe("capture_full");
    expect(wizard.restMedian).toBe(3500);

    wizard.captureFull(true);
    ack({ median: 800 });
    expect(wizard.phase).toBe("capture_anchor");

    wizard.captureAnchor(4.5, true);
    expect(sent.at(-1)).toMatchObject({ phase: "anchor", position_mm: 4.5 });
    ack({ median: 2000 });
    expect(wizard.phase).toBe("capture_anchor"); // more anchors allowed

    wizard.finishAnchors();
    expect(wizard.phase).toBe("confirm");

    wizard.commit();
    ack({ sensor: 2 });
    expect(wizard.phase).toBe("idle");
    expect(wizard.committedSensor).toBe(2);
  });

  it("span rejection returns to capture_full with the reason shown", () => {
    const { wizard, ack, nack } = harness();
    wizard.begin(1, 1);
    ack();
    wizard.captureRest(true);
    ack({ median: 1000 });
    wizard.captureFull(false); // key never actually moved
    ack({ median: 1001 });
    wizard.finishAnchors();
    wizard.commit();
    nack("sensor 0: capture span 1.0 counts too small");
    expect(wizard.phase).toBe("capture_full");
    expect(wizard.lastError).toContain("span");
  });

  it("reuses the commit request id on retry (idempotent commit)", () => {
    const { wizard, sent, ack, lastId } = harness();
    wizard.begin(1, 1);
    ack();
    wizard.captureRest(true);
    ack({ median: 3000 });
    wizard.captureFull(true);
    ack({ median: 500 });
    wizard.finishAnchors();

    wizard.commit();
    const firstCommitId = lastId();
    // no reply (connection hiccup); operator retries from confirm
    wizard.handle({ type: "nack", request_id: "unrelated", reason: "x" });
    expect(wizard.phase).toBe("confirm");
    (wizard as unknown as { pending: Map<string, unknown> });
    wizard["pending"].clear(); // simulate the lost reply
    wizard.commit();
    expect(lastId()).toBe(firstCommitId);
    expect(sent.filter((m) => m.type === "calib_commit").length).toBe(2);
  });

  it("aborting discards and returns to idle", () => {
    const { wizard, sent, ack } = harness();
    wizard.begin(2, 10);
    ack();
    wizard.captureRest(true);
    ack({ median: 3200 });
    wizard.abort();
    expect(sent.at(-1)!.type).toBe("calib_abort");
    expect(wizard.phase).toBe("idle");
    expect(wizard.key).toBeNull();
  });

  it("disconnect mid-wizard aborts safely", () => {
    const { wizard, ack } = harness();
    wizard.begin(1, 5);
    ack();
    wizard.captureRest(true);
    wizard.onDisconnect();
    expect(wizard.phase).toBe("idle");
    expect(wizard.lastError).toContain("disconnected");
  });

  it("refuses out-of-order steps", () => {
    const { wizard, ack } = harness();
    expect(() => wizard.captureRest()).toThrow(/expected capture_rest/);
    wizard.begin(1, 1);
    ack();
    expect(() => wizard.commit()).toThrow(/expected confirm/);
    expect(() => wizard.begin(1, 2)).toThrow(/expected idle/);
  });
});
