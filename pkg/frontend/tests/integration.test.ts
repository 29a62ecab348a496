/**
 * Live integration: the console against a real serve instance.
 *
 * Spawns the Python service on an ephemeral port, completes a
 * scripted-fixture calibration of one key through the wizard, then streams
 * a simulated keystroke and checks the render loop keeps up (>= 10 display
 * updates per second) with the pluck feature marked near 5.5 mm.
 */

import { ChildProcess, spawn } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import WebSocket from "ws";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ConsoleState } from "../src/console.js";
import { SocketLike, WsTransport } from "../src/transport.js";

const REPO_ROOT = resolve(__dirname, "..", "..");
const PYTHON = process.env.KEYMOTION_PYTHON ?? "python3";

let server: ChildProcess | null = null;
let endpoint = "";

function run(cmd: string, args: string[], cwd: string): Promise<void> {
  return new Promise((resolvePromise, reject) => {
    const proc = spawn(cmd, args, { cwd, stdio: ["ignore", "pipe", "pipe"] });
    let err = "";
    proc.stderr!.on("data", (chunk) => (err += chunk));
    proc.on("exit", (code) =>
      code === 0 ? resolvePromise() : reject(new Error(`${cmd} failed: ${err}`)));
  });
}

async function until(cond: () => boolean, timeoutMs: number,
                     label: string): Promise<void> {
  const t0 = Date.now();
  while (!cond()) {
    if (Date.now() - t0 > timeoutMs) throw new Error(`timeout: ${label}`);
    await new Promise((r) => setTimeout(r, 10));
  }
}

const wsFactory = (url: string) =>
  new WebSocket(url) as unknown as SocketLike;

beforeAll(async () => {
  const work = mkdtempSync(join(tmpdir(), "keymotion-console-"));
  await run(PYTHON, ["-m", "keymotion.cli", "init", "--out", work,
                     "--manuals", "1", "--keys", "8"], REPO_ROOT);
  const session = join(work, "session.json");
  server = spawn(
    PYTHON,
    ["-m", "keymotion.cli", "serve", "--session", session,
     "--bind", "127.0.0.1:0", "--seed", "3", "--pace", "2.0"],
    { cwd: REPO_ROOT, stdio: ["ignore", "pipe", "pipe"] },
  );
  endpoint = await new Promise<string>((resolvePromise, reject) => {
    const timer = setTimeout(
      () => reject(new Error("serve did not start")), 30_000);
    let out = "";
    server!.stdout!.on("data", (chunk) => {
      out += chunk;
      const match = out.match(/listening on (ws:\/\/[\d.]+:\d+)/);
      if (match) {
        clearTimeout(timer);
        resolvePromise(match[1]);
      }
    });
    server!.stderr!.on("data", () => undefined);
    server!.on("exit", () => reject(new Error(`serve exited: ${out}`)));
  });
}, 60_000);

afterAll(() => {
  server?.kill();
});

describe("console against a live serve instance", () => {
  it("completes a fixture calibration and renders the live trace", async () => {
    const state = new ConsoleState();
    const transport = await WsTransport.connect(endpoint, wsFactory);
    state.attach(transport);
    await until(() => state.status !== null, 10_000, "initial status");
    expect(state.boards.map((b) => b.address)).toEqual([1]);
    expect(state.status!.detection.on_window_mm[1]).toBeCloseTo(5.5);

    // -- scripted-fixture wizard on key (1, 3) ------------------------------
    const wizard = state.wizard;
    state.selectKey(1, 3);
    wizard.begin(1, 3);
    await until(() => wizard.phase === "capture_rest", 10_000, "begin ack");
    wizard.captureRest(true);
    await until(() => wizard.phase === "capture_full", 20_000, "rest capture");
    wizard.captureFull(true);
    await until(() => wizard.phase === "capture_anchor", 20_000, "full capture");
    wizard.captureAnchor(4.5, true);
    await until(() => wizard.anchors.length === 1, 20_000, "anchor capture");
    wizard.finishAnchors();
    wizard.commit();
    await until(() => wizard.committedSensor !== null, 20_000, "commit ack");

    // the host produced a valid calibration entry for that key's sensor
    expect(wizard.committedSensor).toBe(2); // manual 1, key 3 -> sensor id 2
    await until(() => state.calibEntries.length === 1, 10_000, "entry broadcast");
    const entry = state.calibEntries[0];
    expect(entry.sensor).toBe(2);
    expect(entry.raw_rest).not.toBe(entry.raw_full);
    expect(entry.travel_mm).toBeCloseTo(9.0);
    expect(entry.anchors.length).toBe(1);
    expect(state.wizard.phase).toBe("idle");

    // -- stream the key and measure display updates -------------------------
    state.requestStream([[1, 3]]);
    state.refreshStatus();
    await until(() => state.status?.mode === "position_stream", 10_000,
                "stream mode");
    state.send({ type: "inject_gesture", manual: 1, key: 3,
                 request_id: state.nextId() });

    let lastSvg = "";
    const renderBefore = state.renderCount;
    const ticker = setInterval(() => {
      const svg = state.tick();
      if (svg !== null) lastSvg = svg;
    }, 40); // 25 Hz tick; redraws happen only when data arrived
    try {
      await until(
        () => lastSvg.includes("pluck-marker"), 20_000, "pluck marker drawn");
      const t0 = Date.now();
      const count0 = state.renderCount;
      await new Promise((r) => setTimeout(r, 1_000));
      const rate = (state.renderCount - count0) / ((Date.now() - t0) / 1000);
      expect(rate).toBeGreaterThanOrEqual(10);
    } finally {
      clearInterval(ticker);
    }
    expect(state.renderCount).toBeGreaterThan(renderBefore);
    expect(lastSvg).toContain("trace-line");
    expect(lastSvg).toContain("pluck-marker");

    // thin-client check: session state only changed through host commands;
    // the console's own record of it came exclusively from broadcasts
    state.refreshStatus();
    await until(() => (state.status?.calibrated_sensors ?? 0) >= 1, 10_000,
                "status reflects calibration");
    transport.close();
  }, 120_000);
});
