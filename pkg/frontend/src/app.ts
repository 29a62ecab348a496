/**
 * Browser entry: wires the console state to a small operator page.
 *
 * Connect to a serve endpoint, pick a key, run the calibration wizard
 * (fixture captures in simulation, hand-held captures on an instrument),
 * and watch the live trace panel.
 */

import { ConsoleState } from "./console.js";
import { WsTransport } from "./transport.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function fmtBoards(state: ConsoleState): string {
  if (!state.status) return "(no status yet)";
  const rows = state.boards
    .map((b) => `#${b.address} ${b.board_id} (${b.sensor_count} sensors)`)
    .join(", ");
  return `${rows}; mode ${state.mode}, ` +
    `${state.status.calibrated_sensors} calibrated`;
}

async function main(): Promise<void> {
  const state = new ConsoleState();
  const status = el<HTMLDivElement>("status-line");
  const wizardBox = el<HTMLDivElement>("wizard-state");
  const tracePanel = el<HTMLDivElement>("trace-panel");

  el<HTMLButtonElement>("connect").addEventListener("click", async () => {
    const url = el<HTMLInputElement>("endpoint").value;
    status.textContent = `connecting to ${url}…`;
    const transport = await WsTransport.connect(url, (u) => new WebSocket(u));
    state.attach(transport);
    status.textContent = `connected to ${url}`;
  });

  const selected = (): [number, number] => [
    Number(el<HTMLInputElement>("manual").value),
    Number(el<HTMLInputElement>("key").value),
  ];

  el<HTMLButtonElement>("wizard-begin").addEventListener("click", () => {
    const [manual, key] = selected();
    state.selectKey(manual, key);
    state.wizard.begin(manual, key);
  });
  const fixture = () => el<HTMLInputElement>("use-fixture").checked;
  el<HTMLButtonElement>("wizard-rest").addEventListener("click", () =>
    state.wizard.captureRest(fixture()));
  el<HTMLButtonElement>("wizard-full").addEventListener("click", () =>
    state.wizard.captureFull(fixture()));
  el<HTMLButtonElement>("wizard-anchor").addEventListener("click", () =>
    state.wizard.captureAnchor(
      Number(el<HTMLInputElement>("anchor-mm").value), fixture()));
  el<HTMLButtonElement>("wizard-done-anchors").addEventListener("click", () =>
    state.wizard.finishAnchors());
  el<HTMLButtonElement>("wizard-commit").addEventListener("click", () =>
    state.wizard.commit());
  el<HTMLButtonElement>("wizard-abort").addEventListener("click", () =>
    state.wizard.abort());

  el<HTMLButtonElement>("mode-stream").addEventListener("click", () => {
    state.selectKey(...selected() as [number, number]);
    state.requestStream([selected()]);
    setTimeout(() => state.refreshStatus(), 300);
  });
  el<HTMLButtonElement>("mode-midi").addEventListener("click", () => {
    state.requestMidiMode();
    setTimeout(() => state.refreshStatus(), 300);
  });
  el<HTMLButtonElement>("demo-gesture").addEventListener("click", () => {
    const [manual, key] = selected();
    state.send({ type: "inject_gesture", manual, key,
                 request_id: state.nextId() });
  });

  // 20 Hz render loop; tick() only redraws when something changed
  setInterval(() => {
    const svg = state.tick();
    if (svg !== null) tracePanel.innerHTML = svg;
    status.textContent = `${state.connection}: ${fmtBoards(state)}`;
    const w = state.wizard.snapshot();
    wizardBox.textContent =
      `wizard: ${w.phase}${w.busy ? " (waiting)" : ""}` +
      (w.lastError ? `; ${w.lastError}` : "") +
      (w.committedSensor !== null
        ? `; committed sensor ${w.committedSensor}`
        : "");
  }, 50);
}

window.addEventListener("load", () => {
  main().catch((err) => {
    console.error(err);
    const status = document.getElementById("status-line");
    if (status) status.textContent = String(err);
  });
});
