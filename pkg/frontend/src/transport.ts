/**
 * WebSocket transport with a pluggable socket factory, so the same client
 * code runs in the browser (native WebSocket) and under node tests (the
 * `ws` package).
 */

import { ClientMessage, ServerMessage, parseServerMessage } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(
    type: "open" | "close" | "error" | "message",
    listener: (event: { data?: unknown }) => void,
  ): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface Transport {
  send(msg: ClientMessage): void;
  onMessage(handler: (msg: ServerMessage) => void): void;
  onClose(handler: () => void): void;
  close(): void;
  readonly connected: boolean;
}

export class WsTransport implements Transport {
  private socket: SocketLike;
  private handlers: Array<(msg: ServerMessage) => void> = [];
  private closeHandlers: Array<() => void> = [];
  private open = false;

  private constructor(socket: SocketLike) {
    this.socket = socket;
  }

  static connect(
    url: string,
    factory: SocketFactory,
    timeoutMs = 10_000,
  ): Promise<WsTransport> {
    return new Promise((resolve, reject) => {
      const socket = factory(url);
      const transport = new WsTransport(socket);
      const timer = setTimeout(
        () => reject(new Error(`connect timeout: ${url}`)),
        timeoutMs,
      );
      socket.addEventListener("open", () => {
        clearTimeout(timer);
        transport.open = true;
        resolve(transport);
      });
      socket.addEventListener("error", () => {
        if (!transport.open) {
          clearTimeout(timer);
          reject(new Error(`connect failed: ${url}`));
        }
      });
      socket.addEventListener("close", () => {
        transport.open = false;
        for (const handler of transport.closeHandlers) handler();
      });
      socket.addEventListener("message", (event) => {
        const msg = parseServerMessage(String(event.data));
        if (msg !== null) {
          for (const handler of transport.handlers) handler(msg);
        }
      });
    });
  }

  get connected(): boolean {
    return this.open;
  }

  send(msg: ClientMessage): void {
    if (!this.open) throw new Error("transport is closed");
    this.socket.send(JSON.stringify(msg));
  }

  onMessage(handler: (msg: ServerMessage) => void): void {
    this.handlers.push(handler);
  }

  onClose(handler: () => void): void {
    this.closeHandlers.push(handler);
  }

  close(): void {
    this.open = false;
    this.socket.close();
  }
}
