// WebSocket client for the live bridge: opens a session, dispatches server
// messages, reconnects with a visible banner when the connection drops.

import { ServerMsg, parseChunk, openMsg } from "./protocol";

export interface ClientHandlers {
  onMessage: (msg: ServerMsg) => void;
  onStatus: (status: "connecting" | "open" | "reconnecting") => void;
}

export interface ClientOptions {
  url: string;
  checkpoint: string;
  seed: number;
  reconnectDelayMs?: number;
  makeSocket?: (url: string) => WebSocket;
}

export class BridgeClient {
  private ws: WebSocket | null = null;
  private closed = false;
  private readonly opts: ClientOptions;
  private readonly handlers: ClientHandlers;

  constructor(opts: ClientOptions, handlers: ClientHandlers) {
    this.opts = opts;
    this.handlers = handlers;
  }

  connect(): void {
    this.closed = false;
    this.handlers.onStatus("connecting");
    const make = this.opts.makeSocket ?? ((u: string) => new WebSocket(u));
    const ws = make(this.opts.url);
    this.ws = ws;
    ws.onopen = () => {
      this.handlers.onStatus("open");
      ws.send(openMsg(this.opts.checkpoint, this.opts.seed));
    };
    ws.onmessage = (ev: MessageEvent) => {
      for (const msg of parseChunk(String(ev.data), (raw) =>
        console.warn("[console] dropped malformed message:", raw.slice(0, 80)),
      )) {
        this.handlers.onMessage(msg);
      }
    };
    ws.onclose = () => {
      if (this.closed) return;
      this.handlers.onStatus("reconnecting");
      setTimeout(() => this.connect(), this.opts.reconnectDelayMs ?? 1000);
    };
    ws.onerror = () => {
      // close handler drives the reconnect
    };
  }

  send(payload: string): void {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(payload);
    }
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
