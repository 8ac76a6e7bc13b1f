// @vitest-environment jsdom

import { describe, expect, it, vi } from "vitest";
import { BridgeClient } from "../src/client";
import { controlMsg, injectMsg, openMsg, parseChunk } from "../src/protocol";

describe("parseChunk", () => {
  it("splits newline-delimited messages", () => {
    const msgs = parseChunk(
      '{"type":"ack","event":"open"}\n{"type":"frame","t":0}\n',
    );
    expect(msgs.map((m) => m.type)).toEqual(["ack", "frame"]);
  });

  it("drops malformed lines without throwing, keeps good ones", () => {
    const bad: string[] = [];
    const msgs = parseChunk('not json\n{"type":"frame","t":1}', (raw) =>
      bad.push(raw),
    );
    expect(msgs.length).toBe(1);
    expect(bad).toEqual(["not json"]);
  });

  it("ignores blank lines and non-typed objects", () => {
    const bad: string[] = [];
    const msgs = parseChunk('\n\n{"no_type":1}\n', (raw) => bad.push(raw));
    expect(msgs).toEqual([]);
    expect(bad.length).toBe(1);
  });
});

describe("protocol builders", () => {
  it("open message is snake_case", () => {
    const msg = JSON.parse(openMsg("/ckpt.json", 3, 8));
    expect(msg).toEqual({
      type: "open",
      checkpoint: "/ckpt.json",
      seed: 3,
      tick_rate: 8,
    });
  });

  it("inject and control messages", () => {
    expect(JSON.parse(injectMsg("go left"))).toEqual({
      type: "inject",
      phrase: "go left",
    });
    expect(JSON.parse(controlMsg("pause"))).toEqual({
      type: "control",
      command: "pause",
    });
  });
});

class FakeSocket {
  static instances: FakeSocket[] = [];
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  sent: string[] = [];
  readyState = WebSocket.OPEN;

  constructor(public url: string) {
    FakeSocket.instances.push(this);
  }

  send(payload: string) {
    this.sent.push(payload);
  }

  close() {
    this.onclose?.();
  }
}

describe("BridgeClient", () => {
  it("opens a session on connect and dispatches messages", () => {
    FakeSocket.instances = [];
    const received: string[] = [];
    const statuses: string[] = [];
    const client = new BridgeClient(
      {
        url: "ws://x",
        checkpoint: "/ckpt.json",
        seed: 0,
        makeSocket: (u) => new FakeSocket(u) as unknown as WebSocket,
      },
      {
        onMessage: (m) => received.push(m.type),
        onStatus: (s) => statuses.push(s),
      },
    );
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.onopen?.();
    expect(JSON.parse(sock.sent[0]).type).toBe("open");
    sock.onmessage?.({ data: '{"type":"frame","t":0}' });
    expect(received).toEqual(["frame"]);
    expect(statuses).toEqual(["connecting", "open"]);
  });

  it("reconnects after close with a visible status", async () => {
    vi.useFakeTimers();
    FakeSocket.instances = [];
    const statuses: string[] = [];
    const client = new BridgeClient(
      {
        url: "ws://x",
        checkpoint: "/c.json",
        seed: 0,
        reconnectDelayMs: 10,
        makeSocket: (u) => new FakeSocket(u) as unknown as WebSocket,
      },
      { onMessage: () => {}, onStatus: (s) => statuses.push(s) },
    );
    client.connect();
    FakeSocket.instances[0].onclose?.();
    expect(statuses).toContain("reconnecting");
    vi.advanceTimersByTime(20);
    expect(FakeSocket.instances.length).toBe(2);
    vi.useRealTimers();
  });

  it("intentional close does not reconnect", () => {
    vi.useFakeTimers();
    FakeSocket.instances = [];
    const client = new BridgeClient(
      {
        url: "ws://x",
        checkpoint: "/c.json",
        seed: 0,
        reconnectDelayMs: 5,
        makeSocket: (u) => new FakeSocket(u) as unknown as WebSocket,
      },
      { onMessage: () => {}, onStatus: () => {} },
    );
    client.connect();
    client.close();
    vi.advanceTimersByTime(50);
    expect(FakeSocket.instances.length).toBe(1);
    vi.useRealTimers();
  });
});
