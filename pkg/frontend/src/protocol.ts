// Wire types for the live bridge protocol (newline-delimited JSON messages,
// carried one-per-WebSocket-frame by the server). Unknown fields are ignored
// on both sides.

export interface ActiveInstruction {
  class_id: number;
  phrase: string;
}

export interface FrameMsg {
  type: "frame";
  session_id: string;
  t: number;
  grid: string[][];
  agents: Array<{ id: number; x: number; y: number; macro?: string }>;
  items?: Array<Record<string, unknown>>;
  macros: string[];
  active_instruction: ActiveInstruction;
  return_so_far: number;
  status: string;
  compliance: { issued: number; followed: number };
}

export interface AckMsg {
  type: "ack";
  event?: string;
  session_id?: string;
  class_id?: number;
  class_name?: string;
  unrecognized?: boolean;
  at_step?: number;
  status?: string;
  command?: string;
  registry?: Array<{
    class_id: number;
    name: string;
    phrases: string[];
  }>;
}

export interface ErrorMsg {
  type: "error";
  code: string;
  message: string;
}

export type ServerMsg = FrameMsg | AckMsg | ErrorMsg;

// Parse a transport chunk that may hold several newline-separated JSON
// messages; invalid lines are reported, not thrown, so one bad frame never
// kills the stream.
export function parseChunk(
  chunk: string,
  onError?: (raw: string) => void,
): ServerMsg[] {
  const out: ServerMsg[] = [];
  for (const line of chunk.split("\n")) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    try {
      const msg = JSON.parse(trimmed);
      if (msg && typeof msg.type === "string") {
        out.push(msg as ServerMsg);
      } else if (onError) {
        onError(trimmed);
      }
    } catch {
      if (onError) onError(trimmed);
    }
  }
  return out;
}

export function openMsg(checkpoint: string, seed: number, tickRate = 4): string {
  return JSON.stringify({
    type: "open",
    checkpoint,
    seed,
    tick_rate: tickRate,
  });
}

export function injectMsg(phrase: string): string {
  return JSON.stringify({ type: "inject", phrase });
}

export function controlMsg(command: string): string {
  return JSON.stringify({ type: "control", command });
}
