// Console view: renders exactly the latest frame; every displayed metric is
// taken verbatim from server messages, never recomputed client-side.

import { AckMsg, ErrorMsg, FrameMsg } from "./protocol";

const CELL_COLORS: Record<string, string> = {
  ".": "#f4f4f4",
  corridor: "#ffd9a0",
  big_sink: "#9fd89f",
  small_sink: "#c4e3f3",
  trap: "#d3d3d3",
  start: "#ffffff",
  B: "#c77d3a",
  b: "#e2b07a",
};

export class ConsoleView {
  readonly root: HTMLElement;
  private grid: HTMLElement;
  private banner: HTMLElement;
  private statusLine: HTMLElement;
  private returnCounter: HTMLElement;
  private complianceCounter: HTMLElement;
  private macroList: HTMLElement;
  private ticker: HTMLElement;
  private quickButtons: HTMLElement;
  private connBanner: HTMLElement;
  private input: HTMLInputElement;
  private lastIssued = 0;
  private lastFollowed = 0;
  onSend: (phrase: string) => void = () => {};
  onControl: (command: string) => void = () => {};

  constructor(root: HTMLElement) {
    this.root = root;
    root.innerHTML = `
      <div class="conn-banner" data-id="conn" style="display:none">reconnecting…</div>
      <div class="banner" data-id="banner">no active instruction</div>
      <div class="status" data-id="status"></div>
      <div class="grid" data-id="grid"></div>
      <div class="macros" data-id="macros"></div>
      <div class="counters">
        return <span data-id="return">0</span> ·
        compliance <span data-id="compliance">0/0</span>
      </div>
      <div class="controls">
        <button data-cmd="play">play</button>
        <button data-cmd="pause">pause</button>
        <button data-cmd="step">step</button>
        <button data-cmd="reset">reset</button>
      </div>
      <form data-id="form">
        <input data-id="phrase" placeholder="type an instruction…" />
        <button type="submit">send</button>
      </form>
      <div class="quick" data-id="quick"></div>
      <ul class="ticker" data-id="ticker"></ul>
    `;
    const q = (id: string) => root.querySelector(`[data-id="${id}"]`) as HTMLElement;
    this.connBanner = q("conn");
    this.banner = q("banner");
    this.statusLine = q("status");
    this.grid = q("grid");
    this.macroList = q("macros");
    this.returnCounter = q("return");
    this.complianceCounter = q("compliance");
    this.ticker = q("ticker");
    this.quickButtons = q("quick");
    this.input = q("phrase") as HTMLInputElement;
    (q("form") as HTMLFormElement).addEventListener("submit", (ev) => {
      ev.preventDefault();
      this.onSend(this.input.value);
      this.input.value = "";
    });
    root.querySelectorAll("[data-cmd]").forEach((btn) => {
      btn.addEventListener("click", () =>
        this.onControl((btn as HTMLElement).dataset.cmd as string),
      );
    });
  }

  setConnection(status: "connecting" | "open" | "reconnecting"): void {
    this.connBanner.style.display = status === "open" ? "none" : "block";
    this.connBanner.textContent =
      status === "reconnecting" ? "connection lost — reconnecting…" : "connecting…";
  }

  renderRegistry(registry: NonNullable<AckMsg["registry"]>): void {
    this.quickButtons.innerHTML = "";
    for (const cls of registry) {
      if (cls.class_id === 0) continue;
      for (const phrase of cls.phrases.slice(0, 1)) {
        const btn = document.createElement("button");
        btn.textContent = phrase;
        btn.dataset.quick = phrase;
        btn.addEventListener("click", () => this.onSend(phrase));
        this.quickButtons.appendChild(btn);
      }
    }
  }

  renderFrame(frame: FrameMsg): void {
    this.grid.innerHTML = "";
    const agentAt = new Map<string, number>();
    frame.agents.forEach((a) => agentAt.set(`${a.x},${a.y}`, a.id));
    const table = document.createElement("table");
    frame.grid.forEach((row, y) => {
      const tr = document.createElement("tr");
      row.forEach((cell, x) => {
        const td = document.createElement("td");
        td.style.background = CELL_COLORS[cell] ?? "#eee";
        td.dataset.cell = cell;
        const agent = agentAt.get(`${x},${y}`);
        if (agent !== undefined) {
          td.textContent = `A${agent}`;
          td.dataset.agent = String(agent);
        }
        tr.appendChild(td);
      });
      table.appendChild(tr);
    });
    this.grid.appendChild(table);

    const instr = frame.active_instruction;
    this.banner.textContent = instr.phrase
      ? `instruction: “${instr.phrase}” (class ${instr.class_id})`
      : "no active instruction";
    this.statusLine.textContent = `t=${frame.t} · ${frame.status}`;
    this.returnCounter.textContent = String(frame.return_so_far);
    this.complianceCounter.textContent = `${frame.compliance.followed}/${frame.compliance.issued}`;
    this.macroList.innerHTML = frame.macros
      .map((m, i) => `<span data-macro="${i}">A${i}: ${m || "—"}</span>`)
      .join(" ");

    if (frame.compliance.issued > this.lastIssued) {
      this.addTick(`instruction issued (t=${frame.t})`);
    }
    if (frame.compliance.followed > this.lastFollowed) {
      this.addTick(`instruction followed (t=${frame.t})`);
    }
    this.lastIssued = frame.compliance.issued;
    this.lastFollowed = frame.compliance.followed;
  }

  renderAck(ack: AckMsg): void {
    if (ack.event === "inject") {
      const badge = ack.unrecognized ? " [unrecognized]" : "";
      this.banner.textContent = `routed to ${ack.class_name ?? "?"}${badge} (takes effect at step ${ack.at_step})`;
      this.addTick(`sent instruction → ${ack.class_name}${badge}`);
    }
    if (ack.registry) {
      this.renderRegistry(ack.registry);
    }
  }

  renderError(err: ErrorMsg): void {
    this.addTick(`error: ${err.code} — ${err.message}`);
  }

  private addTick(text: string): void {
    const li = document.createElement("li");
    li.textContent = text;
    this.ticker.prepend(li);
    while (this.ticker.children.length > 12) {
      this.ticker.removeChild(this.ticker.lastChild as Node);
    }
  }
}
