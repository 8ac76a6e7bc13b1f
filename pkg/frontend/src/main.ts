import { BridgeClient } from "./client";
import { controlMsg, injectMsg } from "./protocol";
import { ConsoleView } from "./view";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");
const view = new ConsoleView(root);

const client = new BridgeClient(
  {
    url: param("server", `ws://${window.location.host || "127.0.0.1:8765"}`),
    checkpoint: param("checkpoint", "runs/demo/checkpoint_chain_mavic_seed1.json"),
    seed: Number(param("seed", "0")),
  },
  {
    onMessage: (msg) => {
      if (msg.type === "frame") view.renderFrame(msg);
      else if (msg.type === "ack") view.renderAck(msg);
      else if (msg.type === "error") view.renderError(msg);
    },
    onStatus: (status) => view.setConnection(status),
  },
);

view.onSend = (phrase) => client.send(injectMsg(phrase));
view.onControl = (command) => client.send(controlMsg(command));
client.connect();
