"""Live episode bridge.

Hosts interactive sessions that step a trained policy through its environment
in real time.  A human injects instruction phrases mid-episode; the injection
is applied at the next primitive step boundary through the same forced-
termination path as a sampled arrival, so the interactive path exercises
exactly the training-time interruption code.

Wire protocol: newline-delimited JSON over TCP.  Browsers connect through an
in-place WebSocket upgrade on the same port; plain HTTP GETs serve the static
console when a directory is configured.  One session per connection; inbound
commands apply between ticks.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import socket
import socketserver
import threading
import time
import uuid
from collections import deque
from typing import Optional

import numpy as np

from .engine import EpisodeRunner
from .envs import build_env, compliance_event
from .instructions import NULL_CLASS

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class InjectionSource:
    """Instruction source driven by human injections.

    Queued phrases take effect at the next primitive step boundary; every
    injection forces a transition (a new instruction replaces the current
    one), matching the sampled-arrival semantics downstream.
    """

    def __init__(self, registry):
        self.registry = registry
        self.queue: deque = deque()

    def inject(self, class_id: int, phrase: str) -> None:
        self.queue.append((class_id, phrase))

    def step(self, t, state, class_id, phrase, rng):
        if self.queue:
            new_c, new_p = self.queue.popleft()
            return new_c, new_p, True
        return class_id, phrase, False


class Session:
    """One interactive episode; mutated only by its owning connection."""

    def __init__(self, loaded, seed: int, tick_rate: float = 4.0):
        self.session_id = uuid.uuid4().hex[:12]
        self.loaded = loaded
        self.seed = seed
        self.tick_rate = tick_rate
        self.status = "paused"
        self.env = build_env(loaded.env_name, loaded.env_config)
        self.macro_sets = [self.env.macro_actions(i)
                          for i in range(self.env.agent_count)]
        self._start()

    def _start(self) -> None:
        self.injector = InjectionSource(self.env.instruction_registry)
        self.runner = EpisodeRunner(
            self.env, self.macro_sets, self.loaded.policy(self.env, greedy=True),
            self.injector, self.seed, window=self.loaded.window,
            collect_transitions=False)

    def reset(self) -> None:
        self._start()
        self.status = "paused"

    def inject(self, phrase: str) -> dict:
        if self.status == "finished":
            raise RuntimeError("session finished")
        class_id, recognized = self.loaded.encoder.classify(phrase)
        self.injector.inject(class_id, phrase)
        name = self.env.instruction_registry[class_id].name
        return {"class_id": class_id, "class_name": name,
                "unrecognized": not recognized,
                "at_step": self.runner.t + 1}

    def step_once(self) -> None:
        if self.runner.done:
            self.status = "finished"
            return
        self.runner.step()
        if self.runner.done:
            self.status = "finished"

    def compliance_counts(self) -> dict:
        issued = followed = 0
        runner = self.runner
        for act in runner.activations:
            issued += 1
            t_end = act.t_end if act.t_end is not None else runner.t
            window = [r.events for r in runner.trace
                      if act.t_start <= r.t < t_end]
            outcome = compliance_event(
                self.env, self.env.instruction_registry[act.class_id],
                window, act.expired)
            if outcome == "followed":
                followed += 1
        return {"issued": issued, "followed": followed}

    def frame(self) -> dict:
        runner = self.runner
        rendered = self.env.render_frame(runner.state, t=runner.t,
                                         active_phrase=runner.phrase)
        macros = []
        for i, m in enumerate(runner.current_macros):
            macros.append(m.name if m is not None else "")
        agents = rendered.get("agents", [])
        for i, a in enumerate(agents):
            if i < len(macros):
                a["macro"] = macros[i]
        return {
            "type": "frame",
            "session_id": self.session_id,
            "t": runner.t,
            "grid": rendered.get("cells", []),
            "agents": agents,
            "items": rendered.get("items", []),
            "macros": macros,
            "active_instruction": {"class_id": runner.class_id,
                                   "phrase": runner.phrase},
            "return_so_far": runner.undiscounted_return,
            "status": self.status,
            "compliance": self.compliance_counts(),
        }


class _Transport:
    """Line-delimited JSON over a raw socket or WebSocket frames."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.websocket = False
        self._buf = b""

    # -- plain TCP framing ---------------------------------------------------

    def send_json(self, obj: dict) -> None:
        data = json.dumps(obj, sort_keys=True, default=float)
        if self.websocket:
            self._ws_send_text(data)
        else:
            self.sock.sendall(data.encode() + b"\n")

    def _parse_buffered(self):
        if self.websocket:
            return self._ws_drain()
        out = []
        while b"\n" in self._buf:
            line, self._buf = self._buf.split(b"\n", 1)
            line = line.strip()
            if line:
                out.append(json.loads(line))
        return out

    def recv_messages(self, timeout: float):
        """Yield decoded JSON objects: anything already buffered, else what
        arrives within `timeout` seconds."""
        ready = self._parse_buffered()
        if ready:
            return ready
        self.sock.settimeout(timeout)
        try:
            chunk = self.sock.recv(65536)
        except socket.timeout:
            return []
        except OSError:
            raise ConnectionError("socket closed")
        if not chunk:
            raise ConnectionError("peer closed")
        self._buf += chunk
        return self._parse_buffered()

    # -- websocket ----------------------------------------------------------

    def try_upgrade(self, first: bytes, static_dir: Optional[str]) -> bool:
        """Handle an HTTP request: upgrade to WebSocket or serve a static
        file.  Returns True when the connection continues as a WebSocket."""
        self.sock.settimeout(2.0)
        data = first
        while b"\r\n\r\n" not in data:
            more = self.sock.recv(65536)
            if not more:
                break
            data += more
        head, _, rest = data.partition(b"\r\n\r\n")
        lines = head.decode("latin-1").split("\r\n")
        request = lines[0]
        headers = {}
        for line in lines[1:]:
            if ":" in line:
                k, v = line.split(":", 1)
                headers[k.strip().lower()] = v.strip()
        if headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            accept = base64.b64encode(
                hashlib.sha1((key + WS_GUID).encode()).digest()).decode()
            resp = ("HTTP/1.1 101 Switching Protocols\r\n"
                    "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                    f"Sec-WebSocket-Accept: {accept}\r\n\r\n")
            self.sock.sendall(resp.encode())
            self.websocket = True
            self._buf = rest
            return True
        self._serve_static(request, static_dir)
        return False

    def _serve_static(self, request: str, static_dir: Optional[str]) -> None:
        parts = request.split()
        path = parts[1] if len(parts) > 1 else "/"
        path = path.split("?")[0]
        if path == "/":
            path = "/index.html"
        body, status, ctype = b"not found", "404 Not Found", "text/plain"
        if static_dir:
            full = os.path.realpath(os.path.join(static_dir, path.lstrip("/")))
            root = os.path.realpath(static_dir)
            if full.startswith(root) and os.path.isfile(full):
                with open(full, "rb") as f:
                    body = f.read()
                status = "200 OK"
                ctype = {"html": "text/html", "js": "text/javascript",
                         "css": "text/css", "json": "application/json"}.get(
                    full.rsplit(".", 1)[-1], "application/octet-stream")
        resp = (f"HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\n"
                f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n")
        self.sock.sendall(resp.encode() + body)

    def _ws_send_text(self, text: str) -> None:
        payload = text.encode()
        n = len(payload)
        header = bytearray([0x81])
        if n < 126:
            header.append(n)
        elif n < (1 << 16):
            header.append(126)
            header += n.to_bytes(2, "big")
        else:
            header.append(127)
            header += n.to_bytes(8, "big")
        self.sock.sendall(bytes(header) + payload)

    def _ws_drain(self):
        out = []
        while True:
            frame = self._ws_next_frame()
            if frame is None:
                return out
            opcode, payload = frame
            if opcode == 0x8:  # close
                try:
                    self.sock.sendall(b"\x88\x00")
                finally:
                    raise ConnectionError("websocket close")
            if opcode == 0x9:  # ping -> pong
                self.sock.sendall(b"\x8a" + bytes([len(payload)]) + payload)
                continue
            if opcode in (0x1, 0x2):
                text = payload.decode()
                for piece in text.split("\n"):
                    piece = piece.strip()
                    if piece:
                        out.append(json.loads(piece))

    def _ws_next_frame(self):
        buf = self._buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        idx = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = int.from_bytes(buf[2:4], "big")
            idx = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = int.from_bytes(buf[2:10], "big")
            idx = 10
        mask = b""
        if masked:
            if len(buf) < idx + 4:
                return None
            mask = buf[idx:idx + 4]
            idx += 4
        if len(buf) < idx + length:
            return None
        payload = bytearray(buf[idx:idx + length])
        if masked:
            for i in range(length):
                payload[i] ^= mask[i % 4]
        self._buf = buf[idx + length:]
        return opcode, bytes(payload)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: BridgeServer = self.server.bridge  # type: ignore[attr-defined]
        transport = _Transport(self.request)
        session: Optional[Session] = None
        try:
            # sniff the first bytes: HTTP verb means upgrade or static
            self.request.settimeout(5.0)
            first = self.request.recv(65536)
            if not first:
                return
            if first[:4] in (b"GET ", b"POST", b"HEAD"):
                if not transport.try_upgrade(first, server.static_dir):
                    return
            else:
                transport._buf = first
            last_tick = time.monotonic()
            while not server.stopped:
                interval = (1.0 / session.tick_rate
                            if session and session.status == "running" else 0.05)
                try:
                    msgs = transport.recv_messages(timeout=interval)
                except ConnectionError:
                    break
                for msg in msgs:
                    session = self._handle_message(server, transport, session, msg)
                if session and session.status == "running":
                    now = time.monotonic()
                    if now - last_tick >= 1.0 / session.tick_rate:
                        session.step_once()
                        transport.send_json(session.frame())
                        last_tick = now
        except (ConnectionError, OSError, json.JSONDecodeError):
            pass
        finally:
            if session is not None:
                server.sessions.pop(session.session_id, None)

    def _handle_message(self, server, transport, session, msg):
        mtype = msg.get("type")
        try:
            if mtype == "open":
                session = server.open_session(
                    msg.get("env"), msg.get("checkpoint"),
                    int(msg.get("seed", 0)),
                    tick_rate=float(msg.get("tick_rate", 4.0)))
                transport.send_json({"type": "ack", "event": "open",
                                     "session_id": session.session_id,
                                     "registry": session.env
                                     .instruction_registry.to_json()})
                transport.send_json(session.frame())
            elif mtype == "inject":
                if session is None:
                    raise RuntimeError("no open session")
                ack = session.inject(msg.get("phrase", ""))
                ack.update({"type": "ack", "event": "inject",
                            "session_id": session.session_id})
                transport.send_json(ack)
            elif mtype == "control":
                if session is None:
                    raise RuntimeError("no open session")
                command = msg.get("command")
                self._control(session, command)
                transport.send_json({"type": "ack", "event": "control",
                                     "command": command,
                                     "status": session.status,
                                     "session_id": session.session_id})
                if command in ("step", "reset"):
                    transport.send_json(session.frame())
            else:
                transport.send_json({"type": "error", "code": "bad_message",
                                     "message": f"unknown type {mtype!r}"})
        except FileNotFoundError as e:
            transport.send_json({"type": "error", "code": "bad_checkpoint",
                                 "message": str(e)})
        except Exception as e:
            transport.send_json({"type": "error", "code": "command_failed",
                                 "message": str(e)})
        return session

    @staticmethod
    def _control(session: Session, command: str) -> None:
        if command == "play":
            if session.status == "finished":
                raise RuntimeError("episode finished; reset first")
            session.status = "running"
        elif command == "pause":
            if session.status == "running":
                session.status = "paused"
        elif command == "step":
            if session.status == "running":
                raise RuntimeError("pause first")
            if session.status == "finished":
                raise RuntimeError("episode finished; reset first")
            session.step_once()
        elif command == "reset":
            session.reset()
        elif command == "close":
            session.status = "finished"
        else:
            raise RuntimeError(f"unknown command {command!r}")


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BridgeServer:
    """Threaded TCP server hosting independent sessions."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 static_dir: Optional[str] = None):
        self.static_dir = static_dir
        self.sessions: dict[str, Session] = {}
        self.stopped = False
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.bridge = self  # type: ignore[attr-defined]
        self.host = host
        self.port = self._server.server_address[1]
        self._thread: Optional[threading.Thread] = None

    def open_session(self, env_name: Optional[str], checkpoint: Optional[str],
                     seed: int, tick_rate: float = 4.0) -> Session:
        from .training import load_checkpoint

        if not checkpoint or not os.path.exists(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        loaded = load_checkpoint(checkpoint)
        if env_name and env_name != loaded.env_name:
            raise RuntimeError(
                f"checkpoint is for env {loaded.env_name!r}, not {env_name!r}")
        session = Session(loaded, seed=seed, tick_rate=tick_rate)
        self.sessions[session.session_id] = session
        return session

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self.stopped = True
        self._server.shutdown()
        self._server.server_close()
