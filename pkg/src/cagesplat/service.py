"""Live reconstruction service.

One TCP listener (default port 7421) speaking length-prefixed JSON messages
(u32 little-endian byte count, then a UTF-8 JSON object). Because browsers
cannot open raw TCP sockets, the same port also answers HTTP: a WebSocket
upgrade at /ws carries the identical JSON messages one-per-frame, and other
GET paths serve the static console assets when an assets directory is
configured. The first bytes of each connection decide the flavor (an HTTP
request starts with its method; a raw client stays silent until the server's
hello, so a short sniff timeout resolves the ambiguity).

Message types: hello, sensor_frame, set_camera, set_ema, frame (base64 PNG +
timing), cage_state, ema, camera, error. One session at a time; a second
connection is refused with a busy error. Inbound sensor frames apply at
render-loop cadence, latest wins.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import socket
import struct
import threading
import time

import numpy as np

from .cage import bind_weights, cage_for_scene, propagate
from .config import PipelineConfig
from .nn import EmaState, build_model, forward, load_checkpoint
from .pipeline import build_geometry, build_proxy
from .render import Camera, encode_png, render_frame
from .sensor import IIRLowpass, SensorFrame, median3x3

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
SNIFF_TIMEOUT = 0.35


def _u32_frame(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


class Transport:
    """Frames JSON messages over a connected socket (raw or WebSocket)."""

    def __init__(self, sock: socket.socket, websocket: bool):
        self.sock = sock
        self.websocket = websocket
        self._lock = threading.Lock()
        self._buf = b""

    def send_json(self, obj) -> None:
        payload = json.dumps(obj).encode()
        with self._lock:
            if self.websocket:
                self.sock.sendall(_ws_frame(payload, opcode=1))
            else:
                self.sock.sendall(_u32_frame(payload))

    def _recv_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("peer closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def recv_json(self):
        if self.websocket:
            while True:
                opcode, payload = self._recv_ws_frame()
                if opcode == 8:
                    raise ConnectionError("websocket close")
                if opcode == 9:                      # ping -> pong
                    with self._lock:
                        self.sock.sendall(_ws_frame(payload, opcode=10))
                    continue
                if opcode in (1, 2):
                    return json.loads(payload.decode())
        (length,) = struct.unpack("<I", self._recv_exact(4))
        if length > 64 * 1024 * 1024:
            raise ConnectionError("oversized message")
        return json.loads(self._recv_exact(length).decode())

    def _recv_ws_frame(self):
        b0, b1 = self._recv_exact(2)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", self._recv_exact(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", self._recv_exact(8))
        mask = self._recv_exact(4) if masked else b""
        payload = self._recv_exact(length)
        if masked:
            payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
        return opcode, payload

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def _ws_frame(payload: bytes, opcode: int = 1) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


class OrbitCamera:
    """Orbit parameterization around the scene center."""

    def __init__(self, center, distance: float, width: int, height: int,
                 fov_deg: float, near: float, far: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.theta = 0.0
        self.phi = 0.35
        self.distance = distance
        self.fov_deg = fov_deg
        self.exposure = 1.0
        self.width, self.height = width, height
        self.near, self.far = near, far

    def apply(self, msg: dict) -> dict:
        if "theta" in msg:
            self.theta = float(msg["theta"])
        if "phi" in msg:
            self.phi = float(np.clip(float(msg["phi"]), -1.45, 1.45))
        if "distance" in msg:
            self.distance = float(max(float(msg["distance"]), 0.02))
        if "fov_deg" in msg:
            self.fov_deg = float(np.clip(float(msg["fov_deg"]), 10.0, 120.0))
        if "exposure" in msg:
            self.exposure = float(np.clip(float(msg["exposure"]), 0.1, 8.0))
        return {"type": "camera", "theta": self.theta, "phi": self.phi,
                "distance": self.distance, "fov_deg": self.fov_deg,
                "exposure": self.exposure}

    def camera(self) -> Camera:
        d = np.array([
            np.cos(self.phi) * np.sin(self.theta),
            -np.cos(self.phi) * np.cos(self.theta),
            np.sin(self.phi),
        ])
        return Camera.look_at(position=self.center + self.distance * d,
                              target=self.center, fov_y=np.radians(self.fov_deg),
                              width=self.width, height=self.height,
                              near=self.near, far=self.far,
                              exposure=self.exposure)


class Service:
    def __init__(self, cfg: PipelineConfig, checkpoint: str | None = None):
        cfg.validate()
        self.cfg = cfg
        mesh = build_geometry(cfg)
        self.scene = build_proxy(cfg, mesh)
        self.cage = cage_for_scene(self.scene, cfg.cage.dims)
        self.weights = bind_weights(self.cage, self.scene, cfg.cage.k,
                                    cfg.cage.epsilon)
        if checkpoint:
            self.model = load_checkpoint(checkpoint, expect_cage=self.cage)
        elif cfg.serve.allow_untrained:
            self.model = build_model(
                (cfg.sensor.grid_h, cfg.sensor.grid_w), self.cage,
                seed=cfg.train.seed, heads=cfg.model.heads,
                hidden=cfg.model.hidden, feat_dim=cfg.model.feat_dim,
                head_hidden=cfg.model.head_hidden,
                head_init=cfg.model.head_init)
        else:
            raise ValueError("no checkpoint given and serve.allow_untrained unset")
        lo, hi = self.scene.bounds
        self.orbit = OrbitCamera((lo + hi) / 2.0, cfg.render.orbit_distance,
                                 cfg.render.width, cfg.render.height,
                                 cfg.render.fov_deg, cfg.render.near,
                                 cfg.render.far)
        self._lock = threading.Lock()
        self._latest_grid: np.ndarray | None = None
        self._ema = EmaState(beta=cfg.infer.ema_beta)
        self._iir = IIRLowpass(cfg.sensor.cutoff_hz, cfg.sensor.sample_hz)
        self._session: Transport | None = None
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self.port: int | None = None
        self._threads: list[threading.Thread] = []
        self._frame_id = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> int:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind(("127.0.0.1", self.cfg.serve.port))
        except OSError as exc:
            raise OSError(f"port {self.cfg.serve.port} unavailable: {exc}") from exc
        self._listener.listen(4)
        self.port = self._listener.getsockname()[1]
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        t = threading.Thread(target=self._render_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self.port

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            session, self._session = self._session, None
        if session:
            session.close()

    def run_forever(self) -> None:
        self.start()
        print(f"serving on 127.0.0.1:{self.port} (ctrl-c to stop)")
        try:
            while not self._stop.is_set():
                time.sleep(0.5)
        except KeyboardInterrupt:
            self.stop()

    # -- connection handling -------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._handle_connection, args=(sock,),
                                 daemon=True)
            t.start()

    def _sniff(self, sock: socket.socket) -> bytes:
        sock.settimeout(SNIFF_TIMEOUT)
        try:
            head = sock.recv(8, socket.MSG_PEEK)
        except socket.timeout:
            head = b""
        finally:
            sock.settimeout(None)
        return head

    def _handle_connection(self, sock: socket.socket) -> None:
        try:
            head = self._sniff(sock)
            if head[:4] in (b"GET ", b"HEAD", b"POST", b"OPTI"):
                self._handle_http(sock)
                return
            self._run_session(Transport(sock, websocket=False))
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _handle_http(self, sock: socket.socket) -> None:
        data = b""
        sock.settimeout(5.0)
        while b"\r\n\r\n" not in data:
            chunk = sock.recv(65536)
            if not chunk:
                return
            data += chunk
        sock.settimeout(None)
        head = data.split(b"\r\n\r\n", 1)[0].decode("latin1")
        lines = head.split("\r\n")
        method, path, _ = lines[0].split(" ", 2)
        headers = {}
        for line in lines[1:]:
            if ":" in line:
                k, v = line.split(":", 1)
                headers[k.strip().lower()] = v.strip()
        if headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            accept = base64.b64encode(
                hashlib.sha1((key + WS_GUID).encode()).digest()).decode()
            sock.sendall(
                b"HTTP/1.1 101 Switching Protocols\r\n"
                b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                b"Sec-WebSocket-Accept: " + accept.encode() + b"\r\n\r\n")
            self._run_session(Transport(sock, websocket=True))
            return
        self._serve_static(sock, method, path)

    def _serve_static(self, sock: socket.socket, method: str, path: str) -> None:
        root = self.cfg.serve.assets_dir
        if path == "/":
            path = "/index.html"
        full = os.path.realpath(os.path.join(root, path.lstrip("/"))) if root else ""
        if not root or not full.startswith(os.path.realpath(root)) or \
                not os.path.isfile(full):
            body = b"not found; connect a console to /ws or raw TCP"
            sock.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: " +
                         str(len(body)).encode() + b"\r\n\r\n" + body)
            return
        ctype = {
            ".html": "text/html", ".js": "text/javascript",
            ".css": "text/css", ".png": "image/png", ".map": "application/json",
        }.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            body = fh.read()
        sock.sendall(f"HTTP/1.1 200 OK\r\nContent-Type: {ctype}\r\n"
                     f"Content-Length: {len(body)}\r\n\r\n".encode() +
                     (body if method != "HEAD" else b""))

    # -- session -------------------------------------------------------------

    def _hello(self) -> dict:
        return {
            "type": "hello",
            "n_gaussians": len(self.scene),
            "n_nodes": self.cage.n_nodes,
            "grid": [self.cfg.sensor.grid_h, self.cfg.sensor.grid_w],
            "resolution": [self.cfg.render.width, self.cfg.render.height],
            "ema_beta": self._ema.beta,
            "gauge_alpha": self.cfg.sensor.gauge_alpha,
            "fps": self.cfg.serve.fps,
        }

    def _run_session(self, transport: Transport) -> None:
        with self._lock:
            if self._session is not None:
                transport.send_json({"type": "error", "message": "busy"})
                transport.close()
                return
            self._session = transport
            self._iir = IIRLowpass(self.cfg.sensor.cutoff_hz,
                                   self.cfg.sensor.sample_hz)
            self._ema = EmaState(beta=self.cfg.infer.ema_beta)
            self._latest_grid = None
        try:
            transport.send_json(self._hello())
            while not self._stop.is_set():
                msg = transport.recv_json()
                reply = self._apply_message(msg)
                if reply is not None:
                    transport.send_json(reply)
        except (ConnectionError, OSError, json.JSONDecodeError):
            pass
        finally:
            with self._lock:
                if self._session is transport:
                    self._session = None
            transport.close()

    def _apply_message(self, msg) -> dict | None:
        if not isinstance(msg, dict) or "type" not in msg:
            return {"type": "error", "message": "malformed message"}
        kind = msg["type"]
        if kind == "sensor_frame":
            grid = np.asarray(msg.get("grid"), dtype=np.float64)
            h, w = self.cfg.sensor.grid_h, self.cfg.sensor.grid_w
            if grid.shape != (h, w) or not np.isfinite(grid).all():
                return {"type": "error",
                        "message": f"sensor_frame grid must be {h}x{w} finite"}
            with self._lock:
                self._latest_grid = grid
            return None
        if kind == "set_ema":
            try:
                beta = float(msg.get("beta"))
            except (TypeError, ValueError):
                return {"type": "error", "message": "set_ema needs a numeric beta"}
            if not 0.0 <= beta < 1.0:
                return {"type": "error", "message": "beta must lie in [0,1)"}
            with self._lock:
                self._ema = EmaState(beta=beta, smoothed=self._ema.smoothed)
            return {"type": "ema", "beta": beta}
        if kind == "set_camera":
            with self._lock:
                return self.orbit.apply(msg)
        if kind == "ping":
            return {"type": "pong"}
        return {"type": "error", "message": f"unknown message type {kind!r}"}

    # -- render loop -----------------------------------------------------------

    def _render_loop(self) -> None:
        period = 1.0 / max(self.cfg.serve.fps, 0.1)
        while not self._stop.is_set():
            t0 = time.perf_counter()
            with self._lock:
                session = self._session
                grid = self._latest_grid
                ema = self._ema
            if session is None:
                time.sleep(min(period, 0.05))
                continue
            try:
                if grid is None:
                    grid = np.zeros((self.cfg.sensor.grid_h,
                                     self.cfg.sensor.grid_w))
                frame = SensorFrame(grid=grid, timestamp=time.time(),
                                    units="relative")
                filtered = median3x3(self._iir.apply(frame))
                field = None
                field = self._infer(filtered, ema)
                deformed = propagate(self.weights, field, self.scene)
                predict_ms = (time.perf_counter() - t0) * 1e3
                cam = self.orbit.camera()
                img, stats = render_frame(deformed, cam,
                                          self.cfg.render.tile_px)
                png = encode_png(img)
                self._frame_id += 1
                session.send_json({
                    "type": "frame", "frame_id": self._frame_id,
                    "png_b64": base64.b64encode(png).decode(),
                    "timing": {"predict_ms": round(predict_ms, 3),
                               "render_ms": round(stats.total_ms, 3)},
                })
                session.send_json({
                    "type": "cage_state", "frame_id": self._frame_id,
                    "n_nodes": self.cage.n_nodes,
                    "offsets_b64": base64.b64encode(
                        field.offsets.astype("<f4").tobytes()).decode(),
                })
            except (ConnectionError, OSError):
                with self._lock:
                    if self._session is session:
                        self._session = None
            dt = time.perf_counter() - t0
            if dt < period:
                time.sleep(period - dt)

    def _infer(self, filtered: SensorFrame, ema: EmaState):
        from .nn import infer_smoothed
        return infer_smoothed(self.model, filtered.grid,
                              self.cfg.serve.t_norm, self.cage, ema)


def serve(cfg: PipelineConfig, checkpoint: str | None = None) -> None:
    Service(cfg, checkpoint=checkpoint).run_forever()
