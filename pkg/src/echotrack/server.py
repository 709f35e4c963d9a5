"""Session server: the safety loop behind a byte-stream interface.

Speaks the NDJSON protocol over plain TCP and, for browsers, over a
WebSocket bridge carrying one message per text frame.  Each session is
serialized FIFO and owned by exactly one connection.  In simulation mode
the server hosts a virtual probe whose speed, contact pressure, and
position respond to operator actions, closing the feedback loop.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass

import numpy as np

from . import protocol
from .autodiff import rng_stream
from .hitl import Session, SessionConfig
from .model import PoseModel
from .pose import Pose6DoF, compose
from .sweep import SweepSpec, _noise_volume, _render_frame, _speed_multiplier, \
    _direction_sign, FRAME_DT_S

_RNG_PROBE = 8000


class SimulatedProbe:
    """Virtual probe sweeping the noise phantom; operator actions steer it."""

    def __init__(self, spec: SweepSpec):
        self.spec = spec
        self.volume = _noise_volume(spec.seed)
        self.rng = rng_stream(spec.seed, _RNG_PROBE)
        self.pose = Pose6DoF.identity()
        self.index = 0
        self.speed_factor = 1.0
        self.contact_gain = 1.0
        self._pose_history = [self.pose]

    def apply_action(self, kind: str, params: dict) -> None:
        if kind == "slow-down":
            self.speed_factor = float(params.get("factor", 0.5))
            if self.speed_factor <= 0:
                raise protocol.ProtocolError("slow-down factor must be positive")
        elif kind == "press":
            self.contact_gain = 1.0
        elif kind == "rescan":
            back = int(params.get("frames", 3))
            idx = max(0, len(self._pose_history) - 1 - back)
            self.pose = self._pose_history[idx]
        elif kind == "reacquire":
            # retake from the current location; next frame re-renders in place
            self.speed_factor = 0.0 if params.get("hold") else self.speed_factor
        else:
            raise protocol.ProtocolError(f"unknown operator action {kind!r}")

    def next_frame(self) -> tuple[np.ndarray, float]:
        spec = self.spec
        self.index += 1
        step = (spec.base_speed * _speed_multiplier(spec, self.index)
                * _direction_sign(spec, self.index) * self.speed_factor)
        t = step * np.asarray(spec.direction)
        self.pose = compose(self.pose, Pose6DoF(t[0], t[1], t[2]))
        self._pose_history.append(self.pose)
        img = _render_frame(self.volume, self.pose, spec.frame_size)
        img = img * self.contact_gain
        if spec.noise_level > 0:
            img = img + spec.noise_level * self.rng.standard_normal(img.shape)
        return np.clip(img, 0.0, 1.0), self.index * FRAME_DT_S


@dataclass
class ServerConfig:
    model: PoseModel
    tau1: float
    tau2: float
    k_passes: int = 8
    dropout_rate: float = 0.1
    window: int = 5
    seed: int = 0
    frame_size: tuple = (64, 64)
    sim_spec: SweepSpec | None = None


class SessionRunner:
    """One safety-loop session plus its replay buffer of emitted messages."""

    def __init__(self, session_id: str, config: ServerConfig, mode: str = "push",
                 sim_spec: SweepSpec | None = None):
        self.session_id = session_id
        self.mode = mode
        self.config = config
        self.session = Session(config.model, SessionConfig(
            tau1=config.tau1, tau2=config.tau2, window=config.window,
            k_passes=config.k_passes, dropout_rate=config.dropout_rate,
            seed=config.seed, frame_size=config.frame_size))
        self.probe = None
        if mode == "sim":
            self.probe = SimulatedProbe(sim_spec or config.sim_spec
                                        or SweepSpec(num_frames=10**6,
                                                     seed=config.seed))
        self.replay: list[dict] = []
        self.prompt_count = 0
        self.attached = False

    # -- message handling (serialized by the transport) -----------------

    def handle(self, msg: dict) -> list[dict]:
        kind = msg["type"]
        if kind == "frame":
            h, w = self.config.frame_size
            frame = protocol.decode_pixels(msg["pixels"],
                                           msg.get("height", h), msg.get("width", w))
            return self._process(frame, float(msg.get("timestamp", 0.0)))
        if kind == "tick":
            if self.probe is None:
                raise protocol.ProtocolError("tick requires a simulation session")
            out = []
            for _ in range(int(msg.get("count", 1))):
                frame, ts = self.probe.next_frame()
                out.extend(self._process(frame, ts))
            return out
        if kind == "operator_action":
            params = {k: v for k, v in msg.items()
                      if k not in ("v", "type", "kind", "params")}
            params.update(msg.get("params", {}))
            if self.probe is not None:
                self.probe.apply_action(msg["kind"], params)
            return []
        if kind == "end":
            return [self._summary()]
        raise protocol.ProtocolError(f"unexpected message type {kind!r}")

    def _process(self, frame: np.ndarray, timestamp: float) -> list[dict]:
        out = self.session.step(frame)
        idx = out.report.frame_index
        msgs = [protocol.make_message(
            "frame_meta", index=idx, timestamp=timestamp,
            width=frame.shape[1], height=frame.shape[0],
            mean_intensity=float(frame.mean()))]
        if out.pose is not None:
            msgs.append(protocol.make_message(
                "pose_estimate", index=idx, pose=list(out.pose.to_vector())))
        msgs.append(protocol.make_message(
            "uncertainty_report", index=idx,
            mu=list(out.report.mu.to_vector()),
            sigma2=out.report.sigma2, gate=out.report.gate))
        if out.saliency is not None:
            msgs.append(protocol.make_message(
                "saliency_png", index=idx,
                png=protocol.encode_png(out.saliency.values)))
        if out.prompt is not None:
            self.prompt_count += 1
            msgs.append(protocol.make_message(
                "prompt", index=idx, cause=out.prompt.cause,
                message=out.prompt.message))
        self.replay.extend(msgs)
        return msgs

    def _summary(self) -> dict:
        reports = self.session.reports
        return protocol.make_message(
            "session_summary",
            frames=len(reports),
            accepted=len(self.session.trajectory) - 1,
            prompts=self.prompt_count,
            mean_sigma2=float(np.mean([r.sigma2 for r in reports]))
            if reports else 0.0)


class SessionHub:
    """Routes connections to sessions; one live connection per session id."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.sessions: dict[str, SessionRunner] = {}

    def attach(self, msg: dict) -> SessionRunner:
        sid = str(msg["session_id"])
        mode = msg.get("mode", "push")
        if mode not in ("push", "sim"):
            raise protocol.ProtocolError(f"unknown session mode {mode!r}")
        runner = self.sessions.get(sid)
        if runner is None:
            sim_spec = None
            if "spec" in msg:
                import json as _json
                sim_spec = SweepSpec.from_json(_json.dumps(msg["spec"]))
            runner = SessionRunner(sid, self.config, mode=mode, sim_spec=sim_spec)
            self.sessions[sid] = runner
        if runner.attached:
            raise protocol.ProtocolError(f"session {sid!r} already has a connection")
        runner.attached = True
        return runner

    def detach(self, runner: SessionRunner | None) -> None:
        if runner is not None:
            runner.attached = False


class LineConnection:
    """Transport-agnostic per-connection state machine over NDJSON lines."""

    def __init__(self, hub: SessionHub):
        self.hub = hub
        self.runner: SessionRunner | None = None

    def handle_line(self, line: str | bytes) -> list[str]:
        """Process one inbound line; returns encoded outbound lines.

        Malformed input yields a single error message and the connection
        (and session) stay usable.
        """
        try:
            msg = protocol.decode_line(line)
            if msg["type"] == "start":
                runner = self.hub.attach(msg)
                self.runner = runner
                out = [protocol.make_message("started", session_id=runner.session_id,
                                             mode=runner.mode)]
                out.extend(runner.replay)   # replay for reconnecting consoles
                return [protocol.encode_message(m) for m in out]
            if self.runner is None:
                raise protocol.ProtocolError("send a start message first")
            return [protocol.encode_message(m) for m in self.runner.handle(msg)]
        except protocol.ProtocolError as e:
            return [protocol.encode_message(
                protocol.make_message("error", message=str(e)))]

    def close(self) -> None:
        self.hub.detach(self.runner)
        self.runner = None


async def serve_tcp(hub: SessionHub, host: str, port: int):
    async def on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = LineConnection(hub)
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                if not line.strip():
                    continue
                for out in conn.handle_line(line):
                    writer.write(out.encode())
                await writer.drain()
        finally:
            conn.close()
            writer.close()
    return await asyncio.start_server(on_client, host, port)


async def serve_websocket(hub: SessionHub, host: str, port: int):
    import websockets

    async def on_client(ws):
        conn = LineConnection(hub)
        try:
            async for raw in ws:
                for out in conn.handle_line(raw):
                    await ws.send(out.rstrip("\n"))
        finally:
            conn.close()
    return await websockets.serve(on_client, host, port)


async def run_server(config: ServerConfig, host: str = "127.0.0.1",
                     port: int = 8765, ws_port: int | None = None):
    """Run TCP (and optional WebSocket) transports until cancelled."""
    hub = SessionHub(config)
    tcp = await serve_tcp(hub, host, port)
    ws = await serve_websocket(hub, host, ws_port) if ws_port else None
    try:
        await asyncio.Future()
    finally:
        tcp.close()
        await tcp.wait_closed()
        if ws is not None:
            ws.close()
            await ws.wait_closed()
