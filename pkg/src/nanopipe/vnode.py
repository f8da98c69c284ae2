"""Virtual devices and links: cameras, timed compute engines, point-to-point links.

Every device is a set of coroutines on its node's loop. Links serialize one
message at a time; the sender-side completion fires when the last byte leaves
the sender, while delivery fires at the receiver ``base_latency +
serialization + injected_delay`` after the transfer started, which is what
lets consecutive hops overlap.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .coro import (Event, EventLoop, VirtualClock, coroutine, ctx_init, done, event_complete,
                   event_init, pulse, schedule_completion, sleep_until, spawn, wait)
from .errors import ConfigError, UsageError
from .pipeline import BufferPool, BufferState, Channel, FrameBuffer, ResourceBusy
from .trace import Kind, TraceLog

TRIGGER = "trigger"
STREAMING = "streaming"

STREAMING_MIN_PERIOD_US = 6667          # 150 frame/s sensor ceiling

# Default per-request overhead in trigger mode. With the reference 8 ms
# readout this caps back-to-back captures at 30 frame/s; the split between
# setup and readout is a modeling choice, only the ~30 Hz ceiling is given.
DEFAULT_TRIGGER_SETUP_US = 25333


@dataclass
class CameraConfig:
    mode: str
    resolution: tuple = (160, 160)
    bytes_per_pixel: int = 1
    frame_period_us: int = 0                       # streaming only
    readout_us: int = 8000
    trigger_setup_us: int = DEFAULT_TRIGGER_SETUP_US

    def __post_init__(self):
        if self.mode not in (TRIGGER, STREAMING):
            raise ConfigError(f"unknown camera mode {self.mode!r}")
        if self.mode == STREAMING:
            if self.frame_period_us < STREAMING_MIN_PERIOD_US:
                raise ConfigError(
                    f"streaming period {self.frame_period_us} us below the "
                    f"{STREAMING_MIN_PERIOD_US} us (150 frame/s) sensor ceiling")
            if self.readout_us > self.frame_period_us:
                raise ConfigError("readout longer than the streaming frame period")

    @property
    def frame_bytes(self) -> int:
        return self.resolution[0] * self.resolution[1] * self.bytes_per_pixel

    @property
    def trigger_ceiling_hz(self) -> float:
        return 1e6 / (self.trigger_setup_us + self.readout_us)


@dataclass
class StreamStats:
    delivered: int = 0
    dropped: int = 0
    jitter_us: int = 0


class Camera:
    """Image source on one node; trigger (per-request) or free-running."""

    def __init__(self, loop: EventLoop, config: CameraConfig, trace: TraceLog,
                 stage_name: str = "capture"):
        self.loop = loop
        self.config = config
        self.trace = trace
        self.stage_name = stage_name
        self.resource = ResourceBusy(loop, "camera")
        self._seq = 0


class _CaptureJob:
    __slots__ = ("cam", "buf", "done_ev", "sleep_ev", "seq")

    def __init__(self, cam, buf, done_ev):
        self.cam = cam
        self.buf = buf
        self.done_ev = done_ev
        self.sleep_ev = None
        self.seq = -1


@coroutine
def _trigger_capture_body(ctx):
    st = ctx.args
    cam = st.cam
    loop = cam.loop
    if ctx.resume_point == 0:
        if not cam.resource.try_acquire():
            return wait(cam.resource.free_event, then=0)
        st.seq = cam._seq
        cam._seq += 1
        cam.trace.emit(loop, Kind.STAGE_START, cam.stage_name, st.seq)
        cfg = cam.config
        readout = cfg.readout_us if st.buf.capacity > 0 else 0
        st.sleep_ev = sleep_until(loop, loop.now + cfg.trigger_setup_us + readout, "capture")
        return wait(st.sleep_ev, then=1)
    cam.trace.emit(loop, Kind.STAGE_END, cam.stage_name, st.seq)
    st.buf.fill()
    st.buf.make_ready(st.seq)
    cam.resource.release()
    event_complete(loop, st.done_ev)
    return done()


def camera_capture(cam: Camera, buf: FrameBuffer, done_ev: Event) -> None:
    """Request a single image (trigger mode): after setup + readout the buffer
    is Ready and ``done_ev`` completes. Requests queue on the camera, so
    back-to-back captures cannot exceed the trigger-mode ceiling."""
    if cam.config.mode != TRIGGER:
        raise UsageError("camera_capture requires trigger mode")
    if buf.state == BufferState.FREE:
        buf.begin_fill()
    elif buf.state != BufferState.FILLING:
        raise UsageError(f"capture into buffer in state {buf.state.name}")
    spawn(cam.loop, ctx_init(_trigger_capture_body, _CaptureJob(cam, buf, done_ev),
                             label="trigger-capture"))


class _StreamRun:
    __slots__ = ("cam", "pool", "on_frame", "frames", "stats", "n", "t0",
                 "buf", "sleep_ev", "deliveries")

    def __init__(self, cam, pool, on_frame, frames, stats):
        self.cam = cam
        self.pool = pool
        self.on_frame = on_frame
        self.frames = frames
        self.stats = stats
        self.n = 0
        self.t0 = cam.loop.now
        self.buf = None
        self.sleep_ev = None
        self.deliveries = []


@coroutine
def _stream_body(ctx):
    st = ctx.args
    cam = st.cam
    loop = cam.loop
    period = cam.config.frame_period_us
    while True:
        if ctx.resume_point == 0:
            if st.n == st.frames:
                _finish_stream_stats(st, period)
                return done()
            st.sleep_ev = sleep_until(loop, st.t0 + st.n * period, "frame-tick")
            return wait(st.sleep_ev, then=1)
        if ctx.resume_point == 1:
            buf = st.pool.try_acquire()
            if buf is None:
                # no Free buffer at frame start: the sensor output is lost
                cam.trace.emit(loop, Kind.DROP, cam.stage_name, st.n)
                st.stats.dropped += 1
                st.n += 1
                ctx.resume_point = 0
                continue
            st.buf = buf
            cam.trace.emit(loop, Kind.STAGE_START, cam.stage_name, st.n)
            st.sleep_ev = sleep_until(loop, loop.now + cam.config.readout_us, "readout")
            return wait(st.sleep_ev, then=2)
        cam.trace.emit(loop, Kind.STAGE_END, cam.stage_name, st.n)
        st.buf.fill()
        st.buf.make_ready(st.n)
        st.stats.delivered += 1
        st.deliveries.append(loop.now)
        st.on_frame(st.buf, st.n)
        st.buf = None
        st.n += 1
        ctx.resume_point = 0


def _finish_stream_stats(st, period):
    worst = 0
    for a, b in zip(st.deliveries, st.deliveries[1:]):
        worst = max(worst, abs((b - a) - period))
    st.stats.jitter_us = worst


def camera_stream(cam: Camera, pool: BufferPool, on_frame: Callable,
                  frames: int) -> StreamStats:
    """Free-run the camera for ``frames`` periods, handing each Ready buffer
    to ``on_frame(buf, seq)``. Frames that find no Free buffer are dropped
    and counted; returns the live stats record, final once the loop is idle."""
    if cam.config.mode != STREAMING:
        raise UsageError("camera_stream requires streaming mode")
    stats = StreamStats()
    spawn(cam.loop, ctx_init(_stream_body, _StreamRun(cam, pool, on_frame, frames, stats),
                             label="camera-stream"))
    return stats


# --- links -------------------------------------------------------------------

@dataclass
class LinkConfig:
    name: str
    bandwidth_bps: int
    base_latency_us: int = 0
    mtu: int = 1024
    injected_delay_us: int = 0
    segmentation: bool = True
    jitter_us: int = 0              # +/- uniform noise on serialization, opt-in

    def serialization_us(self, nbytes: int) -> int:
        if nbytes == 0:
            return 0
        return -(-nbytes * 8 * 1_000_000 // self.bandwidth_bps)

    def transfer_time_us(self, nbytes: int) -> int:
        return self.base_latency_us + self.serialization_us(nbytes) + self.injected_delay_us

    def segments(self, nbytes: int) -> int:
        return max(1, math.ceil(nbytes / self.mtu))


@dataclass
class Received:
    payload: object
    nbytes: int
    meta: object
    first_byte_ts: int      # receiver-local clock at first-byte arrival


class Link:
    """Directed point-to-point link between two node loops."""

    def __init__(self, cfg: LinkConfig, src: EventLoop, dst: EventLoop,
                 trace: TraceLog, rng=None):
        self.cfg = cfg
        self.src = src
        self.dst = dst
        self.trace = trace
        self.rng = rng
        self.rx = Channel(dst, f"{cfg.name}-rx")
        self.bytes_sent = 0
        self.bytes_delivered = 0
        self.messages_sent = 0
        self.messages_delivered = 0
        self._tx_ch = Channel(src, f"{cfg.name}-tx")
        self._inflight: deque = deque()
        self._rx_kick = event_init(f"{cfg.name}-rx-kick")
        self._pending = None            # tx pump bookkeeping across suspensions
        self._acct = 0
        spawn(src, ctx_init(_link_tx_body, self, label=f"{cfg.name}-tx"))
        spawn(dst, ctx_init(_link_rx_body, self, label=f"{cfg.name}-rx"))

    def send(self, payload, nbytes: int, done_ev: Optional[Event] = None,
             meta=None, frame: Optional[int] = None) -> Event:
        """Queue a message; returns the receiver-side delivery event.

        ``done_ev`` (if given) completes when the last byte leaves the sender.
        """
        if nbytes < 0:
            raise UsageError("negative message size")
        cfg = self.cfg
        if nbytes > cfg.mtu and not cfg.segmentation:
            raise UsageError(
                f"{nbytes} B exceeds the {cfg.mtu} B mtu and segmentation is disabled")
        delivery = event_init(f"{cfg.name}-delivery")
        self._tx_ch.put((payload, nbytes, done_ev, delivery, meta, frame))
        return delivery


@coroutine
def _link_tx_body(ctx):
    link = ctx.args
    loop = link.src
    cfg = link.cfg
    while True:
        if ctx.resume_point == 0:
            req = link._tx_ch.try_get()
            if req is None:
                return wait(link._tx_ch.ready_event, then=0)
            payload, nbytes, done_ev, delivery, meta, frame = req
            link.trace.emit(loop, Kind.LINK_TX_START, cfg.name, frame)
            ser = cfg.serialization_us(nbytes)
            if cfg.jitter_us and link.rng is not None:
                ser = max(1, ser + link.rng.randint(-cfg.jitter_us, cfg.jitter_us))
            start_global = loop.now - loop.offset_us
            first_byte_global = start_global + cfg.base_latency_us + cfg.injected_delay_us
            last_byte_global = first_byte_global + ser
            dst = link.dst
            schedule_completion(dst, delivery, last_byte_global + dst.offset_us)
            link._inflight.append(
                (delivery, Received(payload, nbytes, meta, first_byte_global + dst.offset_us),
                 frame))
            pulse(dst, link._rx_kick)
            if done_ev is not None:
                schedule_completion(loop, done_ev, loop.now + ser)
            link._pending = sleep_until(loop, loop.now + ser, f"{cfg.name}-ser")
            link._acct = nbytes
            return wait(link._pending, then=1)
        # serialization finished: the link is free for the next message
        link.bytes_sent += link._acct
        link.messages_sent += 1
        ctx.resume_point = 0


@coroutine
def _link_rx_body(ctx):
    link = ctx.args
    loop = link.dst
    while True:
        if ctx.resume_point == 0:
            if not link._inflight:
                return wait(link._rx_kick, then=0)
            return wait(link._inflight[0][0], then=1)
        _, received, frame = link._inflight.popleft()
        link.trace.emit(loop, Kind.LINK_RX_END, link.cfg.name, frame)
        link.bytes_delivered += received.nbytes
        link.messages_delivered += 1
        link.rx.put(received)
        ctx.resume_point = 0


def link_send(link: Link, payload, nbytes: int, done_ev: Optional[Event] = None,
              meta=None, frame: Optional[int] = None) -> Event:
    return link.send(payload, nbytes, done_ev, meta, frame)


# Radio channel preset: low latency, low bandwidth, tiny packets. The radio
# carries setpoints and logging only, so packet semantics are not modeled.
CRTP_PRESET = LinkConfig(name="crtp", bandwidth_bps=2_000_000,
                         base_latency_us=1000, mtu=31)


# --- compute ------------------------------------------------------------------

class ComputeEngine:
    """Single-server execution resource; overlapping dispatches queue FIFO."""

    def __init__(self, loop: EventLoop, name: str, trace: TraceLog):
        self.loop = loop
        self.name = name
        self.trace = trace
        self.resource = ResourceBusy(loop, name)


class _ComputeJob:
    __slots__ = ("engine", "duration_us", "in_buf", "out", "done_ev", "frame", "sleep_ev")

    def __init__(self, engine, duration_us, in_buf, out, done_ev, frame):
        self.engine = engine
        self.duration_us = duration_us
        self.in_buf = in_buf
        self.out = out
        self.done_ev = done_ev
        self.frame = frame
        self.sleep_ev = None


@coroutine
def _compute_body(ctx):
    st = ctx.args
    eng = st.engine
    loop = eng.loop
    if ctx.resume_point == 0:
        if not eng.resource.try_acquire():
            return wait(eng.resource.free_event, then=0)
        eng.trace.emit(loop, Kind.STAGE_START, eng.name, st.frame)
        st.sleep_ev = sleep_until(loop, loop.now + st.duration_us, f"{eng.name}-run")
        return wait(st.sleep_ev, then=1)
    eng.trace.emit(loop, Kind.STAGE_END, eng.name, st.frame)
    if st.out is not None:
        st.out["sequence"] = st.in_buf.sequence if st.in_buf is not None else st.frame
        st.out["t_us"] = loop.now
    eng.resource.release()
    event_complete(loop, st.done_ev)
    return done()


def compute_run(engine: ComputeEngine, duration_us: int, in_buf: Optional[FrameBuffer],
                out: Optional[dict], done_ev: Event, frame: Optional[int] = None) -> None:
    """Dispatch one job to the engine; ``done_ev`` completes after it ran."""
    if in_buf is not None and in_buf.state not in (BufferState.READY, BufferState.IN_USE):
        raise UsageError(f"compute input buffer in state {in_buf.state.name}")
    spawn(engine.loop, ctx_init(_compute_body,
                                _ComputeJob(engine, duration_us, in_buf, out, done_ev, frame),
                                label=f"{engine.name}-job"))


# --- node graph ----------------------------------------------------------------

NODE_NAMES = ("stm32", "nrf51", "gap8", "esp32", "host")

# Directed physical edges of the platform; the camera hangs off the gap8 and
# its parallel interface is folded into the capture readout time.
TOPOLOGY = frozenset({
    ("stm32", "nrf51", "uart"), ("nrf51", "stm32", "uart"),
    ("stm32", "gap8", "uart"), ("gap8", "stm32", "uart"),
    ("gap8", "esp32", "spi"), ("esp32", "gap8", "spi"),
    ("camera", "gap8", "cpi"),
    ("nrf51", "host", "radio"), ("host", "nrf51", "radio"),
    ("esp32", "host", "wifi"), ("host", "esp32", "wifi"),
})


class NodeGraph:
    """The five platform nodes, each with its own loop and fixed clock offset."""

    def __init__(self, clock=None, trace: Optional[TraceLog] = None,
                 offsets: Optional[dict] = None, rng=None):
        self.clock = clock if clock is not None else VirtualClock()
        self.trace = trace if trace is not None else TraceLog()
        self.rng = rng
        offsets = offsets or {}
        unknown = set(offsets) - set(NODE_NAMES)
        if unknown:
            raise ConfigError(f"offsets for unknown nodes: {sorted(unknown)}")
        self.loops = {name: EventLoop(self.clock, name=name,
                                      offset_us=offsets.get(name, 0), trace=self.trace)
                      for name in NODE_NAMES}
        self.links: dict = {}

    def add_link(self, key: str, src: str, dst: str, kind: str, cfg: LinkConfig) -> Link:
        if (src, dst, kind) not in TOPOLOGY:
            raise ConfigError(f"no {kind} edge {src}->{dst} in the platform topology")
        link = Link(cfg, self.loops[src], self.loops[dst], self.trace, rng=self.rng)
        self.links[key] = link
        return link

    def loop(self, name: str) -> EventLoop:
        return self.loops[name]
