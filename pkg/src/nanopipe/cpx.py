"""Routed packet layer: wire framing, zero-copy handles, multi-buffer router.

Wire layout, frozen by golden vectors in the test suite:

    length:   2 B little-endian, counts route byte + function byte + payload
    route:    destination[7:5] | source[4:2] | last_fragment[1] | reserved[0]
    function: version[7:6] | function[5:0]
    payload:  up to 1022 B per fragment

The router (the esp32 role) forwards packet handles between its interfaces
without touching payload bytes. Senders hold transmit credits: a sender that
finds the output queue full suspends until a slot frees, so packets are never
dropped under overload. Baseline mode reproduces the single-buffer,
copy-per-hop stack: queue depth 1 and one payload copy per forward.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .coro import (Event, EventLoop, coroutine, ctx_init, done, event_init, loop_run,
                   pulse, schedule_completion, sleep_until, spawn, wait)
from .errors import ConfigError, ProtocolError, UsageError
from .trace import Kind
from .vnode import Link, NodeGraph

MAX_FRAGMENT_PAYLOAD = 1022

NODE_IDS = {"stm32": 1, "esp32": 2, "host": 3, "gap8": 4}

FUNCTION_APP_STREAM = 5

ZEROCOPY = "zerocopy"
BASELINE = "baseline"
ROUTER_MODES = (ZEROCOPY, BASELINE)

_LEN = struct.Struct("<H")
_HEADER = struct.Struct("<HBB")


@dataclass(slots=True)
class CpxPacket:
    source: int
    destination: int
    function: int
    payload: object = b""               # bytes or a zero-copy memoryview
    last_fragment: bool = True
    version: int = 0
    ingress_ts: Optional[int] = None
    copy_count: int = 0
    meta: object = None                 # simulation-side bookkeeping, not on the wire

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def wire_bytes(self) -> int:
        return 4 + len(self.payload)

    def copy_payload(self) -> bytes:
        """Materialize the payload; the only operation that copies its bytes."""
        self.copy_count += 1
        return bytes(self.payload)

    def header_fields(self):
        return (self.source, self.destination, self.function,
                self.last_fragment, self.version)


def _check_header(src, dst, function, version):
    if not 0 <= src <= 7 or not 0 <= dst <= 7:
        raise ProtocolError(f"node ids must fit 3 bits: src={src} dst={dst}")
    if not 1 <= function <= 63:
        raise ProtocolError(f"function id {function} outside 1..63")
    if not 0 <= version <= 3:
        raise ProtocolError(f"version {version} outside 0..3")


def packet_encode(pkt: CpxPacket) -> bytes:
    src, dst, fn, ver = pkt.source, pkt.destination, pkt.function, pkt.version
    n = len(pkt.payload)
    if n > MAX_FRAGMENT_PAYLOAD:
        raise ProtocolError(
            f"payload {n} B exceeds {MAX_FRAGMENT_PAYLOAD} B per fragment")
    if not (0 <= src <= 7 and 0 <= dst <= 7 and 1 <= fn <= 63 and 0 <= ver <= 3):
        _check_header(src, dst, fn, ver)
    return _HEADER.pack(2 + n,
                        (dst << 5) | (src << 2) | (bool(pkt.last_fragment) << 1),
                        (ver << 6) | fn) + pkt.copy_payload()


def packet_decode(data) -> CpxPacket:
    if len(data) < 4:
        raise ProtocolError(f"frame of {len(data)} B is shorter than the 4 B minimum")
    (length,) = _LEN.unpack_from(data, 0)
    if length != len(data) - 2:
        raise ProtocolError(f"length field {length} disagrees with frame size {len(data)}")
    route = data[2]
    fn_byte = data[3]
    if route & 0x01:
        raise ProtocolError("reserved route bit set")
    pkt = CpxPacket(
        source=(route >> 2) & 0x7,
        destination=(route >> 5) & 0x7,
        function=fn_byte & 0x3F,
        last_fragment=bool(route & 0x02),
        version=(fn_byte >> 6) & 0x3,
        payload=memoryview(data)[4:],   # zero-copy view into the frame
    )
    _check_header(pkt.source, pkt.destination, pkt.function, pkt.version)
    return pkt


def fragment_payload(payload, source: int, destination: int, function: int,
                     version: int = 0) -> list:
    """Split a payload into wire fragments; slices are zero-copy views."""
    view = memoryview(payload)
    total = len(view)
    if total == 0:
        return [CpxPacket(source, destination, function, view, True, version)]
    packets = []
    for off in range(0, total, MAX_FRAGMENT_PAYLOAD):
        chunk = view[off:off + MAX_FRAGMENT_PAYLOAD]
        packets.append(CpxPacket(source, destination, function, chunk,
                                 off + len(chunk) == total, version))
    return packets


def reassemble(packets) -> bytes:
    if not packets or not packets[-1].last_fragment:
        raise ProtocolError("fragment list does not end with a last-fragment packet")
    return b"".join(p.copy_payload() for p in packets)


def timestamp_ingress(loop: EventLoop, pkt: CpxPacket, first_byte_ts: Optional[int] = None):
    """Stamp the packet with this node's clock; a later hop overwrites it."""
    pkt.ingress_ts = loop.now if first_byte_ts is None else first_byte_ts


class RouterQueue:
    """Bounded per-output FIFO with sender-held transmit credits."""

    def __init__(self, loop: EventLoop, name: str, capacity: int):
        if capacity < 1:
            raise ConfigError("router queue capacity must be >= 1")
        self.loop = loop
        self.name = name
        self.capacity = capacity
        self.credits = capacity
        self.items: deque = deque()
        self.kick = event_init(f"{name}-work")
        self._credit_waiters: deque = deque()
        self.enqueued = 0
        self.delivered = 0
        self.max_occupancy = 0

    @property
    def occupancy(self) -> int:
        return self.capacity - self.credits

    def try_reserve(self) -> bool:
        """Sender-side: claim a slot before transmitting toward this queue."""
        if self.credits == 0:
            return False
        self.credits -= 1
        return True

    def register_credit_waiter(self, waiter_loop: EventLoop) -> Event:
        ev = event_init(f"{self.name}-credit")
        self._credit_waiters.append((ev, waiter_loop))
        return ev

    def release_slot(self) -> None:
        if self.credits >= self.capacity:
            raise UsageError(f"credit overflow on queue {self.name}")
        self.credits += 1
        if self._credit_waiters:
            ev, waiter_loop = self._credit_waiters.popleft()
            # wake the sender on its own node, at the current instant
            schedule_completion(waiter_loop, ev, waiter_loop.now)

    def enqueue(self, pkt: CpxPacket) -> None:
        if len(self.items) >= self.capacity:
            raise UsageError(f"queue {self.name} occupancy above capacity")
        self.items.append(pkt)
        self.enqueued += 1
        self.max_occupancy = max(self.max_occupancy, self.occupancy)
        pulse(self.loop, self.kick)

    def try_dequeue(self) -> Optional[CpxPacket]:
        return self.items.popleft() if self.items else None


class Router:
    """Multi-tasking packet router on the esp32 node.

    One ingress task per input link and one egress task per output queue; in
    zerocopy mode ingress and egress overlap, so a stream's throughput is set
    by the slower of the two transfers rather than their sum.
    """

    def __init__(self, graph: NodeGraph, mode: str = ZEROCOPY, queue_capacity: int = 8,
                 copy_ns_per_byte: float = 0.0):
        if mode not in ROUTER_MODES:
            raise ConfigError(f"unknown router mode {mode!r}")
        self.graph = graph
        self.mode = mode
        self.loop = graph.loop("esp32")
        self.trace = graph.trace
        # the single-buffer baseline cannot hold more than one packet
        self.queue_capacity = 1 if mode == BASELINE else queue_capacity
        self.copy_ns_per_byte = copy_ns_per_byte if mode == BASELINE else 0.0
        self.queues: dict = {}
        self._routes: dict = {}
        self.error_count = 0
        self.forwarded = 0

    def attach_interface(self, name: str, in_link: Optional[Link], out_link: Optional[Link],
                         destinations: tuple = ()) -> RouterQueue:
        """Wire one interface: packets for ``destinations`` leave through it."""
        queue = RouterQueue(self.loop, name, self.queue_capacity)
        self.queues[name] = queue
        for dst in destinations:
            self._routes[dst] = (name, queue, out_link)
        if in_link is not None:
            spawn(self.loop, ctx_init(_router_ingress_body, (self, in_link),
                                      label=f"router-rx-{name}"))
        if out_link is not None:
            spawn(self.loop, ctx_init(_router_egress_body,
                                      _EgressRun(self, queue, out_link),
                                      label=f"router-tx-{name}"))
        return queue

    def queue_for(self, destination: int) -> Optional[RouterQueue]:
        entry = self._routes.get(destination)
        return entry[1] if entry else None


def router_forward(router: Router, pkt: CpxPacket) -> None:
    """Pick the output queue from the header and enqueue the packet handle.

    The payload is never touched; an unroutable destination goes to the error
    sink and is counted.
    """
    entry = router._routes.get(pkt.destination)
    if entry is None:
        router.error_count += 1
        router.trace.emit(router.loop, Kind.DROP, "router-error")
        return
    _, queue, _ = entry
    queue.enqueue(pkt)
    router.forwarded += 1


@coroutine
def _router_ingress_body(ctx):
    router, link = ctx.args
    loop = router.loop
    while True:
        msg = link.rx.try_get()
        if msg is None:
            return wait(link.rx.ready_event, then=0)
        pkt = msg.payload
        timestamp_ingress(loop, pkt, msg.first_byte_ts)
        router_forward(router, pkt)


class _EgressRun:
    __slots__ = ("router", "queue", "out_link", "pkt", "ev")

    def __init__(self, router, queue, out_link):
        self.router = router
        self.queue = queue
        self.out_link = out_link
        self.pkt = None
        self.ev = None


@coroutine
def _router_egress_body(ctx):
    st = ctx.args
    router = st.router
    loop = router.loop
    while True:
        if ctx.resume_point == 0:
            pkt = st.queue.try_dequeue()
            if pkt is None:
                return wait(st.queue.kick, then=0)
            st.pkt = pkt
            if router.mode == BASELINE:
                # baseline stack: one payload copy per hop, paid in time
                pkt.copy_count += 1
                copy_us = -(-int(pkt.length * router.copy_ns_per_byte) // 1000)
                st.ev = sleep_until(loop, loop.now + copy_us, "router-copy")
                return wait(st.ev, then=1)
            ctx.resume_point = 1
        if ctx.resume_point == 1:
            frame = st.pkt.meta if isinstance(st.pkt.meta, int) else None
            st.ev = event_init("egress-tx")
            st.out_link.send(st.pkt, st.pkt.wire_bytes, st.ev, frame=frame)
            return wait(st.ev, then=2)
        # last byte left the router: the slot is free again
        st.queue.delivered += 1
        st.queue.release_slot()
        st.pkt = None
        ctx.resume_point = 0


# --- two-way clock-offset estimation -----------------------------------------

class _ProbeRun:
    __slots__ = ("up", "down", "rounds", "samples", "t1")

    def __init__(self, up, down, rounds):
        self.up = up
        self.down = down
        self.rounds = rounds
        self.samples = []
        self.t1 = 0


_PROBE_BYTES = 8


@coroutine
def _probe_body(ctx):
    st = ctx.args
    loop = st.up.src
    while True:
        if ctx.resume_point == 0:
            if len(st.samples) == st.rounds:
                return done()
            st.t1 = loop.now
            st.up.send(b"probe", _PROBE_BYTES, meta="probe")
            ctx.resume_point = 1
        if ctx.resume_point == 1:
            msg = st.down.rx.try_get()
            if msg is None:
                return wait(st.down.rx.ready_event, then=1)
            t2, t3 = msg.meta
            t4 = loop.now
            st.samples.append(((t2 - st.t1) + (t3 - t4)) / 2)
            ctx.resume_point = 0


@coroutine
def _echo_body(ctx):
    st = ctx.args
    loop = st.up.dst
    while True:
        msg = st.up.rx.try_get()
        if msg is None:
            if st.echoed == st.rounds:
                return done()
            return wait(st.up.rx.ready_event, then=0)
        t2 = loop.now
        t3 = loop.now
        st.down.send(b"reply", _PROBE_BYTES, meta=(t2, t3))
        st.echoed += 1


class _EchoRun:
    __slots__ = ("up", "down", "rounds", "echoed")

    def __init__(self, up, down, rounds):
        self.up = up
        self.down = down
        self.rounds = rounds
        self.echoed = 0


def estimate_clock_offset(graph: NodeGraph, node_a: str, node_b: str,
                          rounds: int = 1) -> float:
    """Two-way timestamp exchange between adjacent nodes.

    Returns the estimated clock offset of ``node_b`` relative to ``node_a``
    in microseconds. With symmetric link latency the estimate is exact; an
    asymmetry of d microseconds biases it by d/2.
    """
    if rounds < 1:
        raise ConfigError("offset estimation needs at least one round")
    up = down = None
    for link in graph.links.values():
        if link.src.name == node_a and link.dst.name == node_b:
            up = link
        elif link.src.name == node_b and link.dst.name == node_a:
            down = link
    if up is None or down is None:
        raise ConfigError(f"no bidirectional route between {node_a} and {node_b}")
    probe = _ProbeRun(up, down, rounds)
    spawn(up.src, ctx_init(_probe_body, probe, label=f"offset-probe-{node_a}"))
    spawn(up.dst, ctx_init(_echo_body, _EchoRun(up, down, rounds),
                           label=f"offset-echo-{node_b}"))
    loop_run(up.src)
    return sum(probe.samples) / len(probe.samples)
