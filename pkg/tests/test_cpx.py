"""Wire framing, zero-copy routing, backpressure, and clock-offset estimation."""

import pathlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanopipe.coro import (EventLoop, VirtualClock, coroutine, ctx_init, done, event_init,
                           loop_run, spawn, wait)
from nanopipe.cpx import (BASELINE, FUNCTION_APP_STREAM, MAX_FRAGMENT_PAYLOAD, NODE_IDS,
                          ZEROCOPY, CpxPacket, Router, RouterQueue, estimate_clock_offset,
                          fragment_payload, packet_decode, packet_encode, reassemble,
                          router_forward, timestamp_ingress)
from nanopipe.errors import ConfigError, ProtocolError, UsageError
from nanopipe.pipeline import pool_create
from nanopipe.trace import Kind, TraceLog
from nanopipe.vnode import Link, LinkConfig, NodeGraph

GOLDEN = pathlib.Path(__file__).parent / "golden" / "cpx_frames.txt"


def load_golden():
    rows = []
    for line in GOLDEN.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        src, dst, last, fn, ver, payload_hex, frame_hex = line.split()
        payload = b"" if payload_hex == "-" else bytes.fromhex(payload_hex)
        rows.append((int(src), int(dst), bool(int(last)), int(fn), int(ver),
                     payload, bytes.fromhex(frame_hex)))
    return rows


# --- codec ---

@pytest.mark.parametrize("src,dst,last,fn,ver,payload,frame", load_golden())
def test_golden_vectors_encode(src, dst, last, fn, ver, payload, frame):
    pkt = CpxPacket(source=src, destination=dst, function=fn, payload=payload,
                    last_fragment=last, version=ver)
    assert packet_encode(pkt) == frame


@pytest.mark.parametrize("src,dst,last,fn,ver,payload,frame", load_golden())
def test_golden_vectors_decode(src, dst, last, fn, ver, payload, frame):
    pkt = packet_decode(frame)
    assert pkt.header_fields() == (src, dst, fn, last, ver)
    assert bytes(pkt.payload) == payload


def test_header_only_frame_is_four_bytes_length_two():
    pkt = CpxPacket(source=NODE_IDS["gap8"], destination=NODE_IDS["host"],
                    function=FUNCTION_APP_STREAM)
    frame = packet_encode(pkt)
    assert len(frame) == 4
    assert frame[0] | (frame[1] << 8) == 2


def test_max_payload_frame():
    payload = b"\xab" * MAX_FRAGMENT_PAYLOAD
    frame = packet_encode(CpxPacket(4, 2, 5, payload, last_fragment=False))
    assert frame[:4] == bytes.fromhex("00045005")
    assert frame[4:] == payload
    assert packet_encode(CpxPacket(4, 2, 5, payload)) != frame  # last_fragment bit


def test_oversized_payload_rejected():
    with pytest.raises(ProtocolError):
        packet_encode(CpxPacket(4, 2, 5, b"x" * (MAX_FRAGMENT_PAYLOAD + 1)))


def test_bad_header_fields_rejected():
    for pkt in (CpxPacket(8, 2, 5), CpxPacket(4, -1, 5), CpxPacket(4, 2, 0),
                CpxPacket(4, 2, 64), CpxPacket(4, 2, 5, version=4)):
        with pytest.raises(ProtocolError):
            packet_encode(pkt)


def test_decode_rejects_malformed_frames():
    good = packet_encode(CpxPacket(4, 3, 5, b"ok"))
    with pytest.raises(ProtocolError):
        packet_decode(good[:3])                      # truncated below minimum
    bad_len = bytes((0x09, 0x00)) + good[2:]
    with pytest.raises(ProtocolError):
        packet_decode(bad_len)                       # length disagrees with size
    reserved = bytes((good[0], good[1], good[2] | 0x01, good[3])) + good[4:]
    with pytest.raises(ProtocolError):
        packet_decode(reserved)                      # reserved route bit set


@settings(max_examples=250, deadline=None)
@given(src=st.integers(0, 7), dst=st.integers(0, 7), fn=st.integers(1, 63),
       ver=st.integers(0, 3), last=st.booleans(),
       payload=st.binary(max_size=MAX_FRAGMENT_PAYLOAD))
def test_roundtrip_identity(src, dst, fn, ver, last, payload):
    pkt = CpxPacket(src, dst, fn, payload, last, ver)
    back = packet_decode(packet_encode(pkt))
    assert back.header_fields() == pkt.header_fields()
    assert bytes(back.payload) == payload


def test_roundtrip_fuzz_1000_seeded():
    rng = random.Random(99)
    for _ in range(1000):
        pkt = CpxPacket(rng.randrange(8), rng.randrange(8), rng.randrange(1, 64),
                        rng.randbytes(rng.randrange(0, 200)), bool(rng.getrandbits(1)),
                        rng.randrange(4))
        back = packet_decode(packet_encode(pkt))
        assert back.header_fields() == pkt.header_fields()
        assert bytes(back.payload) == bytes(pkt.payload)


def test_image_fragments_into_26_frames():
    image = bytes(25600)
    frags = fragment_payload(image, NODE_IDS["gap8"], NODE_IDS["host"], FUNCTION_APP_STREAM)
    assert len(frags) == 26                          # ceil(25600 / 1022)
    assert [f.last_fragment for f in frags] == [False] * 25 + [True]
    assert sum(f.length for f in frags) == 25600
    assert all(f.copy_count == 0 for f in frags)     # views, not copies
    assert reassemble(frags) == image


def test_decode_payload_is_zero_copy_view():
    frame = packet_encode(CpxPacket(4, 3, 5, b"zero-copy"))
    pkt = packet_decode(frame)
    assert isinstance(pkt.payload, memoryview)
    assert pkt.copy_count == 0
    pkt.copy_payload()
    assert pkt.copy_count == 1


# --- ingress timestamping ---

def test_ingress_stamp_uses_node_clock_and_offset():
    clock = VirtualClock()
    trace = TraceLog()
    gap8 = EventLoop(clock, name="gap8", offset_us=0, trace=trace)
    esp32 = EventLoop(clock, name="esp32", offset_us=1000, trace=trace)
    clock.now = 5000
    a, b = CpxPacket(4, 3, 5), CpxPacket(4, 3, 5)
    timestamp_ingress(gap8, a)
    timestamp_ingress(esp32, b)
    assert b.ingress_ts - a.ingress_ts == 1000


def test_restamp_overwrites_with_latest_hop():
    loop = EventLoop(VirtualClock(), name="n", trace=TraceLog())
    pkt = CpxPacket(4, 3, 5)
    timestamp_ingress(loop, pkt, 111)
    timestamp_ingress(loop, pkt, 222)
    assert pkt.ingress_ts == 222


def test_fragments_of_one_image_stamped_serialization_apart():
    # base latency 0: consecutive fragments land exactly one wire time apart
    clock = VirtualClock()
    trace = TraceLog()
    gap8 = EventLoop(clock, name="gap8", trace=trace)
    esp32 = EventLoop(clock, name="esp32", trace=trace)
    cfg = LinkConfig("spi", bandwidth_bps=8_000_000, base_latency_us=0, mtu=2048)
    link = Link(cfg, gap8, esp32, trace)
    frags = fragment_payload(bytes(2044), 4, 2, 5)
    assert len(frags) == 2
    for f in frags:
        link.send(f, f.wire_bytes, frame=0)
    loop_run(gap8)
    stamps = []
    while True:
        msg = link.rx.try_get()
        if msg is None:
            break
        timestamp_ingress(esp32, msg.payload, msg.first_byte_ts)
        stamps.append(msg.payload.ingress_ts)
    assert stamps[1] - stamps[0] == cfg.serialization_us(frags[0].wire_bytes)
    assert stamps[1] - stamps[0] == cfg.transfer_time_us(frags[0].wire_bytes)


# --- router ---

def build_router_rig(mode, t_spi_us, t_wifi_us, nbytes, capacity=4,
                     copy_ns_per_byte=0.0, wifi_base_us=0):
    """gap8 -> spi -> esp32 router -> wifi -> host, with a recording sink."""
    graph = NodeGraph()
    spi_bw = nbytes * 8 * 1_000_000 // t_spi_us
    wifi_bw = nbytes * 8 * 1_000_000 // t_wifi_us
    spi_up = graph.add_link("spi_up", "gap8", "esp32", "spi",
                            LinkConfig("spi", spi_bw, 0, mtu=1 << 20))
    spi_down = graph.add_link("spi_down", "esp32", "gap8", "spi",
                              LinkConfig("spi", spi_bw, 0, mtu=1 << 20))
    wifi_up = graph.add_link("wifi_up", "esp32", "host", "wifi",
                             LinkConfig("wifi", wifi_bw, wifi_base_us, mtu=1 << 20))
    wifi_down = graph.add_link("wifi_down", "host", "esp32", "wifi",
                               LinkConfig("wifi", wifi_bw, wifi_base_us, mtu=1 << 20))
    router = Router(graph, mode=mode, queue_capacity=capacity,
                    copy_ns_per_byte=copy_ns_per_byte)
    router.attach_interface("wifi", in_link=wifi_down, out_link=wifi_up,
                            destinations=(NODE_IDS["host"],))
    router.attach_interface("spi", in_link=spi_up, out_link=spi_down,
                            destinations=(NODE_IDS["gap8"], NODE_IDS["stm32"]))
    return graph, router, spi_up


class _StreamSender:
    __slots__ = ("link", "queue", "trace", "frames", "nbytes", "period_us",
                 "sent", "pkt", "ev", "t0", "made")

    def __init__(self, link, queue, trace, frames, nbytes, period_us):
        self.link = link
        self.queue = queue
        self.trace = trace
        self.frames = frames
        self.nbytes = nbytes
        self.period_us = period_us      # 0 = free-run
        self.sent = 0
        self.pkt = None
        self.ev = None
        self.t0 = link.src.now
        self.made = []


@coroutine
def _stream_sender_body(ctx):
    """Credit-gated image sender on the gap8 loop."""
    from nanopipe.coro import sleep_until
    st = ctx.args
    loop = st.link.src
    while True:
        if ctx.resume_point == 0:
            if st.sent == st.frames:
                return done()
            if st.period_us:
                st.ev = sleep_until(loop, st.t0 + st.sent * st.period_us, "pace")
                return wait(st.ev, then=1)
            ctx.resume_point = 1
        if ctx.resume_point == 1:
            st.pkt = CpxPacket(NODE_IDS["gap8"], NODE_IDS["host"], FUNCTION_APP_STREAM,
                               memoryview(bytes(st.nbytes)), meta=st.sent)
            st.made.append(st.pkt)
            ctx.resume_point = 2
        if ctx.resume_point == 2:
            if not st.queue.try_reserve():
                st.trace.emit(loop, Kind.QUEUE_FULL, st.queue.name, st.sent)
                st.ev = st.queue.register_credit_waiter(loop)
                return wait(st.ev, then=2)
            st.ev = event_init("spi-tx-done")
            st.link.send(st.pkt, st.pkt.wire_bytes, st.ev, frame=st.sent)
            return wait(st.ev, then=3)
        st.sent += 1
        st.pkt = None
        ctx.resume_point = 0


def run_stream(mode, t_spi_us, t_wifi_us, nbytes=25600, frames=40, capacity=4,
               copy_ns_per_byte=0.0, period_us=0):
    graph, router, spi_up = build_router_rig(mode, t_spi_us, t_wifi_us, nbytes,
                                             capacity, copy_ns_per_byte)
    wifi_q = router.queues["wifi"]
    sender = _StreamSender(spi_up, wifi_q, graph.trace, frames, nbytes, period_us)
    spawn(graph.loop("gap8"), ctx_init(_stream_sender_body, sender, label="image-tx"))
    arrivals = []

    @coroutine
    def host_sink(ctx):
        link = graph.links["wifi_up"]
        while True:
            msg = link.rx.try_get()
            if msg is None:
                return wait(link.rx.ready_event, then=0)
            arrivals.append((msg.payload.meta, graph.loop("host").now, msg.payload))

    spawn(graph.loop("host"), ctx_init(host_sink, None, label="host-sink"))
    loop_run(graph.loop("gap8"))
    return graph, router, sender, arrivals


def test_zero_copy_forwarding_copy_count_delta_zero():
    _, router, sender, arrivals = run_stream(ZEROCOPY, 10000, 10000, frames=10)
    assert len(arrivals) == 10
    assert all(pkt.copy_count == 0 for _, _, pkt in arrivals)
    assert router.forwarded == 10 and router.error_count == 0


def test_baseline_copies_once_per_forward():
    _, router, sender, arrivals = run_stream(BASELINE, 10000, 10000, frames=10)
    assert all(pkt.copy_count == 1 for _, _, pkt in arrivals)


def test_overlap_doubles_throughput_when_hops_are_equal():
    # t_spi = t_wifi = ~10 ms per frame: the overlapped router sustains one
    # frame per hop time (~100 frame/s) vs. one per the sum (~50 frame/s)
    wire = 25600 + 4
    graph, _, _, fast = run_stream(ZEROCOPY, 10000, 10000, frames=30)
    hop = graph.links["wifi_up"].cfg.serialization_us(wire)
    assert abs(hop - 10000) <= 2
    gaps = [b - a for (_, a, _), (_, b, _) in zip(fast[10:], fast[11:])]
    assert all(g == hop for g in gaps)

    graph, _, _, slow = run_stream(BASELINE, 10000, 10000, frames=30)
    both = (graph.links["spi_up"].cfg.serialization_us(wire)
            + graph.links["wifi_up"].cfg.serialization_us(wire))
    gaps = [b - a for (_, a, _), (_, b, _) in zip(slow[10:], slow[11:])]
    assert all(g == both for g in gaps)


def test_backpressure_no_loss_under_2x_overload_for_10s():
    # wifi sustains 10 ms/frame; the sender offers every 5 ms for 10 simulated
    # seconds: everything sent must eventually arrive, in order, none dropped
    frames = 2000                            # 2000 * 5 ms of offered load
    graph, router, sender, arrivals = run_stream(ZEROCOPY, 2000, 10000,
                                                 frames=frames, period_us=5000)
    assert sender.sent == frames
    assert [a[0] for a in arrivals] == list(range(frames))
    q = router.queues["wifi"]
    assert q.enqueued == q.delivered == frames
    assert q.max_occupancy <= q.capacity
    assert graph.trace.count(Kind.QUEUE_FULL, "wifi") > 0    # it really blocked
    assert graph.loop("gap8").now >= 10_000_000


def test_conservation_enqueued_equals_delivered_plus_in_flight():
    graph, router, sender, arrivals = run_stream(ZEROCOPY, 3000, 9000, frames=25)
    q = router.queues["wifi"]
    assert q.enqueued == q.delivered + len(q.items)
    assert len(q.items) == 0
    assert len(arrivals) == 25


def test_unknown_destination_goes_to_error_sink():
    graph, router, _ = build_router_rig(ZEROCOPY, 1000, 1000, 100)
    pkt = CpxPacket(NODE_IDS["gap8"], 6, 9)      # 6: no interface routes there
    router_forward(router, pkt)
    assert router.error_count == 1
    ok = CpxPacket(NODE_IDS["gap8"], NODE_IDS["host"], 9)
    router.queues["wifi"].try_reserve()
    router_forward(router, ok)
    assert router.forwarded == 1


def test_baseline_forces_queue_depth_one():
    _, router, _ = build_router_rig(BASELINE, 1000, 1000, 100, capacity=8)
    assert router.queues["wifi"].capacity == 1


def test_router_mode_validated():
    with pytest.raises(ConfigError):
        Router(NodeGraph(), mode="turbo")


# --- clock offset estimation ---

def offset_rig(offset_b, up_base, down_base):
    graph = NodeGraph(offsets={"esp32": offset_b})
    graph.add_link("up", "gap8", "esp32", "spi",
                   LinkConfig("spi", 8_000_000, up_base, mtu=64))
    graph.add_link("down", "esp32", "gap8", "spi",
                   LinkConfig("spi", 8_000_000, down_base, mtu=64))
    return graph


def test_offset_estimate_exact_with_symmetric_latency():
    graph = offset_rig(1000, 2000, 2000)
    assert estimate_clock_offset(graph, "gap8", "esp32", rounds=1) == 1000.0


def test_offset_zero_estimates_zero():
    graph = offset_rig(0, 1500, 1500)
    assert estimate_clock_offset(graph, "gap8", "esp32", rounds=3) == 0.0


def test_offset_bias_is_half_the_asymmetry():
    # 2 ms up vs 4 ms down: the exchange under-reads the offset by 1 ms
    graph = offset_rig(10_000, 2000, 4000)
    est = estimate_clock_offset(graph, "gap8", "esp32", rounds=2)
    assert est == 10_000 - 1000


def test_offset_requires_route_and_rounds():
    graph = NodeGraph()
    with pytest.raises(ConfigError):
        estimate_clock_offset(graph, "gap8", "esp32", rounds=1)
    with pytest.raises(ConfigError):
        estimate_clock_offset(offset_rig(0, 1, 1), "gap8", "esp32", rounds=0)
