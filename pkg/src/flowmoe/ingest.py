"""Packet capture ingestion: bidirectional flow assembly and PAY+HDR features.

A flow is every packet sharing a canonical five-tuple (endpoint pair sorted
so the lexicographically smaller (ip, port) comes first, plus transport
protocol). Direction is taken relative to the source of the flow's first
packet. Each flow becomes one feature vector: the first `nb` payload bytes
normalized to [0, 1], plus four header fields (payload length, TCP window,
inter-arrival time, direction) for the first `npkt` packets.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TCP = "TCP"
UDP = "UDP"


@dataclass
class Packet:
    timestamp: float
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: str
    payload: bytes = b""
    tcp_window: int = 0

    def endpoint_src(self):
        return (self.src_ip, self.src_port)

    def endpoint_dst(self):
        return (self.dst_ip, self.dst_port)

    def validate(self):
        if self.protocol not in (TCP, UDP):
            raise ValueError(f"unsupported protocol {self.protocol!r}")
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port {port} out of range")
        if not isinstance(self.payload, (bytes, bytearray)):
            raise ValueError("payload must be a byte sequence")
        if not 0 <= self.tcp_window <= 65535:
            raise ValueError(f"tcp window {self.tcp_window} out of range")
        if self.timestamp < 0:
            raise ValueError("negative timestamp")


@dataclass(frozen=True)
class FlowKey:
    protocol: str
    endpoint_a: tuple
    endpoint_b: tuple

    @classmethod
    def of(cls, pkt: Packet) -> "FlowKey":
        a, b = pkt.endpoint_src(), pkt.endpoint_dst()
        if b < a:
            a, b = b, a
        return cls(pkt.protocol, a, b)

    def as_id(self) -> str:
        (ip1, p1), (ip2, p2) = self.endpoint_a, self.endpoint_b
        return f"{self.protocol.lower()}_{ip1}:{p1}_{ip2}:{p2}"


@dataclass
class Flow:
    key: FlowKey
    packets: list
    forward_endpoint: tuple
    flow_id: str = ""

    def __post_init__(self):
        if not self.flow_id:
            self.flow_id = self.key.as_id()

    def direction(self, pkt: Packet) -> int:
        return 0 if pkt.endpoint_src() == self.forward_endpoint else 1


@dataclass
class ExtractionConfig:
    nb: int = 784
    npkt: int = 32
    # divisors for payload_len / tcp_window / inter-arrival / direction
    hdr_scales: tuple = (1500.0, 65535.0, 1.0, 1.0)

    def __post_init__(self):
        if self.nb <= 0 or self.npkt <= 0:
            raise ValueError("nb and npkt must be positive")

    @property
    def dim(self):
        return self.nb + 4 * self.npkt


@dataclass
class FeatureVector:
    pay: np.ndarray
    hdr: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.pay, self.hdr.reshape(-1)])


def assemble_flows(packets) -> list:
    """Group packets into bidirectional five-tuple flows.

    Malformed packets are skipped (counted in a warning), never fatal.
    Flow order follows first appearance; packets within a flow are sorted
    by timestamp with ties keeping arrival order.
    """
    flows: dict[FlowKey, list] = {}
    order: list[FlowKey] = []
    skipped = 0
    for pkt in packets:
        try:
            pkt.validate()
            key = FlowKey.of(pkt)
        except (ValueError, AttributeError, TypeError):
            skipped += 1
            continue
        if key not in flows:
            flows[key] = []
            order.append(key)
        flows[key].append(pkt)
    if skipped:
        log.warning("skipped %d malformed packet(s)", skipped)
    out = []
    for key in order:
        pkts = sorted(flows[key], key=lambda p: p.timestamp)
        out.append(Flow(key=key, packets=pkts,
                        forward_endpoint=pkts[0].endpoint_src()))
    return out


def extract_features(flow: Flow, cfg: ExtractionConfig = None) -> FeatureVector:
    """Build the PAY + HDR feature vector for one flow."""
    if cfg is None:
        cfg = ExtractionConfig()
    if not flow.packets:
        raise ValueError("empty flow")

    stream = b"".join(p.payload for p in flow.packets)[: cfg.nb]
    pay = np.zeros(cfg.nb)
    if stream:
        pay[: len(stream)] = np.frombuffer(stream, dtype=np.uint8) / 255.0

    hdr = np.zeros((cfg.npkt, 4))
    s_len, s_win, s_iat, s_dir = cfg.hdr_scales
    prev_ts = None
    for row, pkt in enumerate(flow.packets[: cfg.npkt]):
        iat = 0.0 if prev_ts is None else pkt.timestamp - prev_ts
        prev_ts = pkt.timestamp
        window = pkt.tcp_window if pkt.protocol == TCP else 0
        hdr[row, 0] = len(pkt.payload) / s_len
        hdr[row, 1] = window / s_win
        hdr[row, 2] = min(max(iat / s_iat, 0.0), 1.0)
        hdr[row, 3] = flow.direction(pkt) / s_dir
    return FeatureVector(pay=pay, hdr=hdr)


# -- pcap reading ----------------------------------------------------------

_PCAP_MAGICS = {
    0xA1B2C3D4: ("<", 1e-6),   # little-endian, microseconds
    0xD4C3B2A1: (">", 1e-6),
    0xA1B23C4D: ("<", 1e-9),   # nanosecond variants
    0x4D3CB2A1: (">", 1e-9),
}

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101


def read_pcap(path) -> list:
    """Parse a libpcap file into Packet records (TCP/UDP over IPv4 only).

    Timestamps are rebased to seconds since the first packet. Anything
    unparseable (non-IP, fragments, truncated records) is skipped and
    counted.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise ValueError(f"{path}: not a pcap file (too short)")
    magic = struct.unpack("<I", data[:4])[0]
    if magic not in _PCAP_MAGICS:
        magic = struct.unpack(">I", data[:4])[0]
    if magic not in _PCAP_MAGICS:
        raise ValueError(f"{path}: unknown pcap magic")
    endian, tick = _PCAP_MAGICS[magic]
    linktype = struct.unpack(endian + "I", data[20:24])[0] & 0x0FFFFFFF

    packets = []
    skipped = 0
    offset = 24
    first_ts = None
    while offset + 16 <= len(data):
        sec, frac, incl, _orig = struct.unpack(endian + "IIII",
                                               data[offset:offset + 16])
        offset += 16
        frame = data[offset:offset + incl]
        offset += incl
        if len(frame) < incl:
            skipped += 1
            break
        ts = sec + frac * tick
        if first_ts is None:
            first_ts = ts
        pkt = _parse_frame(frame, linktype, ts - first_ts)
        if pkt is None:
            skipped += 1
        else:
            packets.append(pkt)
    if skipped:
        log.warning("%s: skipped %d unparseable record(s)", path, skipped)
    return packets


def _parse_frame(frame, linktype, ts):
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        ethertype = struct.unpack(">H", frame[12:14])[0]
        off = 14
        if ethertype == 0x8100 and len(frame) >= 18:  # single VLAN tag
            ethertype = struct.unpack(">H", frame[16:18])[0]
            off = 18
        if ethertype != 0x0800:
            return None
        return _parse_ipv4(frame[off:], ts)
    if linktype == LINKTYPE_RAW:
        return _parse_ipv4(frame, ts)
    return None


def _parse_ipv4(buf, ts):
    if len(buf) < 20:
        return None
    ver_ihl = buf[0]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    total_len = struct.unpack(">H", buf[2:4])[0]
    flags_frag = struct.unpack(">H", buf[6:8])[0]
    if flags_frag & 0x1FFF or flags_frag & 0x2000:  # fragmented: no reassembly
        return None
    proto = buf[9]
    if proto not in (6, 17) or len(buf) < ihl:
        return None
    src = ".".join(str(b) for b in buf[12:16])
    dst = ".".join(str(b) for b in buf[16:20])
    seg = buf[ihl:min(total_len, len(buf))]
    if proto == 6:
        if len(seg) < 20:
            return None
        sport, dport = struct.unpack(">HH", seg[:4])
        doff = (seg[12] >> 4) * 4
        window = struct.unpack(">H", seg[14:16])[0]
        if len(seg) < doff:
            return None
        return Packet(ts, src, sport, dst, dport, TCP, bytes(seg[doff:]), window)
    if len(seg) < 8:
        return None
    sport, dport, ulen = struct.unpack(">HHH", seg[:6])
    payload = bytes(seg[8:max(8, min(ulen, len(seg)))])
    return Packet(ts, src, sport, dst, dport, UDP, payload, 0)


# -- flow-record text format ------------------------------------------------
#
# One flow per line:
#   <flow_id> <proto> <fwd_ip:port> <rev_ip:port> <pkt> <pkt> ...
# where <pkt> is ts,dir,len,window[,payload_hex]. The first listed endpoint
# is the forward endpoint (the first packet's source), so dir=0 packets
# originate there. `len` must equal the decoded payload length when the hex
# field is present.

def write_flow_records(flows, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# flowmoe flow records v1\n")
        for flow in flows:
            fh.write(format_flow_record(flow) + "\n")


def format_flow_record(flow: Flow) -> str:
    fwd = flow.forward_endpoint
    rev_candidates = [ep for ep in (flow.key.endpoint_a, flow.key.endpoint_b)
                      if ep != fwd]
    rev = rev_candidates[0] if rev_candidates else fwd
    parts = [flow.flow_id, flow.key.protocol.lower(),
             f"{fwd[0]}:{fwd[1]}", f"{rev[0]}:{rev[1]}"]
    for pkt in flow.packets:
        fields = [repr(pkt.timestamp), str(flow.direction(pkt)),
                  str(len(pkt.payload)),
                  str(pkt.tcp_window if pkt.protocol == TCP else 0)]
        if pkt.payload:
            fields.append(pkt.payload.hex())
        parts.append(",".join(fields))
    return " ".join(parts)


def read_flow_records(path) -> list:
    """Parse the newline-delimited flow-record format back into Flows."""
    flows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                flows.append(_parse_record_line(line))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad flow record: {exc}") from exc
    return flows


def _parse_record_line(line) -> Flow:
    parts = line.split(" ")
    if len(parts) < 5:
        raise ValueError("expected flow id, proto, two endpoints and packets")
    flow_id, proto = parts[0], parts[1].upper()
    if proto not in (TCP, UDP):
        raise ValueError(f"unknown protocol {parts[1]!r}")

    def endpoint(text):
        ip, _, port = text.rpartition(":")
        return ip, int(port)

    fwd, rev = endpoint(parts[2]), endpoint(parts[3])
    packets = []
    for token in parts[4:]:
        fields = token.split(",")
        if len(fields) not in (4, 5):
            raise ValueError(f"packet tuple {token!r} needs 4 or 5 fields")
        ts, direction, plen, window = (float(fields[0]), int(fields[1]),
                                       int(fields[2]), int(fields[3]))
        if len(fields) == 5:
            payload = bytes.fromhex(fields[4])
            if len(payload) != plen:
                raise ValueError(f"payload length {len(payload)} != declared {plen}")
        else:
            payload = bytes(plen)  # length-only record: zero-filled payload
        src, dst = (fwd, rev) if direction == 0 else (rev, fwd)
        packets.append(Packet(ts, src[0], src[1], dst[0], dst[1], proto,
                              payload, window if proto == TCP else 0))
    packets.sort(key=lambda p: p.timestamp)
    key = FlowKey.of(packets[0])
    return Flow(key=key, packets=packets, forward_endpoint=fwd, flow_id=flow_id)


def flows_to_features(flows, cfg=None):
    """Feature matrix plus flow ids for a list of flows."""
    if cfg is None:
        cfg = ExtractionConfig()
    ids = [f.flow_id for f in flows]
    mat = np.zeros((len(flows), cfg.dim))
    for i, flow in enumerate(flows):
        mat[i] = extract_features(flow, cfg).flat
    return ids, mat
