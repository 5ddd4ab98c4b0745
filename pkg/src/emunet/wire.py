"""Byte-exact wire formats shared by the device model, NAT stack and guest.

Ethernet II framing (RFC 894), ARP, IPv4 without options (RFC 791), UDP,
TCP without options on encode (RFC 793), DHCP (RFC 2131) and HTTP/1.1
message units.  No frame check sequence is carried on the virtual wire;
frames are payload-only and zero-padded to the 60 byte minimum.

All functions here are pure and safe to call from any thread.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806

ETH_HEADER_LEN = 14
ETH_MIN_FRAME = 60
ETH_MAX_FRAME = 1514
ETH_MAX_PAYLOAD = 1500

IPPROTO_ICMP = 1
IPPROTO_TCP = 6
IPPROTO_UDP = 17

ARP_OP_REQUEST = 1
ARP_OP_REPLY = 2

DHCP_MAGIC_COOKIE = 0x63825363
DHCP_DISCOVER = 1
DHCP_OFFER = 2
DHCP_REQUEST = 3
DHCP_ACK = 5
DHCP_NAK = 6

DHCP_OPT_SUBNET_MASK = 1
DHCP_OPT_ROUTER = 3
DHCP_OPT_REQUESTED_IP = 50
DHCP_OPT_LEASE_TIME = 51
DHCP_OPT_MESSAGE_TYPE = 53
DHCP_OPT_SERVER_ID = 54
DHCP_OPT_END = 255
DHCP_OPT_PAD = 0


class WireError(Exception):
    """Base for encode/decode failures."""


class EncodeError(WireError):
    pass


class DecodeError(WireError):
    pass


class HttpParseError(WireError):
    pass


def ip_to_bytes(text: str) -> bytes:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"not a dotted-quad address: {text!r}")
    octets = []
    for part in parts:
        if not part.isdigit() or not 0 <= int(part) <= 255:
            raise ValueError(f"not a dotted-quad address: {text!r}")
        octets.append(int(part))
    return bytes(octets)


def ip_to_str(raw: bytes) -> str:
    if len(raw) != 4:
        raise ValueError("IPv4 address must be 4 bytes")
    return ".".join(str(b) for b in raw)


@dataclass(frozen=True)
class MacAddress:
    octets: bytes

    def __post_init__(self) -> None:
        if len(self.octets) != 6:
            raise ValueError("MAC address must be 6 bytes")

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        parts = text.split(":")
        if len(parts) != 6:
            raise ValueError(f"not a MAC address: {text!r}")
        return cls(bytes(int(p, 16) for p in parts))

    @property
    def is_broadcast(self) -> bool:
        return self.octets == b"\xff" * 6

    @property
    def is_multicast(self) -> bool:
        return bool(self.octets[0] & 1)

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)


BROADCAST_MAC = MacAddress(b"\xff" * 6)
ZERO_MAC = MacAddress(b"\x00" * 6)


@dataclass
class EthernetFrame:
    dst: MacAddress
    src: MacAddress
    ethertype: int
    payload: bytes = b""


def encode_frame(frame: EthernetFrame) -> bytes:
    """Encode to wire bytes, zero-padded to the 60 byte minimum."""
    if len(frame.payload) > ETH_MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(frame.payload)} bytes exceeds {ETH_MAX_PAYLOAD}")
    raw = frame.dst.octets + frame.src.octets + struct.pack("!H", frame.ethertype) + frame.payload
    if len(raw) < ETH_MIN_FRAME:
        raw += b"\x00" * (ETH_MIN_FRAME - len(raw))
    return raw


def decode_frame(raw: bytes) -> EthernetFrame:
    if len(raw) < ETH_HEADER_LEN:
        raise DecodeError(f"truncated frame: {len(raw)} bytes")
    dst = MacAddress(bytes(raw[0:6]))
    src = MacAddress(bytes(raw[6:12]))
    (ethertype,) = struct.unpack_from("!H", raw, 12)
    return EthernetFrame(dst, src, ethertype, bytes(raw[14:]))


def _sum16(data: bytes, total: int = 0) -> int:
    """Ones-complement 16-bit word sum; odd lengths padded with a zero byte."""
    if len(data) % 2:
        data = data + b"\x00"
    total += sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def ipv4_checksum(header: bytes) -> int:
    """Header checksum: ones-complement of the ones-complement word sum.

    The caller must zero the checksum field first.
    """
    if len(header) % 2:
        raise ValueError("header length must be a multiple of 2")
    if len(header) < 20:
        raise ValueError("header shorter than 20 bytes")
    return ~_sum16(header) & 0xFFFF


def tcp_checksum(src_ip: bytes, dst_ip: bytes, segment: bytes) -> int:
    """TCP checksum over the IPv4 pseudo-header plus the segment bytes.

    The checksum field inside ``segment`` must be zeroed by the caller.
    """
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_TCP, len(segment))
    return ~_sum16(segment, _sum16(pseudo)) & 0xFFFF


def udp_checksum(src_ip: bytes, dst_ip: bytes, datagram: bytes) -> int:
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_UDP, len(datagram))
    value = ~_sum16(datagram, _sum16(pseudo)) & 0xFFFF
    return value or 0xFFFF  # 0 means "no checksum" on the wire


@dataclass
class Ipv4Packet:
    src_ip: bytes
    dst_ip: bytes
    protocol: int
    payload: bytes = b""
    ttl: int = 64
    ident: int = 0
    header_checksum: int = 0  # filled in by decode; computed by encode


def encode_ipv4(pkt: Ipv4Packet) -> bytes:
    total = 20 + len(pkt.payload)
    if total > 0xFFFF:
        raise EncodeError("IPv4 payload too large")
    header = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x45, 0, total, pkt.ident & 0xFFFF, 0,
            pkt.ttl, pkt.protocol, 0, pkt.src_ip, pkt.dst_ip,
        )
    )
    checksum = ipv4_checksum(bytes(header))
    struct.pack_into("!H", header, 10, checksum)
    return bytes(header) + pkt.payload


def decode_ipv4(raw: bytes) -> Ipv4Packet:
    if len(raw) < 20:
        raise DecodeError("truncated IPv4 header")
    ver_ihl = raw[0]
    if ver_ihl >> 4 != 4:
        raise DecodeError(f"not IPv4: version {ver_ihl >> 4}")
    if ver_ihl & 0xF != 5:
        raise DecodeError("IPv4 options not supported")
    if _sum16(bytes(raw[:20])) != 0xFFFF:
        raise DecodeError("IPv4 header checksum mismatch")
    total, = struct.unpack_from("!H", raw, 2)
    if total < 20 or total > len(raw):
        raise DecodeError(f"bad IPv4 total length {total}")
    checksum, = struct.unpack_from("!H", raw, 10)
    return Ipv4Packet(
        src_ip=bytes(raw[12:16]),
        dst_ip=bytes(raw[16:20]),
        protocol=raw[9],
        payload=bytes(raw[20:total]),
        ttl=raw[8],
        ident=struct.unpack_from("!H", raw, 4)[0],
        header_checksum=checksum,
    )


TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


@dataclass
class TcpSegment:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    syn: bool = False
    ack_flag: bool = False
    fin: bool = False
    rst: bool = False
    psh: bool = False
    window: int = 8192
    payload: bytes = b""


def encode_tcp(seg: TcpSegment, src_ip: bytes, dst_ip: bytes) -> bytes:
    flags = (
        (TCP_FIN if seg.fin else 0)
        | (TCP_SYN if seg.syn else 0)
        | (TCP_RST if seg.rst else 0)
        | (TCP_PSH if seg.psh else 0)
        | (TCP_ACK if seg.ack_flag else 0)
    )
    header = bytearray(
        struct.pack(
            "!HHIIBBHHH",
            seg.src_port, seg.dst_port,
            seg.seq & 0xFFFFFFFF, seg.ack & 0xFFFFFFFF,
            5 << 4, flags, seg.window, 0, 0,
        )
    )
    checksum = tcp_checksum(src_ip, dst_ip, bytes(header) + seg.payload)
    struct.pack_into("!H", header, 16, checksum)
    return bytes(header) + seg.payload


def decode_tcp(raw: bytes, src_ip: bytes, dst_ip: bytes) -> TcpSegment:
    if len(raw) < 20:
        raise DecodeError("truncated TCP header")
    if _sum16(raw, _sum16(src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_TCP, len(raw)))) != 0xFFFF:
        raise DecodeError("TCP checksum mismatch")
    src_port, dst_port, seq, ack, off_flags, flags, window = struct.unpack_from("!HHIIBBH", raw, 0)
    offset = (off_flags >> 4) * 4
    if offset < 20 or offset > len(raw):
        raise DecodeError(f"bad TCP data offset {offset}")
    return TcpSegment(
        src_port=src_port,
        dst_port=dst_port,
        seq=seq,
        ack=ack,
        syn=bool(flags & TCP_SYN),
        ack_flag=bool(flags & TCP_ACK),
        fin=bool(flags & TCP_FIN),
        rst=bool(flags & TCP_RST),
        psh=bool(flags & TCP_PSH),
        window=window,
        payload=bytes(raw[offset:]),
    )


@dataclass
class UdpDatagram:
    src_port: int
    dst_port: int
    payload: bytes = b""


def encode_udp(dgram: UdpDatagram, src_ip: bytes, dst_ip: bytes) -> bytes:
    length = 8 + len(dgram.payload)
    header = bytearray(struct.pack("!HHHH", dgram.src_port, dgram.dst_port, length, 0))
    checksum = udp_checksum(src_ip, dst_ip, bytes(header) + dgram.payload)
    struct.pack_into("!H", header, 6, checksum)
    return bytes(header) + dgram.payload


def decode_udp(raw: bytes, src_ip: bytes, dst_ip: bytes) -> UdpDatagram:
    if len(raw) < 8:
        raise DecodeError("truncated UDP header")
    src_port, dst_port, length, checksum = struct.unpack_from("!HHHH", raw, 0)
    if length < 8 or length > len(raw):
        raise DecodeError(f"bad UDP length {length}")
    raw = raw[:length]
    if checksum != 0:  # zero means the sender did not compute one
        if _sum16(raw, _sum16(src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_UDP, length))) != 0xFFFF:
            raise DecodeError("UDP checksum mismatch")
    return UdpDatagram(src_port, dst_port, bytes(raw[8:]))


@dataclass
class ArpPacket:
    op: int
    sender_mac: MacAddress
    sender_ip: bytes
    target_mac: MacAddress
    target_ip: bytes


def encode_arp(pkt: ArpPacket) -> bytes:
    return struct.pack(
        "!HHBBH6s4s6s4s",
        1, ETHERTYPE_IPV4, 6, 4, pkt.op,
        pkt.sender_mac.octets, pkt.sender_ip,
        pkt.target_mac.octets, pkt.target_ip,
    )


def decode_arp(raw: bytes) -> ArpPacket:
    if len(raw) < 28:
        raise DecodeError("truncated ARP packet")
    htype, ptype, hlen, plen, op, sha, spa, tha, tpa = struct.unpack_from("!HHBBH6s4s6s4s", raw, 0)
    if (htype, ptype, hlen, plen) != (1, ETHERTYPE_IPV4, 6, 4):
        raise DecodeError("unsupported ARP header")
    return ArpPacket(op, MacAddress(sha), spa, MacAddress(tha), tpa)


@dataclass
class DhcpMessage:
    op: int  # 1 = request, 2 = reply
    xid: int
    client_mac: MacAddress
    message_type: int
    your_ip: bytes = b"\x00\x00\x00\x00"
    requested_ip: bytes | None = None
    server_id: bytes | None = None
    subnet_mask: bytes | None = None
    router: bytes | None = None
    lease_time: int | None = None


def encode_dhcp(msg: DhcpMessage) -> bytes:
    fixed = struct.pack(
        "!BBBBIHH4s4s4s4s16s64s128sI",
        msg.op, 1, 6, 0, msg.xid & 0xFFFFFFFF, 0, 0,
        b"\x00" * 4, msg.your_ip, b"\x00" * 4, b"\x00" * 4,
        msg.client_mac.octets + b"\x00" * 10, b"", b"",
        DHCP_MAGIC_COOKIE,
    )
    options = bytearray([DHCP_OPT_MESSAGE_TYPE, 1, msg.message_type])
    for code, value in (
        (DHCP_OPT_REQUESTED_IP, msg.requested_ip),
        (DHCP_OPT_SERVER_ID, msg.server_id),
        (DHCP_OPT_SUBNET_MASK, msg.subnet_mask),
        (DHCP_OPT_ROUTER, msg.router),
    ):
        if value is not None:
            options += bytes([code, 4]) + value
    if msg.lease_time is not None:
        options += bytes([DHCP_OPT_LEASE_TIME, 4]) + struct.pack("!I", msg.lease_time)
    options.append(DHCP_OPT_END)
    raw = fixed + bytes(options)
    if len(raw) < 300:  # classic BOOTP minimum
        raw += b"\x00" * (300 - len(raw))
    return raw


def decode_dhcp(raw: bytes) -> DhcpMessage:
    if len(raw) < 240:
        raise DecodeError("truncated DHCP message")
    op, _htype, hlen = raw[0], raw[1], raw[2]
    xid, = struct.unpack_from("!I", raw, 4)
    your_ip = bytes(raw[16:20])
    chaddr = bytes(raw[28:28 + 6]) if hlen == 6 else bytes(raw[28:34])
    cookie, = struct.unpack_from("!I", raw, 236)
    if cookie != DHCP_MAGIC_COOKIE:
        raise DecodeError(f"missing DHCP magic cookie (got 0x{cookie:08x})")
    msg = DhcpMessage(op=op, xid=xid, client_mac=MacAddress(chaddr), message_type=0, your_ip=your_ip)
    pos = 240
    while pos < len(raw):
        code = raw[pos]
        if code == DHCP_OPT_END:
            break
        if code == DHCP_OPT_PAD:
            pos += 1
            continue
        if pos + 1 >= len(raw):
            raise DecodeError("truncated DHCP option")
        length = raw[pos + 1]
        value = bytes(raw[pos + 2:pos + 2 + length])
        if len(value) != length:
            raise DecodeError("truncated DHCP option value")
        if code == DHCP_OPT_MESSAGE_TYPE and length == 1:
            msg.message_type = value[0]
        elif code == DHCP_OPT_REQUESTED_IP and length == 4:
            msg.requested_ip = value
        elif code == DHCP_OPT_SERVER_ID and length == 4:
            msg.server_id = value
        elif code == DHCP_OPT_SUBNET_MASK and length == 4:
            msg.subnet_mask = value
        elif code == DHCP_OPT_ROUTER and length == 4:
            msg.router = value
        elif code == DHCP_OPT_LEASE_TIME and length == 4:
            msg.lease_time = struct.unpack("!I", value)[0]
        # other options ignored
        pos += 2 + length
    if msg.message_type == 0:
        raise DecodeError("DHCP message without message-type option")
    return msg


@dataclass
class HttpRequest:
    method: str
    target: str
    version: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


@dataclass
class HttpResponse:
    status: int
    reason: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""


def encode_response(resp: HttpResponse) -> bytes:
    lines = [f"HTTP/1.1 {resp.status} {resp.reason}\r\n"]
    for name, value in resp.headers:
        lines.append(f"{name}: {value}\r\n")
    lines.append("\r\n")
    return "".join(lines).encode("ascii") + resp.body


class HttpRequestParser:
    """Incremental HTTP/1.1 request parser.

    feed() returns a complete HttpRequest once the head (and any
    Content-Length body) has arrived, else None.  Malformed input raises
    HttpParseError.  Limits are enforced on the head size and header count.
    """

    def __init__(self, max_line: int = 8192, max_headers: int = 32):
        self.max_line = max_line
        self.max_headers = max_headers
        self._buf = bytearray()
        self._request: HttpRequest | None = None
        self._body_needed = 0

    def feed(self, data: bytes) -> HttpRequest | None:
        self._buf += data
        if self._request is None:
            end = self._buf.find(b"\r\n\r\n")
            if end < 0:
                if len(self._buf) > self.max_line + self.max_headers * self.max_line:
                    raise HttpParseError("request head too large")
                return None
            head = bytes(self._buf[:end])
            del self._buf[:end + 4]
            self._request = self._parse_head(head)
            self._body_needed = int(self._request.headers.get("content-length", "0") or "0")
        if len(self._buf) < self._body_needed:
            return None
        request = self._request
        request.body = bytes(self._buf[:self._body_needed])
        del self._buf[:self._body_needed]
        self._request = None
        self._body_needed = 0
        return request

    def _parse_head(self, head: bytes) -> HttpRequest:
        lines = head.split(b"\r\n")
        if len(lines) - 1 > self.max_headers:
            raise HttpParseError("too many headers")
        if len(lines[0]) > self.max_line:
            raise HttpParseError("request line too long")
        try:
            request_line = lines[0].decode("ascii")
        except UnicodeDecodeError as exc:
            raise HttpParseError("non-ascii request line") from exc
        parts = request_line.split(" ")
        if len(parts) != 3 or not parts[0] or not parts[1].startswith("/") or not parts[2].startswith("HTTP/"):
            raise HttpParseError(f"malformed request line: {request_line!r}")
        headers: dict[str, str] = {}
        for line in lines[1:]:
            if not line:
                continue
            name, sep, value = line.partition(b":")
            if not sep:
                raise HttpParseError(f"malformed header line: {line!r}")
            try:
                headers[name.decode("ascii").strip().lower()] = value.decode("ascii").strip()
            except UnicodeDecodeError as exc:
                raise HttpParseError("non-ascii header") from exc
        content_length = headers.get("content-length")
        if content_length is not None and not content_length.isdigit():
            raise HttpParseError(f"bad content-length: {content_length!r}")
        return HttpRequest(parts[0], parts[1], parts[2], headers)
