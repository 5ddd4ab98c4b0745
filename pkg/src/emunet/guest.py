"""Deterministic native guest standing in for the emulated microcontroller load.

An ethernet driver speaking the MAC device register/descriptor interface, a
DHCP client, a reduced IPv4/TCP stack and an application layer serving HTTP
(or echoing bytes, for stream tests).  The guest runs on the same event
loop as its device; interrupt delivery is a loop wakeup tied to the
device's IRQ level.

Guest stdout is a log callable: one line when the address is bound, one
line per served HTTP request.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

from . import device as dev
from .usernet import seq_add, seq_leq
from .wire import (
    ARP_OP_REPLY,
    ARP_OP_REQUEST,
    DHCP_ACK,
    DHCP_DISCOVER,
    DHCP_NAK,
    DHCP_OFFER,
    DHCP_REQUEST,
    ETHERTYPE_ARP,
    ETHERTYPE_IPV4,
    IPPROTO_TCP,
    IPPROTO_UDP,
    ArpPacket,
    DecodeError,
    DhcpMessage,
    EthernetFrame,
    HttpParseError,
    HttpRequest,
    HttpRequestParser,
    HttpResponse,
    Ipv4Packet,
    MacAddress,
    TcpSegment,
    UdpDatagram,
    decode_arp,
    decode_dhcp,
    decode_frame,
    decode_ipv4,
    decode_tcp,
    decode_udp,
    encode_arp,
    encode_dhcp,
    encode_frame,
    encode_ipv4,
    encode_response,
    encode_tcp,
    encode_udp,
    ip_to_str,
)

DEFAULT_MAC = "52:54:00:12:34:56"

TX_SLOTS = 8
RX_SLOTS = 8
BUF_SIZE = 1536
TX_BUF_BASE = 0x1000
RX_BUF_BASE = 0x8000

GUEST_TCP_WINDOW = 8192
GUEST_MSS = 1460

BROADCAST_IP = b"\xff\xff\xff\xff"
ZERO_IP = b"\x00\x00\x00\x00"


class DriverInitError(Exception):
    pass


@dataclass
class GuestConfig:
    mac: str = DEFAULT_MAC
    http_port: int = 80
    mode: str = "http"  # "http" | "echo"
    banner: str = ""
    ifname: str = "eth0"

    def to_dict(self) -> dict:
        return {
            "mac": self.mac,
            "http_port": self.http_port,
            "mode": self.mode,
            "banner": self.banner,
            "ifname": self.ifname,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GuestConfig":
        cfg = cls()
        for name in ("mac", "http_port", "mode", "banner", "ifname"):
            if name in data:
                setattr(cfg, name, data[name])
        if cfg.mode not in ("http", "echo"):
            raise ValueError(f"unknown guest mode {cfg.mode!r}")
        MacAddress.parse(cfg.mac)
        return cfg


class EthDriver:
    """Guest-side driver for the MAC device descriptor/register interface."""

    LINK_POLLS = 16

    def __init__(self, device: "dev.MacDevice", memory: "dev.GuestMemory", mac: MacAddress):
        self.device = device
        self.memory = memory
        self.mac = mac
        self.tx_next = 0
        self.rx_next = 0
        self.tx_full_drops = 0

    def init(self) -> None:
        """Bring-up sequence.

        The ordering is part of the contract: link discovery over MII first,
        then MAC address programming, descriptor ring programming (RX before
        TX), interrupt unmasking, and finally RX/TX enable.
        """
        for _ in range(self.LINK_POLLS):
            if self.device.mii_read(1) & dev.Phy.LINK_BIT:
                break
        else:
            raise DriverInitError("ethernet link did not come up")
        self.device.mii_read(2)
        self.device.mii_read(3)
        self.device.mii_write(0, 0x1200)  # enable + restart auto-negotiation

        octets = self.mac.octets
        self.device.reg_write(dev.MAC_ADDR1, (octets[0] << 8) | octets[1])
        self.device.reg_write(
            dev.MAC_ADDR0,
            (octets[2] << 24) | (octets[3] << 16) | (octets[4] << 8) | octets[5],
        )

        self.device.reg_write(dev.TX_BD_NUM, TX_SLOTS)
        for i in range(RX_SLOTS):
            flags = dev.BD_EMPTY | dev.BD_IRQ
            if i == RX_SLOTS - 1:
                flags |= dev.BD_WRAP
            self.device.desc_write(TX_SLOTS + i, flags, RX_BUF_BASE + i * BUF_SIZE)
        for i in range(TX_SLOTS):
            flags = dev.BD_WRAP if i == TX_SLOTS - 1 else 0
            self.device.desc_write(i, flags, TX_BUF_BASE + i * BUF_SIZE)

        self.device.reg_write(dev.INT_MASK, dev.INT_RXB | dev.INT_TXB | dev.INT_BUSY)
        self.device.reg_write(dev.MODER, dev.MODER_RXEN | dev.MODER_TXEN)

    def transmit(self, raw: bytes) -> bool:
        slot = self.tx_next
        len_flags, addr = self.device.desc_read(slot)
        if len_flags & dev.BD_READY:
            self.tx_full_drops += 1
            return False
        self.memory.write(addr, raw)
        flags = dev.BD_READY | dev.BD_IRQ
        if slot == TX_SLOTS - 1:
            flags |= dev.BD_WRAP
        self.device.desc_write(slot, (len(raw) << 16) | flags, addr)
        self.tx_next = (slot + 1) % TX_SLOTS
        return True

    def poll_rx(self) -> list[bytes]:
        frames: list[bytes] = []
        for _ in range(RX_SLOTS):
            index = TX_SLOTS + self.rx_next
            len_flags, addr = self.device.desc_read(index)
            if len_flags & dev.BD_EMPTY:
                break
            length = (len_flags >> 16) & 0xFFFF
            if not len_flags & dev.BD_ERR:
                frames.append(self.memory.read(addr, length))
            flags = dev.BD_EMPTY | dev.BD_IRQ
            if self.rx_next == RX_SLOTS - 1:
                flags |= dev.BD_WRAP
            self.device.desc_write(index, flags, addr)
            self.rx_next = (self.rx_next + 1) % RX_SLOTS
        return frames


def http_handle(request: HttpRequest) -> HttpResponse:
    """Route one parsed request: GET /hello answers Hello World!."""
    if request.method != "GET":
        return _plain_response(405, "Method Not Allowed", b"Method Not Allowed", [("Allow", "GET")])
    if request.target == "/hello":
        return _plain_response(200, "OK", b"Hello World!")
    return _plain_response(404, "Not Found", b"Not Found")


def _plain_response(
    status: int, reason: str, body: bytes, extra: list[tuple[str, str]] | None = None
) -> HttpResponse:
    headers = [
        ("Content-Type", "text/plain"),
        ("Content-Length", str(len(body))),
    ]
    if extra:
        headers.extend(extra)
    headers.append(("Connection", "close"))
    return HttpResponse(status=status, reason=reason, headers=headers, body=body)


class HttpApp:
    """Per-connection HTTP server glue; one request per connection."""

    def __init__(self, stack: "GuestStack", conn: "GuestTcpConn"):
        self.stack = stack
        self.conn = conn
        self.parser = HttpRequestParser()
        self.responded = False

    def on_connect(self) -> None:
        pass

    def on_data(self, data: bytes) -> None:
        if self.responded:
            return
        try:
            request = self.parser.feed(data)
        except HttpParseError:
            self._respond(_plain_response(400, "Bad Request", b"Bad Request"))
            return
        if request is None:
            return
        response = http_handle(request)
        self._respond(response)
        self.stack.log(
            f"served {request.method} {request.target} "
            f"from {ip_to_str(self.conn.peer_ip)}:{self.conn.peer_port}"
        )
        self.stack.served_count += 1

    def _respond(self, response: HttpResponse) -> None:
        self.responded = True
        self.conn.send(encode_response(response))
        self.conn.close()

    def on_eof(self) -> None:
        if not self.responded:
            self.conn.close()

    def on_close(self) -> None:
        pass


class EchoApp:
    """Echoes every received byte back to the peer."""

    def __init__(self, stack: "GuestStack", conn: "GuestTcpConn"):
        self.stack = stack
        self.conn = conn

    def on_connect(self) -> None:
        pass

    def on_data(self, data: bytes) -> None:
        self.conn.send(data)

    def on_eof(self) -> None:
        self.conn.close()

    def on_close(self) -> None:
        pass


class GuestTcpConn:
    """Reduced TCP connection state machine (no retransmission).

    The virtual wire is lossless and in-order, so loss recovery is left to
    the NAT side; the guest only tracks sequence state, a fixed advertised
    window, and orderly/abortive teardown.
    """

    def __init__(
        self,
        stack: "GuestStack",
        local_port: int,
        peer_ip: bytes,
        peer_port: int,
        app_factory: Callable,
    ):
        self.stack = stack
        self.local_port = local_port
        self.peer_ip = peer_ip
        self.peer_port = peer_port
        self.app = app_factory(stack, self)
        self.state = "closed"
        self.iss = stack.rng.getrandbits(32)
        self.snd_nxt = self.iss
        self.snd_una = self.iss
        self.rcv_nxt = 0
        self.peer_window = GUEST_TCP_WINDOW
        self.send_buf = bytearray()
        self.close_requested = False
        self.fin_sent = False
        self.fin_end = 0
        self.fin_acked = False
        self.peer_fin = False

    @property
    def key(self) -> tuple:
        return (self.peer_ip, self.peer_port, self.local_port)

    # -- opening -------------------------------------------------------------

    def accept_syn(self, seg: TcpSegment) -> None:
        self.rcv_nxt = seq_add(seg.seq, 1)
        self.peer_window = seg.window
        self.state = "syn_rcvd"
        self._transmit(syn=True, ack_flag=True)

    def connect(self) -> None:
        self.state = "syn_sent"
        self._transmit(syn=True)

    # -- input -----------------------------------------------------------------

    def segment_in(self, seg: TcpSegment) -> None:
        if self.state == "closed":
            return
        if seg.rst:
            self._drop("peer reset")
            return
        if self.state == "syn_rcvd":
            if seg.ack_flag and not seg.syn and seg.ack == seq_add(self.iss, 1):
                self.snd_una = seg.ack
                self.state = "established"
                self.stack.app_connect_events += 1
                self.app.on_connect()
                if seg.payload or seg.fin:
                    self._data_segment(seg)
            return
        if self.state == "syn_sent":
            if seg.syn and seg.ack_flag and seg.ack == seq_add(self.iss, 1):
                self.snd_una = seg.ack
                self.rcv_nxt = seq_add(seg.seq, 1)
                self.peer_window = seg.window
                self.state = "established"
                self._transmit(ack_flag=True)
                self.stack.app_connect_events += 1
                self.app.on_connect()
                self._pump()
            return
        self._data_segment(seg)

    def _data_segment(self, seg: TcpSegment) -> None:
        if seg.ack_flag:
            self._process_ack(seg.ack, seg.window)
        ack_needed = False
        if seg.payload:
            if seg.seq == self.rcv_nxt:
                self.rcv_nxt = seq_add(self.rcv_nxt, len(seg.payload))
                ack_needed = True
                self.stack.app_data_events += 1
                self.app.on_data(seg.payload)
            else:
                self.stack.drop_counts["tcp_out_of_order"] += 1
                ack_needed = True
        if seg.fin and not self.peer_fin:
            if seq_add(seg.seq, len(seg.payload)) == self.rcv_nxt:
                self.peer_fin = True
                self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                ack_needed = True
                self.app.on_eof()
        if ack_needed:
            self._transmit(ack_flag=True)
        self._pump()
        self._maybe_close()

    def _process_ack(self, ack: int, window: int) -> None:
        self.peer_window = window
        inflight = (self.snd_nxt - self.snd_una) & 0xFFFFFFFF
        advance = (ack - self.snd_una) & 0xFFFFFFFF
        if 0 < advance <= inflight:
            self.snd_una = ack
        if self.fin_sent and seq_leq(self.fin_end, self.snd_una):
            self.fin_acked = True

    # -- output ------------------------------------------------------------------

    def send(self, data: bytes) -> None:
        self.send_buf += data
        if self.state in ("established", "fin_wait"):
            self._pump()

    def close(self) -> None:
        self.close_requested = True
        self._pump()
        self._maybe_close()

    def _pump(self) -> None:
        if self.state not in ("established", "fin_wait"):
            return
        while self.send_buf:
            inflight = (self.snd_nxt - self.snd_una) & 0xFFFFFFFF
            room = self.peer_window - inflight
            if room <= 0:
                break
            chunk = bytes(self.send_buf[: min(GUEST_MSS, room)])
            del self.send_buf[: len(chunk)]
            self._transmit(payload=chunk, ack_flag=True, psh=not self.send_buf)
        if self.close_requested and not self.send_buf and not self.fin_sent:
            self.fin_sent = True
            self._transmit(fin=True, ack_flag=True)
            self.fin_end = self.snd_nxt
            self.state = "fin_wait"

    def _transmit(
        self,
        payload: bytes = b"",
        syn: bool = False,
        fin: bool = False,
        rst: bool = False,
        ack_flag: bool = False,
        psh: bool = False,
    ) -> None:
        seg = TcpSegment(
            src_port=self.local_port,
            dst_port=self.peer_port,
            seq=self.snd_nxt,
            ack=self.rcv_nxt if ack_flag else 0,
            syn=syn,
            ack_flag=ack_flag,
            fin=fin,
            rst=rst,
            psh=psh,
            window=GUEST_TCP_WINDOW,
            payload=payload,
        )
        self.stack.send_tcp(self.peer_ip, seg)
        self.snd_nxt = seq_add(self.snd_nxt, len(payload) + (1 if syn or fin else 0))

    # -- teardown -------------------------------------------------------------------

    def _maybe_close(self) -> None:
        if self.fin_sent and self.fin_acked and self.peer_fin and self.state != "closed":
            self.state = "closed"
            self.stack.conns.pop(self.key, None)
            self.app.on_close()

    def _drop(self, reason: str) -> None:
        self.state = "closed"
        self.stack.conns.pop(self.key, None)
        self.stack._count(f"tcp_{reason.replace(' ', '_')}")
        self.app.on_close()


class GuestStack:
    """The guest network stack plus application layer."""

    def __init__(
        self,
        device: "dev.MacDevice",
        memory: "dev.GuestMemory",
        config: GuestConfig | None = None,
        log: Callable[[str], None] = print,
        schedule: Callable | None = None,
        rng_seed: int = 0x6E57,
    ):
        self.device = device
        self.memory = memory
        self.config = config or GuestConfig()
        self.log = log
        self.schedule = schedule  # call_later(delay, fn), optional
        self.rng = random.Random(rng_seed)
        self.mac = MacAddress.parse(self.config.mac)
        self.driver = EthDriver(device, memory, self.mac)
        self.ip: bytes | None = None
        self.netmask = b"\xff\xff\xff\x00"
        self.gateway_ip: bytes | None = None
        self.arp_table: dict[bytes, MacAddress] = {}
        self.arp_pending: dict[bytes, list[bytes]] = {}
        self.listeners: dict[int, Callable] = {}
        self.conns: dict[tuple, GuestTcpConn] = {}
        self.drop_counts: dict[str, int] = {}
        self.served_count = 0
        self.app_connect_events = 0
        self.app_data_events = 0
        self._next_port = 33000
        self._ident = 0
        self._dhcp_state = "init"
        self._dhcp_xid = self.rng.getrandbits(32)
        self._dhcp_offer: DhcpMessage | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        """Initialize the driver and begin address acquisition."""
        if self.config.banner:
            self.log(self.config.banner)
        self.driver.init()
        self._dhcp_send_discover()

    def stack_step(self) -> None:
        """One interrupt-driven step: acknowledge, drain RX, run protocols."""
        pending = self.device.reg_read(dev.INT_SOURCE)
        if pending:
            self.device.reg_write(dev.INT_SOURCE, pending)
        for raw in self.driver.poll_rx():
            self._frame_in(raw)

    # -- frames --------------------------------------------------------------

    def _frame_in(self, raw: bytes) -> None:
        try:
            frame = decode_frame(raw)
        except DecodeError:
            self._count("frame_malformed")
            return
        if frame.ethertype == ETHERTYPE_ARP:
            self._arp_in(frame)
        elif frame.ethertype == ETHERTYPE_IPV4:
            self._ipv4_in(frame)
        else:
            self._count("ethertype")

    def _count(self, reason: str) -> None:
        self.drop_counts[reason] = self.drop_counts.get(reason, 0) + 1

    def _arp_in(self, frame: EthernetFrame) -> None:
        try:
            pkt = decode_arp(frame.payload)
        except DecodeError:
            self._count("arp_malformed")
            return
        if pkt.sender_ip != ZERO_IP:
            self._learn(pkt.sender_ip, pkt.sender_mac)
        if pkt.op == ARP_OP_REQUEST and self.ip is not None and pkt.target_ip == self.ip:
            reply = ArpPacket(
                op=ARP_OP_REPLY,
                sender_mac=self.mac,
                sender_ip=self.ip,
                target_mac=pkt.sender_mac,
                target_ip=pkt.sender_ip,
            )
            self._transmit_frame(pkt.sender_mac, ETHERTYPE_ARP, encode_arp(reply))

    def _learn(self, ip: bytes, mac: MacAddress) -> None:
        self.arp_table[ip] = mac
        queued = self.arp_pending.pop(ip, None)
        if queued:
            for raw_ip in queued:
                self._transmit_frame(mac, ETHERTYPE_IPV4, raw_ip)

    def _ipv4_in(self, frame: EthernetFrame) -> None:
        try:
            pkt = decode_ipv4(frame.payload)
        except DecodeError:
            self._count("ipv4_malformed")
            return
        if pkt.src_ip != ZERO_IP:
            self._learn(pkt.src_ip, frame.src)
        for_us = pkt.dst_ip == BROADCAST_IP or (self.ip is not None and pkt.dst_ip == self.ip)
        if self.ip is None:
            # Before an address is bound only DHCP traffic is interesting.
            for_us = pkt.dst_ip in (BROADCAST_IP,) or pkt.protocol == IPPROTO_UDP
        if not for_us:
            self._count("ip_not_for_us")
            return
        if pkt.protocol == IPPROTO_UDP:
            self._udp_in(pkt)
        elif pkt.protocol == IPPROTO_TCP and pkt.dst_ip == self.ip:
            self._tcp_in(pkt)
        else:
            self._count("ip_proto")

    def _udp_in(self, pkt: Ipv4Packet) -> None:
        try:
            dgram = decode_udp(pkt.payload, pkt.src_ip, pkt.dst_ip)
        except DecodeError:
            self._count("udp_malformed")
            return
        if dgram.dst_port == 68:
            self._dhcp_in(dgram.payload)
        else:
            self._count("udp_unhandled")

    # -- DHCP client -----------------------------------------------------------

    def _dhcp_send_discover(self) -> None:
        self._dhcp_state = "selecting"
        msg = DhcpMessage(
            op=1, xid=self._dhcp_xid, client_mac=self.mac, message_type=DHCP_DISCOVER
        )
        self._send_dhcp(msg)
        if self.schedule is not None:
            self.schedule(1.0, self._dhcp_retry)

    def _dhcp_retry(self) -> None:
        if self._dhcp_state == "selecting":
            self._dhcp_send_discover()
        elif self._dhcp_state == "requesting" and self._dhcp_offer is not None:
            self._dhcp_send_request(self._dhcp_offer)

    def _dhcp_send_request(self, offer: DhcpMessage) -> None:
        self._dhcp_state = "requesting"
        msg = DhcpMessage(
            op=1,
            xid=self._dhcp_xid,
            client_mac=self.mac,
            message_type=DHCP_REQUEST,
            requested_ip=offer.your_ip,
            server_id=offer.server_id,
        )
        self._send_dhcp(msg)
        if self.schedule is not None:
            self.schedule(1.0, self._dhcp_retry)

    def _send_dhcp(self, msg: DhcpMessage) -> None:
        dgram = UdpDatagram(src_port=68, dst_port=67, payload=encode_dhcp(msg))
        raw_ip = encode_ipv4(
            Ipv4Packet(
                src_ip=ZERO_IP,
                dst_ip=BROADCAST_IP,
                protocol=IPPROTO_UDP,
                payload=encode_udp(dgram, ZERO_IP, BROADCAST_IP),
                ident=self._next_ident(),
            )
        )
        self._transmit_frame(MacAddress(b"\xff" * 6), ETHERTYPE_IPV4, raw_ip)

    def _dhcp_in(self, payload: bytes) -> None:
        try:
            msg = decode_dhcp(payload)
        except DecodeError:
            self._count("dhcp_malformed")
            return
        if msg.xid != self._dhcp_xid or msg.client_mac != self.mac:
            self._count("dhcp_foreign")
            return
        if msg.message_type == DHCP_OFFER and self._dhcp_state == "selecting":
            self._dhcp_offer = msg
            self._dhcp_send_request(msg)
        elif msg.message_type == DHCP_ACK and self._dhcp_state == "requesting":
            self._dhcp_state = "bound"
            self.ip = msg.your_ip
            if msg.subnet_mask:
                self.netmask = msg.subnet_mask
            if msg.router:
                self.gateway_ip = msg.router
            self.log(f"bound to {ip_to_str(self.ip)} on interface {self.config.ifname}")
            self._start_application()
        elif msg.message_type == DHCP_NAK:
            self._dhcp_state = "init"
            self._dhcp_offer = None
            self._dhcp_xid = self.rng.getrandbits(32)
            self._dhcp_send_discover()

    def _start_application(self) -> None:
        factory = HttpApp if self.config.mode == "http" else EchoApp
        self.tcp_listen(self.config.http_port, factory)
        self.log(f"{self.config.mode} server listening on port {self.config.http_port}")

    # -- TCP ----------------------------------------------------------------------

    def tcp_listen(self, port: int, app_factory: Callable) -> None:
        self.listeners[port] = app_factory

    def tcp_connect(self, dst_ip: bytes, dst_port: int, app_factory: Callable) -> GuestTcpConn:
        if self.ip is None:
            raise RuntimeError("guest has no address yet")
        local_port = self._next_port
        self._next_port += 1
        conn = GuestTcpConn(self, local_port, dst_ip, dst_port, app_factory)
        self.conns[conn.key] = conn
        conn.connect()
        return conn

    def _tcp_in(self, pkt: Ipv4Packet) -> None:
        try:
            seg = decode_tcp(pkt.payload, pkt.src_ip, pkt.dst_ip)
        except DecodeError:
            self._count("tcp_malformed")
            return
        key = (pkt.src_ip, seg.src_port, seg.dst_port)
        conn = self.conns.get(key)
        if conn is not None:
            conn.segment_in(seg)
            return
        if seg.syn and not seg.ack_flag and seg.dst_port in self.listeners:
            conn = GuestTcpConn(
                self, seg.dst_port, pkt.src_ip, seg.src_port, self.listeners[seg.dst_port]
            )
            self.conns[key] = conn
            conn.accept_syn(seg)
            return
        if seg.rst:
            return
        self._count("tcp_closed_port")
        self._send_rst_for(pkt, seg)

    def _send_rst_for(self, pkt: Ipv4Packet, seg: TcpSegment) -> None:
        if seg.ack_flag:
            rst = TcpSegment(
                src_port=seg.dst_port, dst_port=seg.src_port,
                seq=seg.ack, ack=0, rst=True,
            )
        else:
            length = len(seg.payload) + (1 if seg.syn else 0) + (1 if seg.fin else 0)
            rst = TcpSegment(
                src_port=seg.dst_port, dst_port=seg.src_port,
                seq=0, ack=seq_add(seg.seq, length), rst=True, ack_flag=True,
            )
        self.send_tcp(pkt.src_ip, rst)

    def send_tcp(self, dst_ip: bytes, seg: TcpSegment) -> None:
        assert self.ip is not None
        raw_ip = encode_ipv4(
            Ipv4Packet(
                src_ip=self.ip,
                dst_ip=dst_ip,
                protocol=IPPROTO_TCP,
                payload=encode_tcp(seg, self.ip, dst_ip),
                ident=self._next_ident(),
            )
        )
        self._route_ipv4(dst_ip, raw_ip)

    def _next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFFFF
        return self._ident

    def _route_ipv4(self, dst_ip: bytes, raw_ip: bytes) -> None:
        if self.ip is not None and self._on_link(dst_ip):
            next_hop = dst_ip
        else:
            next_hop = self.gateway_ip or dst_ip
        mac = self.arp_table.get(next_hop)
        if mac is None:
            self.arp_pending.setdefault(next_hop, []).append(raw_ip)
            self._send_arp_request(next_hop)
            return
        self._transmit_frame(mac, ETHERTYPE_IPV4, raw_ip)

    def _on_link(self, dst_ip: bytes) -> bool:
        mask = int.from_bytes(self.netmask, "big")
        me = int.from_bytes(self.ip, "big") & mask
        return (int.from_bytes(dst_ip, "big") & mask) == me

    def _send_arp_request(self, target_ip: bytes) -> None:
        request = ArpPacket(
            op=ARP_OP_REQUEST,
            sender_mac=self.mac,
            sender_ip=self.ip or ZERO_IP,
            target_mac=MacAddress(b"\x00" * 6),
            target_ip=target_ip,
        )
        self._transmit_frame(MacAddress(b"\xff" * 6), ETHERTYPE_ARP, encode_arp(request))

    def _transmit_frame(self, dst: MacAddress, ethertype: int, payload: bytes) -> None:
        raw = encode_frame(EthernetFrame(dst=dst, src=self.mac, ethertype=ethertype, payload=payload))
        self.driver.transmit(raw)
