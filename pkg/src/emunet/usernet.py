"""User-mode NAT network stack.

A virtual 10.0.2.0/24 subnet living inside the harness process: built-in
ARP responder and DHCP server, outbound TCP NAT onto real host sockets,
and inbound host-port forwarding per `hostfwd` rule.  The guest behaves as
if behind a firewall: nothing reaches it except DHCP/ARP answers, flows it
opened itself, and flows entering through a forward rule.

The TCP spoken toward the guest is synthesized here as a terminating
proxy: host-side byte streams are re-segmented with locally generated
sequence numbers (fixed 8 KiB window, 500 ms retransmit timer with 5
retries, no SACK, no congestion control).

Threading: all guest-facing state is owned by the instance event loop.
Listener/reader/writer threads touch sockets only and post closures onto
the loop.
"""

from __future__ import annotations

import queue
import random
import socket
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

from .eventloop import EventLoop
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
    Ipv4Packet,
    MacAddress,
    TcpSegment,
    UdpDatagram,
    decode_arp,
    decode_dhcp,
    decode_ipv4,
    decode_tcp,
    decode_udp,
    encode_arp,
    encode_dhcp,
    encode_ipv4,
    encode_tcp,
    encode_udp,
    ip_to_bytes,
    ip_to_str,
)

_SEQ_MASK = 0xFFFFFFFF


def seq_add(a: int, n: int) -> int:
    return (a + n) & _SEQ_MASK


def seq_leq(a: int, b: int) -> bool:
    """a <= b in 32-bit sequence space."""
    return (b - a) & _SEQ_MASK < 0x80000000


class NicConfigError(ValueError):
    pass


@dataclass
class ForwardRule:
    proto: str  # "tcp" | "udp"
    host_addr: str  # "" = all host interfaces
    host_port: int
    guest_addr: str  # "" = first DHCP lease
    guest_port: int


@dataclass
class NicConfig:
    model: str
    id: str = ""
    forwards: list[ForwardRule] = field(default_factory=list)


def _parse_port(text: str, token: str) -> int:
    if not text.isdigit():
        raise NicConfigError(f"non-numeric port in {token!r}")
    port = int(text)
    if not 1 <= port <= 65535:
        raise NicConfigError(f"port {port} out of range in {token!r}")
    return port


def _parse_hostfwd(token: str) -> ForwardRule:
    # PROTO:[HOSTADDR]:HOSTPORT-[GUESTADDR]:GUESTPORT
    value = token.split("=", 1)[1]
    host_part, sep, guest_part = value.partition("-")
    if not sep:
        raise NicConfigError(f"malformed hostfwd rule {token!r}")
    host_fields = host_part.split(":")
    guest_fields = guest_part.split(":")
    if len(host_fields) != 3 or len(guest_fields) != 2:
        raise NicConfigError(f"malformed hostfwd rule {token!r}")
    proto, host_addr, host_port = host_fields
    guest_addr, guest_port = guest_fields
    if proto not in ("tcp", "udp"):
        raise NicConfigError(f"unknown protocol {proto!r} in {token!r}")
    for addr in (host_addr, guest_addr):
        if addr:
            try:
                ip_to_bytes(addr)
            except ValueError:
                raise NicConfigError(f"bad address {addr!r} in {token!r}") from None
    return ForwardRule(
        proto=proto,
        host_addr=host_addr,
        host_port=_parse_port(host_port, token),
        guest_addr=guest_addr,
        guest_port=_parse_port(guest_port, token),
    )


def parse_nic_config(text: str) -> NicConfig:
    """Parse `user,model=open_eth,id=...,hostfwd=...` NIC option text."""
    tokens = text.split(",")
    if not tokens or tokens[0] != "user":
        raise NicConfigError(f"expected 'user' network type, got {tokens[0]!r}")
    model = ""
    nic_id = ""
    forwards: list[ForwardRule] = []
    for token in tokens[1:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise NicConfigError(f"expected key=value, got {token!r}")
        if key == "model":
            model = value
        elif key == "id":
            nic_id = value
        elif key == "hostfwd":
            forwards.append(_parse_hostfwd(token))
        else:
            raise NicConfigError(f"unknown option {token!r}")
    if model != "open_eth":
        raise NicConfigError(f"unknown NIC model {model!r} (only open_eth is supported)")
    return NicConfig(model=model, id=nic_id, forwards=forwards)


@dataclass(frozen=True)
class SubnetPlan:
    network: bytes = ip_to_bytes("10.0.2.0")
    prefix: int = 24
    gateway_ip: bytes = ip_to_bytes("10.0.2.2")
    dns_ip: bytes = ip_to_bytes("10.0.2.3")
    dhcp_start: bytes = ip_to_bytes("10.0.2.15")
    gateway_mac: MacAddress = MacAddress.parse("52:55:0a:00:02:02")

    @property
    def netmask(self) -> bytes:
        bits = (0xFFFFFFFF << (32 - self.prefix)) & 0xFFFFFFFF
        return bits.to_bytes(4, "big")

    def contains(self, ip: bytes) -> bool:
        mask = int.from_bytes(self.netmask, "big")
        return (int.from_bytes(ip, "big") & mask) == int.from_bytes(self.network, "big")


_EOF = object()
_CLOSE = object()


def _close_socket(sock: socket.socket) -> None:
    # shutdown first: close() alone leaves a peer FIN unsent while another
    # thread is still blocked in recv() on the same descriptor
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass

MSS = 1460
GUEST_WINDOW = 8192
RETRANSMIT_S = 0.5
MAX_RETRIES = 5
HANDSHAKE_TIMEOUT_S = 5.0


class NatFlow:
    """One relayed TCP connection between a host socket and the guest."""

    def __init__(
        self,
        stack: "UserNetStack",
        guest_ip: bytes,
        guest_port: int,
        remote_ip: bytes,
        remote_port: int,
        direction: str,
    ):
        self.stack = stack
        self.guest_ip = guest_ip
        self.guest_port = guest_port
        self.remote_ip = remote_ip  # the address we speak to the guest from
        self.remote_port = remote_port
        self.direction = direction  # "inbound" | "outbound"
        self.sock: socket.socket | None = None
        self.writer_q: queue.Queue = queue.Queue()
        self.state = "new"
        self.iss = stack.rng.getrandbits(32)
        self.snd_nxt = self.iss
        self.snd_una = self.iss
        self.rcv_nxt = 0
        self.peer_window = GUEST_WINDOW
        self.send_buf = bytearray()
        self.unacked: list[tuple[int, bytes, bool, bool]] = []  # (seq, payload, syn, fin)
        self.tries = 0
        self.host_eof = False
        self.guest_fin = False
        self.fin_sent = False
        self.fin_acked = False
        self._retransmit_timer = None
        self._handshake_timer = None

    @property
    def key(self) -> tuple:
        return (self.guest_ip, self.guest_port, self.remote_ip, self.remote_port)

    # -- lifecycle ---------------------------------------------------------

    def start_inbound(self, sock: socket.socket) -> None:
        self.sock = sock
        self.state = "syn_sent"
        self.stack._spawn_socket_io(self)
        self._transmit(syn=True, track=True)
        self._arm_retransmit()
        self._handshake_timer = self.stack.loop.call_later(
            HANDSHAKE_TIMEOUT_S, self._handshake_timeout
        )

    def start_outbound(self, syn: TcpSegment) -> None:
        self.rcv_nxt = seq_add(syn.seq, 1)
        self.peer_window = syn.window
        self.state = "connecting"
        self._handshake_timer = self.stack.loop.call_later(
            HANDSHAKE_TIMEOUT_S, self._handshake_timeout
        )
        threading.Thread(
            target=self._connect_host, name="nat-connect", daemon=True
        ).start()

    def _connect_host(self) -> None:
        try:
            sock = socket.create_connection(
                (ip_to_str(self.remote_ip), self.remote_port), timeout=HANDSHAKE_TIMEOUT_S
            )
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            self.stack.loop.post(self._connect_failed)
            return
        self.stack.loop.post(lambda: self._connect_done(sock))

    def _connect_done(self, sock: socket.socket) -> None:
        if self.state != "connecting":
            sock.close()
            return
        self.sock = sock
        self.stack._spawn_socket_io(self)
        self.state = "syn_rcvd"
        self._transmit(syn=True, ack_flag=True, track=True)
        self._arm_retransmit()

    def _connect_failed(self) -> None:
        if self.state != "connecting":
            return
        self._transmit(rst=True, ack_flag=True)
        self._teardown()

    def _handshake_timeout(self) -> None:
        self._handshake_timer = None
        if self.state in ("syn_sent", "syn_rcvd", "connecting"):
            self._teardown()

    # -- guest-side segments -------------------------------------------------

    def segment_from_guest(self, seg: TcpSegment) -> None:
        if self.state == "closed":
            return
        if seg.rst:
            self._teardown()
            return
        if self.state == "syn_sent":
            if seg.syn and seg.ack_flag and seg.ack == seq_add(self.iss, 1):
                self.snd_una = seg.ack
                self.rcv_nxt = seq_add(seg.seq, 1)
                self.peer_window = seg.window
                self.unacked.clear()
                self.tries = 0
                self._establish()
                self._transmit(ack_flag=True)
                self._pump()
            return
        if self.state == "syn_rcvd":
            if seg.ack_flag and not seg.syn and seg.ack == seq_add(self.iss, 1):
                self.snd_una = seg.ack
                self.unacked.clear()
                self.tries = 0
                self._establish()
                if seg.payload or seg.fin:
                    self._established_segment(seg)
                else:
                    self._pump()
            return
        if self.state in ("established", "fin_wait"):
            self._established_segment(seg)

    def _establish(self) -> None:
        self.state = "established"
        if self._handshake_timer is not None:
            self._handshake_timer.cancel()
            self._handshake_timer = None

    def _established_segment(self, seg: TcpSegment) -> None:
        if seg.ack_flag:
            self._process_ack(seg.ack, seg.window)
        ack_needed = False
        if seg.payload:
            if seg.seq == self.rcv_nxt:
                self.rcv_nxt = seq_add(self.rcv_nxt, len(seg.payload))
                self.writer_q.put(seg.payload)
                ack_needed = True
            else:
                ack_needed = True  # out of order: re-ack what we have
        if seg.fin and not self.guest_fin:
            if seq_add(seg.seq, len(seg.payload)) == self.rcv_nxt:
                self.guest_fin = True
                self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                self.writer_q.put(_EOF)
                ack_needed = True
        if ack_needed:
            self._transmit(ack_flag=True)
        self._pump()
        self._maybe_finish()

    def _process_ack(self, ack: int, window: int) -> None:
        self.peer_window = window
        inflight = (self.snd_nxt - self.snd_una) & _SEQ_MASK
        advance = (ack - self.snd_una) & _SEQ_MASK
        if 0 < advance <= inflight:
            self.snd_una = ack
            remaining = []
            for seq, payload, syn, fin in self.unacked:
                end = seq_add(seq, len(payload) + (1 if syn or fin else 0))
                if seq_leq(end, self.snd_una):
                    if fin:
                        self.fin_acked = True
                else:
                    remaining.append((seq, payload, syn, fin))
            self.unacked = remaining
            self.tries = 0

    # -- host-side events ----------------------------------------------------

    def host_data(self, data: bytes) -> None:
        if self.state == "closed":
            return
        self.send_buf += data
        if self.state in ("established", "fin_wait"):
            self._pump()

    def host_eof_seen(self) -> None:
        if self.state == "closed":
            return
        self.host_eof = True
        if self.state in ("established", "fin_wait"):
            self._pump()
            self._maybe_finish()

    def host_error(self) -> None:
        if self.state == "closed":
            return
        self._transmit(rst=True, ack_flag=True)
        self._teardown()

    # -- output --------------------------------------------------------------

    def _pump(self) -> None:
        while self.send_buf:
            inflight = (self.snd_nxt - self.snd_una) & _SEQ_MASK
            room = self.peer_window - inflight
            if room <= 0:
                break
            chunk = bytes(self.send_buf[: min(MSS, room)])
            del self.send_buf[: len(chunk)]
            self._transmit(payload=chunk, ack_flag=True, psh=not self.send_buf, track=True)
        if (
            self.host_eof
            and not self.send_buf
            and not self.fin_sent
            and self.state == "established"
        ):
            self.fin_sent = True
            self.state = "fin_wait"
            self._transmit(fin=True, ack_flag=True, track=True)
        self._arm_retransmit()

    def _transmit(
        self,
        payload: bytes = b"",
        syn: bool = False,
        fin: bool = False,
        rst: bool = False,
        ack_flag: bool = False,
        psh: bool = False,
        track: bool = False,
    ) -> None:
        seg = TcpSegment(
            src_port=self.remote_port,
            dst_port=self.guest_port,
            seq=self.snd_nxt,
            ack=self.rcv_nxt if ack_flag else 0,
            syn=syn,
            ack_flag=ack_flag,
            fin=fin,
            rst=rst,
            psh=psh,
            window=GUEST_WINDOW,
            payload=payload,
        )
        self.stack._send_tcp_to_guest(self.remote_ip, self.guest_ip, seg)
        if track:
            self.unacked.append((self.snd_nxt, payload, syn, fin))
        self.snd_nxt = seq_add(self.snd_nxt, len(payload) + (1 if syn or fin else 0))

    def _retransmit_one(self) -> None:
        seq, payload, syn, fin = self.unacked[0]
        ack_flag = not (syn and self.direction == "inbound")  # a bare SYN carries no ack
        seg = TcpSegment(
            src_port=self.remote_port,
            dst_port=self.guest_port,
            seq=seq,
            ack=self.rcv_nxt if ack_flag else 0,
            syn=syn,
            ack_flag=ack_flag,
            fin=fin,
            window=GUEST_WINDOW,
            payload=payload,
        )
        self.stack._send_tcp_to_guest(self.remote_ip, self.guest_ip, seg)

    def _arm_retransmit(self) -> None:
        if self._retransmit_timer is None and self.unacked and self.state != "closed":
            self._retransmit_timer = self.stack.loop.call_later(
                RETRANSMIT_S, self._retransmit_tick
            )

    def _retransmit_tick(self) -> None:
        self._retransmit_timer = None
        if self.state == "closed" or not self.unacked:
            return
        self.tries += 1
        if self.tries > MAX_RETRIES:
            self._transmit(rst=True, ack_flag=True)
            self._teardown()
            return
        self._retransmit_one()
        self._arm_retransmit()

    # -- teardown --------------------------------------------------------------

    def _maybe_finish(self) -> None:
        if self.guest_fin and self.fin_sent and self.fin_acked:
            self._teardown()

    def _teardown(self) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        for timer in (self._retransmit_timer, self._handshake_timer):
            if timer is not None:
                timer.cancel()
        self._retransmit_timer = None
        self._handshake_timer = None
        self.writer_q.put(_CLOSE)
        self.stack._remove_flow(self)


class UserNetStack:
    """Guest-facing NAT stack instance; one per emulated machine."""

    def __init__(
        self,
        config: NicConfig,
        loop: EventLoop,
        subnet: SubnetPlan | None = None,
        lease_time: int = 86400,
        rng_seed: int = 0x5EED,
    ):
        self.config = config
        self.loop = loop
        self.subnet = subnet or SubnetPlan()
        self.lease_time = lease_time
        self.rng = random.Random(rng_seed)
        self._frames_out: deque[EthernetFrame] = deque()
        self._leases: dict[bytes, bytes] = {}  # client mac -> ip
        self._offers: dict[bytes, bytes] = {}
        self._lease_order: list[bytes] = []
        self._next_lease = int.from_bytes(self.subnet.dhcp_start, "big")
        self._arp_table: dict[bytes, MacAddress] = {}
        self._flows: dict[tuple, NatFlow] = {}
        self._listeners: list[socket.socket] = []
        self._eph_port = 49152
        self._ident = 0
        self.drop_counts: Counter = Counter()
        self.frames_from_guest = 0
        self._stopping = False

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        """Bind one listening socket per TCP forward rule."""
        for rule in self.config.forwards:
            if rule.proto != "tcp":
                continue  # udp rules parse but only internal DHCP is served
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                sock.bind((rule.host_addr, rule.host_port))
            except OSError:
                sock.close()
                self.stop()
                raise
            sock.listen(64)
            self._listeners.append(sock)
            threading.Thread(
                target=self._accept_loop, args=(rule, sock), name="hostfwd-accept", daemon=True
            ).start()

    def stop(self) -> None:
        self._stopping = True
        for sock in self._listeners:
            try:
                sock.close()
            except OSError:
                pass
        self._listeners.clear()
        for flow in list(self._flows.values()):
            flow.writer_q.put(_CLOSE)
        self._flows.clear()

    def _accept_loop(self, rule: ForwardRule, listener: socket.socket) -> None:
        while True:
            try:
                conn, _peer = listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.loop.post(lambda c=conn: self.host_connection_in(rule, c))

    # -- frame plumbing ------------------------------------------------------

    def poll_frames_out(self) -> list[EthernetFrame]:
        """Drain frames queued toward the guest, FIFO."""
        out = list(self._frames_out)
        self._frames_out.clear()
        return out

    def _queue_frame(self, frame: EthernetFrame) -> None:
        self._frames_out.append(frame)

    def guest_frame_in(self, frame: EthernetFrame) -> None:
        """Demultiplex one frame transmitted by the guest."""
        self.frames_from_guest += 1
        if frame.ethertype == ETHERTYPE_ARP:
            self._arp_in(frame)
        elif frame.ethertype == ETHERTYPE_IPV4:
            self._ipv4_in(frame)
        else:
            self.drop_counts["ethertype"] += 1

    def _arp_in(self, frame: EthernetFrame) -> None:
        try:
            pkt = decode_arp(frame.payload)
        except DecodeError:
            self.drop_counts["arp_malformed"] += 1
            return
        if pkt.sender_ip != b"\x00\x00\x00\x00":
            self._arp_table[pkt.sender_ip] = pkt.sender_mac
        if pkt.op == ARP_OP_REQUEST and pkt.target_ip in (
            self.subnet.gateway_ip,
            self.subnet.dns_ip,
        ):
            reply = ArpPacket(
                op=ARP_OP_REPLY,
                sender_mac=self.subnet.gateway_mac,
                sender_ip=pkt.target_ip,
                target_mac=pkt.sender_mac,
                target_ip=pkt.sender_ip,
            )
            self._queue_frame(
                EthernetFrame(
                    dst=pkt.sender_mac,
                    src=self.subnet.gateway_mac,
                    ethertype=ETHERTYPE_ARP,
                    payload=encode_arp(reply),
                )
            )

    def _ipv4_in(self, frame: EthernetFrame) -> None:
        try:
            pkt = decode_ipv4(frame.payload)
        except DecodeError:
            self.drop_counts["ipv4_malformed"] += 1
            return
        if pkt.src_ip != b"\x00\x00\x00\x00":
            self._arp_table[pkt.src_ip] = frame.src
        if pkt.protocol == IPPROTO_UDP:
            self._udp_in(frame, pkt)
        elif pkt.protocol == IPPROTO_TCP:
            self._tcp_in(pkt)
        else:
            self.drop_counts["ip_proto"] += 1

    def _udp_in(self, frame: EthernetFrame, pkt: Ipv4Packet) -> None:
        try:
            dgram = decode_udp(pkt.payload, pkt.src_ip, pkt.dst_ip)
        except DecodeError:
            self.drop_counts["udp_malformed"] += 1
            return
        if dgram.dst_port != 67:
            self.drop_counts["udp_unhandled"] += 1
            return
        try:
            msg = decode_dhcp(dgram.payload)
        except DecodeError:
            self.drop_counts["dhcp_malformed"] += 1
            return
        reply = self.dhcp_step(msg)
        if reply is not None:
            self._send_dhcp_to_guest(reply)

    def _tcp_in(self, pkt: Ipv4Packet) -> None:
        try:
            seg = decode_tcp(pkt.payload, pkt.src_ip, pkt.dst_ip)
        except DecodeError:
            self.drop_counts["tcp_malformed"] += 1
            return
        key = (pkt.src_ip, seg.src_port, pkt.dst_ip, seg.dst_port)
        flow = self._flows.get(key)
        if flow is not None:
            flow.segment_from_guest(seg)
            return
        if seg.syn and not seg.ack_flag and not self.subnet.contains(pkt.dst_ip):
            flow = NatFlow(
                self,
                guest_ip=pkt.src_ip,
                guest_port=seg.src_port,
                remote_ip=pkt.dst_ip,
                remote_port=seg.dst_port,
                direction="outbound",
            )
            self._flows[key] = flow
            flow.start_outbound(seg)
            return
        # Unsolicited / unknown-flow traffic is silently dropped, mirroring
        # the block-all-inbound firewall behaviour.
        self.drop_counts["tcp_no_flow"] += 1

    # -- DHCP server ---------------------------------------------------------

    def dhcp_step(self, msg: DhcpMessage) -> DhcpMessage | None:
        """Serve one client message; returns the reply, if any."""
        mac = msg.client_mac.octets
        if msg.message_type == DHCP_DISCOVER:
            ip = self._leases.get(mac) or self._offers.get(mac)
            if ip is None:
                ip = self._allocate_lease()
                if ip is None:
                    self.drop_counts["dhcp_exhausted"] += 1
                    return None
            self._offers[mac] = ip
            return self._reply(msg, DHCP_OFFER, ip)
        if msg.message_type == DHCP_REQUEST:
            wanted = msg.requested_ip or self._leases.get(mac)
            promised = self._offers.get(mac) or self._leases.get(mac)
            if wanted is None or wanted != promised:
                return DhcpMessage(
                    op=2, xid=msg.xid, client_mac=msg.client_mac,
                    message_type=DHCP_NAK, server_id=self.subnet.gateway_ip,
                )
            self._leases[mac] = wanted
            if mac not in self._lease_order:
                self._lease_order.append(mac)
            self._offers.pop(mac, None)
            self._arp_table[wanted] = msg.client_mac
            return self._reply(msg, DHCP_ACK, wanted)
        return None

    def _allocate_lease(self) -> bytes | None:
        broadcast = int.from_bytes(self.subnet.network, "big") + (1 << (32 - self.subnet.prefix)) - 1
        if self._next_lease >= broadcast:
            return None
        ip = self._next_lease.to_bytes(4, "big")
        self._next_lease += 1
        return ip

    def _reply(self, msg: DhcpMessage, message_type: int, ip: bytes) -> DhcpMessage:
        return DhcpMessage(
            op=2,
            xid=msg.xid,
            client_mac=msg.client_mac,
            message_type=message_type,
            your_ip=ip,
            server_id=self.subnet.gateway_ip,
            subnet_mask=self.subnet.netmask,
            router=self.subnet.gateway_ip,
            lease_time=self.lease_time,
        )

    def first_lease(self) -> bytes | None:
        if not self._lease_order:
            return None
        return self._leases[self._lease_order[0]]

    def _send_dhcp_to_guest(self, reply: DhcpMessage) -> None:
        if reply.message_type == DHCP_NAK or reply.your_ip == b"\x00\x00\x00\x00":
            dst_ip = b"\xff\xff\xff\xff"
            dst_mac = MacAddress(b"\xff" * 6)
        else:
            dst_ip = reply.your_ip
            dst_mac = reply.client_mac
        dgram = UdpDatagram(src_port=67, dst_port=68, payload=encode_dhcp(reply))
        self._send_ipv4_to_guest(
            dst_mac, self.subnet.gateway_ip, dst_ip, IPPROTO_UDP,
            encode_udp(dgram, self.subnet.gateway_ip, dst_ip),
        )

    # -- flows -----------------------------------------------------------------

    def host_connection_in(self, rule: ForwardRule, sock: socket.socket) -> None:
        """Begin forwarding one accepted host connection toward the guest."""
        deadline = time.monotonic() + HANDSHAKE_TIMEOUT_S
        self._start_when_guest_known(rule, sock, deadline)

    def _start_when_guest_known(self, rule: ForwardRule, sock, deadline: float) -> None:
        if self._stopping:
            sock.close()
            return
        guest_ip = ip_to_bytes(rule.guest_addr) if rule.guest_addr else self.first_lease()
        guest_mac = self._arp_table.get(guest_ip) if guest_ip else None
        if guest_ip is not None and guest_mac is None:
            self._send_arp_request(guest_ip)
        if guest_ip is None or guest_mac is None:
            if time.monotonic() >= deadline:
                sock.close()
                self.drop_counts["fwd_no_guest"] += 1
                return
            self.loop.call_later(
                0.05, lambda: self._start_when_guest_known(rule, sock, deadline)
            )
            return
        remote_port = self._next_eph_port(guest_ip, rule.guest_port)
        flow = NatFlow(
            self,
            guest_ip=guest_ip,
            guest_port=rule.guest_port,
            remote_ip=self.subnet.gateway_ip,
            remote_port=remote_port,
            direction="inbound",
        )
        self._flows[flow.key] = flow
        flow.start_inbound(sock)

    def _next_eph_port(self, guest_ip: bytes, guest_port: int) -> int:
        for _ in range(16384):
            port = self._eph_port
            self._eph_port = 49152 if self._eph_port >= 65535 else self._eph_port + 1
            if (guest_ip, guest_port, self.subnet.gateway_ip, port) not in self._flows:
                return port
        raise RuntimeError("ephemeral ports exhausted")

    def _remove_flow(self, flow: NatFlow) -> None:
        self._flows.pop(flow.key, None)

    def _spawn_socket_io(self, flow: NatFlow) -> None:
        threading.Thread(
            target=self._reader_loop, args=(flow,), name="nat-read", daemon=True
        ).start()
        threading.Thread(
            target=self._writer_loop, args=(flow,), name="nat-write", daemon=True
        ).start()

    def _reader_loop(self, flow: NatFlow) -> None:
        sock = flow.sock
        assert sock is not None
        while True:
            try:
                data = sock.recv(65536)
            except OSError:
                self.loop.post(flow.host_error)
                return
            if not data:
                self.loop.post(flow.host_eof_seen)
                return
            self.loop.post(lambda d=data: flow.host_data(d))

    def _writer_loop(self, flow: NatFlow) -> None:
        sock = flow.sock
        assert sock is not None
        while True:
            item = flow.writer_q.get()
            if item is _CLOSE:
                _close_socket(sock)
                return
            if item is _EOF:
                try:
                    sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                continue
            try:
                sock.sendall(item)
            except OSError:
                self.loop.post(flow.host_error)
                # drain until close so the queue does not build up
                while True:
                    tail = flow.writer_q.get()
                    if tail is _CLOSE:
                        _close_socket(sock)
                        return

    # -- guest-bound encapsulation ----------------------------------------------

    def _send_arp_request(self, target_ip: bytes) -> None:
        request = ArpPacket(
            op=ARP_OP_REQUEST,
            sender_mac=self.subnet.gateway_mac,
            sender_ip=self.subnet.gateway_ip,
            target_mac=MacAddress(b"\x00" * 6),
            target_ip=target_ip,
        )
        self._queue_frame(
            EthernetFrame(
                dst=MacAddress(b"\xff" * 6),
                src=self.subnet.gateway_mac,
                ethertype=ETHERTYPE_ARP,
                payload=encode_arp(request),
            )
        )

    def _send_tcp_to_guest(self, src_ip: bytes, guest_ip: bytes, seg: TcpSegment) -> None:
        guest_mac = self._arp_table.get(guest_ip)
        if guest_mac is None:
            self.drop_counts["guest_mac_unknown"] += 1
            return
        self._send_ipv4_to_guest(
            guest_mac, src_ip, guest_ip, IPPROTO_TCP, encode_tcp(seg, src_ip, guest_ip)
        )

    def _send_ipv4_to_guest(
        self, dst_mac: MacAddress, src_ip: bytes, dst_ip: bytes, proto: int, payload: bytes
    ) -> None:
        self._ident = (self._ident + 1) & 0xFFFF
        pkt = Ipv4Packet(src_ip=src_ip, dst_ip=dst_ip, protocol=proto, payload=payload, ident=self._ident)
        self._queue_frame(
            EthernetFrame(
                dst=dst_mac,
                src=self.subnet.gateway_mac,
                ethertype=ETHERTYPE_IPV4,
                payload=encode_ipv4(pkt),
            )
        )
