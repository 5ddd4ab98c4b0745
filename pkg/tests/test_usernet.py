"""NAT stack unit tests: config grammar, DHCP server, ARP, demux policy."""

import pytest

from emunet.usernet import (
    ForwardRule,
    NicConfig,
    NicConfigError,
    SubnetPlan,
    UserNetStack,
    parse_nic_config,
)
from emunet.wire import (
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
    ArpPacket,
    DhcpMessage,
    EthernetFrame,
    Ipv4Packet,
    MacAddress,
    TcpSegment,
    decode_arp,
    decode_dhcp,
    decode_ipv4,
    decode_tcp,
    decode_udp,
    encode_arp,
    encode_ipv4,
    encode_tcp,
    ip_to_bytes,
)
from helpers import ManualLoop

GUEST_MAC = MacAddress.parse("52:54:00:12:34:56")
GUEST_MAC2 = MacAddress.parse("52:54:00:12:34:57")


def make_stack(forwards=None):
    config = NicConfig(model="open_eth", id="t0", forwards=forwards or [])
    return UserNetStack(config, ManualLoop())


class TestParseNicConfig:
    def test_canonical_hostfwd_line(self):
        config = parse_nic_config("user,model=open_eth,id=lo0,hostfwd=tcp::8000-:80")
        assert config.model == "open_eth"
        assert config.id == "lo0"
        assert config.forwards == [ForwardRule("tcp", "", 8000, "", 80)]

    def test_minimal_config_zero_forwards(self):
        config = parse_nic_config("user,model=open_eth")
        assert config.forwards == []

    def test_port_zero_rejected(self):
        with pytest.raises(NicConfigError, match="hostfwd=tcp::0-:80"):
            parse_nic_config("user,model=open_eth,hostfwd=tcp::0-:80")

    def test_non_numeric_port_names_token(self):
        with pytest.raises(NicConfigError, match="hostfwd=tcp::eight-:80"):
            parse_nic_config("user,model=open_eth,hostfwd=tcp::eight-:80")

    def test_unknown_model(self):
        with pytest.raises(NicConfigError, match="e1000"):
            parse_nic_config("user,model=e1000")

    def test_missing_model(self):
        with pytest.raises(NicConfigError):
            parse_nic_config("user,id=x")

    def test_not_user_type(self):
        with pytest.raises(NicConfigError, match="tap"):
            parse_nic_config("tap,model=open_eth")

    def test_unknown_key_names_token(self):
        with pytest.raises(NicConfigError, match="bogus=1"):
            parse_nic_config("user,model=open_eth,bogus=1")

    def test_multiple_hostfwd_accumulate(self):
        config = parse_nic_config(
            "user,model=open_eth,hostfwd=tcp::8000-:80,hostfwd=tcp:127.0.0.1:9000-10.0.2.15:81"
        )
        assert len(config.forwards) == 2
        assert config.forwards[1] == ForwardRule("tcp", "127.0.0.1", 9000, "10.0.2.15", 81)

    def test_udp_rule_parses(self):
        config = parse_nic_config("user,model=open_eth,hostfwd=udp::5000-:5000")
        assert config.forwards[0].proto == "udp"

    def test_malformed_rule(self):
        with pytest.raises(NicConfigError, match="hostfwd"):
            parse_nic_config("user,model=open_eth,hostfwd=tcp:8000:80")

    def test_bad_address(self):
        with pytest.raises(NicConfigError, match="999.0.0.1"):
            parse_nic_config("user,model=open_eth,hostfwd=tcp:999.0.0.1:8000-:80")


class TestDhcpServer:
    def discover(self, mac=GUEST_MAC, xid=0x1234):
        return DhcpMessage(op=1, xid=xid, client_mac=mac, message_type=DHCP_DISCOVER)

    def request(self, ip, mac=GUEST_MAC, xid=0x1234):
        return DhcpMessage(
            op=1, xid=xid, client_mac=mac, message_type=DHCP_REQUEST,
            requested_ip=ip, server_id=ip_to_bytes("10.0.2.2"),
        )

    def test_first_discover_offers_dot_15(self):
        stack = make_stack()
        offer = stack.dhcp_step(self.discover())
        assert offer.message_type == DHCP_OFFER
        assert offer.your_ip == ip_to_bytes("10.0.2.15")
        assert offer.server_id == ip_to_bytes("10.0.2.2")

    def test_second_client_offers_dot_16(self):
        stack = make_stack()
        stack.dhcp_step(self.discover())
        offer2 = stack.dhcp_step(self.discover(mac=GUEST_MAC2, xid=0x99))
        assert offer2.your_ip == ip_to_bytes("10.0.2.16")

    def test_lease_monotonicity(self):
        stack = make_stack()
        for k in range(8):
            mac = MacAddress(bytes([0x52, 0x54, 0, 0, 0, k]))
            offer = stack.dhcp_step(self.discover(mac=mac, xid=k))
            ack = stack.dhcp_step(self.request(offer.your_ip, mac=mac, xid=k))
            assert ack.message_type == DHCP_ACK
            assert ack.your_ip == bytes([10, 0, 2, 15 + k])

    def test_request_unoffered_address_naks(self):
        stack = make_stack()
        stack.dhcp_step(self.discover())
        nak = stack.dhcp_step(self.request(ip_to_bytes("10.0.2.99")))
        assert nak.message_type == DHCP_NAK

    def test_ack_carries_mask_router_lease(self):
        stack = make_stack()
        offer = stack.dhcp_step(self.discover())
        ack = stack.dhcp_step(self.request(offer.your_ip))
        assert ack.subnet_mask == ip_to_bytes("255.255.255.0")
        assert ack.router == ip_to_bytes("10.0.2.2")
        assert ack.lease_time == 86400

    def test_renewal_is_fresh_ack(self):
        stack = make_stack()
        offer = stack.dhcp_step(self.discover())
        stack.dhcp_step(self.request(offer.your_ip))
        again = stack.dhcp_step(self.request(offer.your_ip))
        assert again.message_type == DHCP_ACK

    def test_rediscover_keeps_same_lease(self):
        stack = make_stack()
        offer = stack.dhcp_step(self.discover())
        stack.dhcp_step(self.request(offer.your_ip))
        offer2 = stack.dhcp_step(self.discover())
        assert offer2.your_ip == offer.your_ip

    def test_first_lease_tracks_allocation_order(self):
        stack = make_stack()
        assert stack.first_lease() is None
        offer = stack.dhcp_step(self.discover())
        stack.dhcp_step(self.request(offer.your_ip))
        assert stack.first_lease() == ip_to_bytes("10.0.2.15")


def guest_frame(payload, ethertype=ETHERTYPE_IPV4, src=GUEST_MAC):
    return EthernetFrame(
        dst=SubnetPlan().gateway_mac, src=src, ethertype=ethertype, payload=payload
    )


class TestGuestFrameIn:
    def test_arp_who_has_gateway_answered(self):
        stack = make_stack()
        request = ArpPacket(
            op=ARP_OP_REQUEST, sender_mac=GUEST_MAC, sender_ip=ip_to_bytes("10.0.2.15"),
            target_mac=MacAddress(b"\x00" * 6), target_ip=ip_to_bytes("10.0.2.2"),
        )
        stack.guest_frame_in(guest_frame(encode_arp(request), ethertype=ETHERTYPE_ARP))
        frames = stack.poll_frames_out()
        assert len(frames) == 1
        reply = decode_arp(frames[0].payload)
        assert reply.op == ARP_OP_REPLY
        assert reply.sender_mac == SubnetPlan().gateway_mac
        assert reply.sender_ip == ip_to_bytes("10.0.2.2")
        assert frames[0].dst == GUEST_MAC

    def test_arp_for_dns_answered(self):
        stack = make_stack()
        request = ArpPacket(
            op=ARP_OP_REQUEST, sender_mac=GUEST_MAC, sender_ip=ip_to_bytes("10.0.2.15"),
            target_mac=MacAddress(b"\x00" * 6), target_ip=ip_to_bytes("10.0.2.3"),
        )
        stack.guest_frame_in(guest_frame(encode_arp(request), ethertype=ETHERTYPE_ARP))
        assert len(stack.poll_frames_out()) == 1

    def test_arp_for_other_host_unanswered(self):
        stack = make_stack()
        request = ArpPacket(
            op=ARP_OP_REQUEST, sender_mac=GUEST_MAC, sender_ip=ip_to_bytes("10.0.2.15"),
            target_mac=MacAddress(b"\x00" * 6), target_ip=ip_to_bytes("10.0.2.40"),
        )
        stack.guest_frame_in(guest_frame(encode_arp(request), ethertype=ETHERTYPE_ARP))
        assert stack.poll_frames_out() == []

    def test_unknown_flow_dropped_with_counter(self):
        stack = make_stack()
        seg = TcpSegment(5555, 80, seq=1, ack=7, ack_flag=True, payload=b"sneak")
        src, dst = ip_to_bytes("10.0.2.15"), ip_to_bytes("10.0.2.2")
        pkt = Ipv4Packet(src_ip=src, dst_ip=dst, protocol=IPPROTO_TCP,
                         payload=encode_tcp(seg, src, dst))
        before = stack.drop_counts["tcp_no_flow"]
        stack.guest_frame_in(guest_frame(encode_ipv4(pkt)))
        assert stack.drop_counts["tcp_no_flow"] == before + 1
        assert stack.poll_frames_out() == []

    def test_dhcp_over_frames(self):
        stack = make_stack()
        from emunet.wire import UdpDatagram, encode_dhcp, encode_udp

        msg = DhcpMessage(op=1, xid=5, client_mac=GUEST_MAC, message_type=DHCP_DISCOVER)
        src, dst = b"\x00" * 4, b"\xff" * 4
        dgram = UdpDatagram(68, 67, encode_dhcp(msg))
        pkt = Ipv4Packet(src_ip=src, dst_ip=dst, protocol=17,
                         payload=encode_udp(dgram, src, dst))
        stack.guest_frame_in(
            EthernetFrame(MacAddress(b"\xff" * 6), GUEST_MAC, ETHERTYPE_IPV4, encode_ipv4(pkt))
        )
        frames = stack.poll_frames_out()
        assert len(frames) == 1  # exactly one response per request
        inner = decode_ipv4(frames[0].payload)
        reply = decode_dhcp(decode_udp(inner.payload, inner.src_ip, inner.dst_ip).payload)
        assert reply.message_type == DHCP_OFFER
        assert frames[0].dst == GUEST_MAC

    def test_poll_frames_empty(self):
        assert make_stack().poll_frames_out() == []

    def test_interleaved_responses_fifo(self):
        stack = make_stack()
        from emunet.wire import UdpDatagram, encode_dhcp, encode_udp

        arp_req = ArpPacket(
            op=ARP_OP_REQUEST, sender_mac=GUEST_MAC, sender_ip=ip_to_bytes("10.0.2.15"),
            target_mac=MacAddress(b"\x00" * 6), target_ip=ip_to_bytes("10.0.2.2"),
        )
        msg = DhcpMessage(op=1, xid=6, client_mac=GUEST_MAC, message_type=DHCP_DISCOVER)
        dgram = UdpDatagram(68, 67, encode_dhcp(msg))
        ip = Ipv4Packet(src_ip=b"\x00" * 4, dst_ip=b"\xff" * 4, protocol=17,
                        payload=encode_udp(dgram, b"\x00" * 4, b"\xff" * 4))
        stack.guest_frame_in(guest_frame(encode_arp(arp_req), ethertype=ETHERTYPE_ARP))
        stack.guest_frame_in(
            EthernetFrame(MacAddress(b"\xff" * 6), GUEST_MAC, ETHERTYPE_IPV4, encode_ipv4(ip))
        )
        frames = stack.poll_frames_out()
        assert len(frames) == 2
        assert frames[0].ethertype == ETHERTYPE_ARP
        assert frames[1].ethertype == ETHERTYPE_IPV4

    def test_bad_ipv4_checksum_counted(self):
        stack = make_stack()
        seg = TcpSegment(1, 2, 3, 4)
        src, dst = ip_to_bytes("10.0.2.15"), ip_to_bytes("1.2.3.4")
        raw = bytearray(encode_ipv4(Ipv4Packet(src, dst, IPPROTO_TCP, encode_tcp(seg, src, dst))))
        raw[10] ^= 0xFF
        stack.guest_frame_in(guest_frame(bytes(raw)))
        assert stack.drop_counts["ipv4_malformed"] == 1


class TestFlowTimers:
    """Retransmission and handshake-timeout policy, driven by manual timers."""

    def _flow_with_socketpair(self):
        import socket as socket_mod

        from emunet.usernet import NatFlow

        stack = make_stack()
        stack._arp_table[ip_to_bytes("10.0.2.15")] = GUEST_MAC
        near, far = socket_mod.socketpair()
        flow = NatFlow(
            stack,
            guest_ip=ip_to_bytes("10.0.2.15"),
            guest_port=80,
            remote_ip=ip_to_bytes("10.0.2.2"),
            remote_port=49152,
            direction="inbound",
        )
        stack._flows[flow.key] = flow
        flow.start_inbound(near)
        return stack, flow, far

    def _tcp_frames(self, stack):
        out = []
        for frame in stack.poll_frames_out():
            pkt = decode_ipv4(frame.payload)
            out.append(decode_tcp(pkt.payload, pkt.src_ip, pkt.dst_ip))
        return out

    def test_unanswered_syn_retransmitted_then_reset(self):
        stack, flow, far = self._flow_with_socketpair()
        far.settimeout(5)
        flow._handshake_timer.cancel()  # isolate the retransmit policy
        segs = self._tcp_frames(stack)
        assert len(segs) == 1 and segs[0].syn
        syn_count = 1
        rst_seen = False
        for _ in range(8):
            stack.loop.fire_timers()
            new = self._tcp_frames(stack)
            if flow.state == "closed":
                rst_seen = any(seg.rst for seg in new)
                break
            assert len(new) == 1 and new[0].syn
            syn_count += 1
        assert rst_seen
        assert syn_count == 6  # the original plus five retries
        assert far.recv(100) == b""  # host socket closed
        far.close()

    def test_handshake_timeout_closes_host_socket(self):
        stack, flow, far = self._flow_with_socketpair()
        far.settimeout(5)
        assert flow._handshake_timer is not None
        flow._handshake_timer.fn()
        assert flow.state == "closed"
        assert far.recv(100) == b""
        far.close()

    def test_timer_constants_match_policy(self):
        from emunet import usernet

        assert usernet.RETRANSMIT_S == 0.5
        assert usernet.MAX_RETRIES == 5
        assert usernet.HANDSHAKE_TIMEOUT_S == 5.0
        assert usernet.GUEST_WINDOW == 8192


class TestSubnetPlan:
    def test_membership(self):
        plan = SubnetPlan()
        assert plan.contains(ip_to_bytes("10.0.2.15"))
        assert plan.contains(ip_to_bytes("10.0.2.254"))
        assert not plan.contains(ip_to_bytes("10.0.3.1"))
        assert not plan.contains(ip_to_bytes("127.0.0.1"))

    def test_netmask(self):
        assert SubnetPlan().netmask == ip_to_bytes("255.255.255.0")
