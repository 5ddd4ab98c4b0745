"""Emulated embedded ethernet path.

An OpenCores-style ethernet MAC device model, a user-mode NAT network
stack with host port forwarding, a deterministic native guest running a
tiny HTTP server, a runtime-enableable trace framework, flash image
tools and a multi-instance latency benchmark, all wired together behind
a QEMU-flavoured command line.
"""

__version__ = "0.1.0"
