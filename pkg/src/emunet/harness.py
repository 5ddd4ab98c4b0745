"""Instance assembly and the run command.

One Instance owns one event loop carrying a guest, its MAC device and the
guest-facing side of a NAT stack.  Frames move in a pump: NAT output is
delivered to the device, the asserted IRQ line wakes the guest, guest
transmissions land back in the NAT stack, and the pump repeats until the
instance is quiescent.  Host socket I/O threads only post onto the loop.
"""

from __future__ import annotations

import signal
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import flashimg
from .device import GuestMemory, MacDevice
from .eventloop import EventLoop
from .guest import GuestConfig, GuestStack
from .trace import NULL_TRACE, TraceConfig
from .usernet import NicConfig, UserNetStack
from .wire import DecodeError, decode_frame

_SETTLE_BOUND = 1_000_000  # safety valve; a quiescent pump exits long before


@dataclass
class RunConfig:
    drive_file: str
    nic: NicConfig
    machine: str = "esp32"
    trace_patterns: tuple[str, ...] = ()
    trace_file: str | None = None
    nographic: bool = False


class Instance:
    """One emulated machine: guest + device + NAT stack on one loop."""

    def __init__(
        self,
        guest_config: GuestConfig,
        nic_config: NicConfig,
        trace: TraceConfig | None = None,
        log=print,
        name: str = "esp0",
        memory_size: int = 4 * 1024 * 1024,
    ):
        self.name = name
        self.trace = trace if trace is not None else NULL_TRACE
        self.loop = EventLoop(idle_hook=self._settle)
        self.memory = GuestMemory(memory_size)
        self.device = MacDevice(self.memory, backend_send=self._frame_from_guest, trace=self.trace)
        self.usernet = UserNetStack(nic_config, self.loop)
        self.guest = GuestStack(
            self.device, self.memory, guest_config, log=log, schedule=self.loop.call_later
        )
        self.frame_decode_failures = 0
        self._started = False

    def _frame_from_guest(self, raw: bytes) -> None:
        try:
            frame = decode_frame(raw)
        except DecodeError:
            self.frame_decode_failures += 1
            return
        self.usernet.guest_frame_in(frame)

    def _settle(self) -> None:
        """Pump NAT output and guest interrupt work until quiescent."""
        for _ in range(_SETTLE_BOUND):
            frames = self.usernet.poll_frames_out()
            if frames:
                for frame in frames:
                    self.device.receive(frame)
                    if self.device.irq_asserted:
                        self.guest.stack_step()
                continue
            if self.device.irq_asserted:
                self.guest.stack_step()
                continue
            return

    def start(self) -> None:
        """Bind forwarded listeners, start the loop, boot the guest."""
        self.usernet.start()  # raises OSError if a host port is taken
        self.loop.start(name=f"loop-{self.name}")
        self.loop.post(self._boot)
        self._started = True

    def _boot(self) -> None:
        self.device.reset()
        self.guest.start()

    def stop(self) -> None:
        self.usernet.stop()
        if self._started:
            self.loop.stop()
            self.loop.join(timeout=5)
            self._started = False


def instance_from_image(
    image: bytes,
    nic_config: NicConfig,
    trace: TraceConfig | None = None,
    log=print,
    name: str = "esp0",
) -> Instance:
    """Validate a merged flash image and build the instance it configures."""
    config_dict, _entries = flashimg.boot_payload(image)
    guest_config = GuestConfig.from_dict(config_dict)
    return Instance(guest_config, nic_config, trace=trace, log=log, name=name)


def run(config: RunConfig, stop_event: threading.Event | None = None) -> int:
    """Boot and serve until interrupted.  Returns the process exit status."""
    from . import trace as trace_mod

    try:
        image = Path(config.drive_file).read_bytes()
    except OSError as exc:
        print(f"emunet: cannot read drive file: {exc}", flush=True)
        return 1

    try:
        trace_config = trace_mod.enable(
            config.trace_patterns, config.trace_file if config.trace_file else "stderr"
        )
    except OSError as exc:
        print(f"emunet: cannot open trace file: {exc}", flush=True)
        return 1

    def _stdout_log(line: str) -> None:
        print(line, flush=True)  # guest stdout must survive pipe buffering

    try:
        instance = instance_from_image(image, config.nic, trace=trace_config, log=_stdout_log)
    except (flashimg.FlashError, ValueError) as exc:
        print(f"emunet: invalid flash image: {exc}", flush=True)
        return 1

    try:
        instance.start()
    except OSError as exc:
        print(f"emunet: cannot bind forwarded port: {exc}", flush=True)
        return 1

    stop = stop_event or threading.Event()

    def _signal(_signum, _frame):
        stop.set()

    previous = {}
    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            previous[signum] = signal.signal(signum, _signal)
        except ValueError:
            pass  # not on the main thread (tests drive stop_event instead)

    try:
        stop.wait()
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)
        instance.stop()
    return 0
