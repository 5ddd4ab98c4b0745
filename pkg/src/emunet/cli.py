"""Command line interface.

Subcommands: `run` (QEMU-flavoured flags: -nographic, -machine, -nic,
-drive, --trace, --trace-file), `bench` (open-loop latency benchmark) and
`flash` (merge / inspect / gen-app).  Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from . import bench as bench_mod
from . import flashimg, harness
from .guest import GuestConfig
from .usernet import NicConfigError, parse_nic_config


@dataclass
class FlashCommand:
    action: str  # "merge" | "inspect" | "gen-app"
    bootloader: str | None = None
    table: str | None = None
    gen_table: str | None = None
    app: str | None = None
    out: str | None = None
    image: str | None = None
    layout: flashimg.FlashLayout | None = None
    guest: GuestConfig | None = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emunet",
        description="Emulated embedded ethernet harness",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="boot a flash image and serve forwarded ports",
                           allow_abbrev=False)
    run_p.add_argument("-nographic", action="store_true", help="accepted for compatibility")
    run_p.add_argument("-machine", default="esp32", metavar="NAME")
    run_p.add_argument("-nic", default="user,model=open_eth", metavar="SPEC")
    run_p.add_argument("-drive", required=True, metavar="SPEC",
                       help="file=PATH,if=mtd,format=raw")
    run_p.add_argument("--trace", action="append", default=[], metavar="PATTERN")
    run_p.add_argument("--trace-file", metavar="PATH")
    run_p.add_argument("-s", action="store_true", help=argparse.SUPPRESS)

    bench_p = sub.add_parser("bench", help="multi-instance latency benchmark",
                             allow_abbrev=False)
    bench_p.add_argument("--instances", type=int, default=1)
    bench_p.add_argument("--base-port", type=int, default=8000)
    bench_p.add_argument("--rate", type=float, default=10.0)
    bench_p.add_argument("--duration", type=float, default=5.0)
    bench_p.add_argument("--path", default="/hello")

    flash_p = sub.add_parser("flash", help="flash image tools", allow_abbrev=False)
    fsub = flash_p.add_subparsers(dest="flash_command", required=True)

    merge_p = fsub.add_parser("merge", allow_abbrev=False)
    merge_p.add_argument("--bootloader", required=True, metavar="FILE")
    group = merge_p.add_mutually_exclusive_group(required=True)
    group.add_argument("--table", metavar="FILE")
    group.add_argument("--gen-table", metavar="SPEC",
                       help="semicolon-separated label,type,offset,size entries")
    merge_p.add_argument("--app", required=True, metavar="FILE")
    merge_p.add_argument("--out", required=True, metavar="FILE")
    merge_p.add_argument("--layout", metavar="BOOT,TABLE,APP,SIZE")

    inspect_p = fsub.add_parser("inspect", allow_abbrev=False)
    inspect_p.add_argument("image", metavar="FILE")
    inspect_p.add_argument("--layout", metavar="BOOT,TABLE,APP,SIZE")

    genapp_p = fsub.add_parser("gen-app", allow_abbrev=False)
    genapp_p.add_argument("--out", required=True, metavar="FILE")
    genapp_p.add_argument("--mac", default=GuestConfig.mac)
    genapp_p.add_argument("--http-port", type=int, default=80)
    genapp_p.add_argument("--mode", choices=("http", "echo"), default="http")
    genapp_p.add_argument("--banner", default="")

    return parser


def _parse_drive(spec: str, fail) -> str:
    fields: dict[str, str] = {}
    for token in spec.split(","):
        key, sep, value = token.partition("=")
        if not sep:
            fail(f"malformed -drive token {token!r}")
        fields[key] = value
    if "file" not in fields or not fields["file"]:
        fail("-drive requires file=PATH")
    if fields.get("if", "mtd") != "mtd":
        fail(f"unsupported -drive interface {fields.get('if')!r} (only if=mtd)")
    if fields.get("format", "raw") != "raw":
        fail(f"unsupported -drive format {fields.get('format')!r} (only format=raw)")
    return fields["file"]


def _parse_layout(text: str | None, fail) -> flashimg.FlashLayout | None:
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 4:
        fail("--layout expects BOOT,TABLE,APP,SIZE")
    try:
        values = [int(p, 0) for p in parts]
    except ValueError:
        fail(f"--layout has a non-numeric field in {text!r}")
    layout = flashimg.FlashLayout(*values)
    try:
        layout.validate()
    except flashimg.FlashError as exc:
        fail(str(exc))
    return layout


def _parse_table_spec(spec: str, fail) -> list[flashimg.PartitionEntry]:
    type_names = {"app": flashimg.PARTITION_TYPE_APP, "data": flashimg.PARTITION_TYPE_DATA}
    entries = []
    for item in spec.split(";"):
        parts = item.split(",")
        if len(parts) != 4:
            fail(f"--gen-table entry {item!r} must be label,type,offset,size")
        label, type_name, offset, size = parts
        if type_name not in type_names:
            fail(f"--gen-table entry {item!r} has unknown type {type_name!r}")
        try:
            entries.append(
                flashimg.PartitionEntry(
                    type=type_names[type_name],
                    subtype=0,
                    offset=int(offset, 0),
                    size=int(size, 0),
                    label=label,
                )
            )
        except ValueError:
            fail(f"--gen-table entry {item!r} has a non-numeric field")
    return entries


def parse_cli(argv: list[str]):
    """Parse argv into a RunConfig, BenchConfig, or FlashCommand.

    Usage problems exit with status 2 via the parser.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    fail = parser.error

    if args.command == "run":
        if args.machine != "esp32":
            fail(f"unknown machine {args.machine!r} (only esp32 is supported)")
        if args.s:
            fail("-s (GDB stub) is unsupported in this harness")
        drive_file = _parse_drive(args.drive, fail)
        try:
            nic = parse_nic_config(args.nic)
        except NicConfigError as exc:
            fail(str(exc))
        return harness.RunConfig(
            drive_file=drive_file,
            nic=nic,
            machine=args.machine,
            trace_patterns=tuple(args.trace),
            trace_file=args.trace_file,
            nographic=args.nographic,
        )

    if args.command == "bench":
        if args.instances < 1:
            fail("--instances must be >= 1")
        if args.rate <= 0:
            fail("--rate must be > 0")
        if args.duration <= 0:
            fail("--duration must be > 0")
        if not 1 <= args.base_port <= 65535 or args.base_port + args.instances - 1 > 65535:
            fail("--base-port leaves some instance without a valid port")
        return bench_mod.BenchConfig(
            instances=args.instances,
            base_port=args.base_port,
            rate=args.rate,
            duration=args.duration,
            path=args.path,
        )

    # flash subcommands
    layout = _parse_layout(getattr(args, "layout", None), fail)
    if args.flash_command == "merge":
        return FlashCommand(
            action="merge",
            bootloader=args.bootloader,
            table=args.table,
            gen_table=args.gen_table,
            app=args.app,
            out=args.out,
            layout=layout,
        )
    if args.flash_command == "inspect":
        return FlashCommand(action="inspect", image=args.image, layout=layout)
    guest = GuestConfig(
        mac=args.mac, http_port=args.http_port, mode=args.mode, banner=args.banner
    )
    return FlashCommand(action="gen-app", out=args.out, guest=guest)


def _run_flash(cmd: FlashCommand) -> int:
    if cmd.action == "gen-app":
        payload = flashimg.encode_app_payload(cmd.guest.to_dict())
        Path(cmd.out).write_bytes(payload)
        print(f"wrote {len(payload)} byte app payload to {cmd.out}")
        return 0
    if cmd.action == "merge":
        bootloader = Path(cmd.bootloader).read_bytes()
        app = Path(cmd.app).read_bytes()
        if cmd.table is not None:
            table = flashimg.parse_partition_table(Path(cmd.table).read_bytes())
        else:
            parser = build_parser()
            table = _parse_table_spec(cmd.gen_table, parser.error)
        image = flashimg.merge(bootloader, table, app, cmd.layout)
        Path(cmd.out).write_bytes(image.raw)
        print(f"wrote {len(image.raw)} byte image to {cmd.out} ({len(table)} partitions)")
        return 0
    report = flashimg.inspect(Path(cmd.image).read_bytes(), cmd.layout)
    for line in report.lines():
        print(line)
    return 0


def main(argv: list[str] | None = None) -> int:
    command = parse_cli(sys.argv[1:] if argv is None else argv)
    try:
        if isinstance(command, harness.RunConfig):
            return harness.run(command)
        if isinstance(command, bench_mod.BenchConfig):
            bench_mod.bench(command)
            return 0
        return _run_flash(command)
    except bench_mod.BenchError as exc:
        print(f"emunet: {exc}", file=sys.stderr)
        return 1
    except (flashimg.FlashError, OSError) as exc:
        print(f"emunet: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
