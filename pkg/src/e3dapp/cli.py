"""Command-line entry point: scenarios, benchmarks and standalone agent/dApp processes."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

from . import bench, transport
from .agent import E3Agent
from .ranging import RangingDapp
from .ransim import IncumbentConfig, RadioConfig, SimulatedDU
from .scenario import ConfigError, DappSelection, list_scenarios, load_scenario, resolve, run_scenario, validate
from .sdk import DappCore
from .spectrum import SpectrumSharingDapp

log = logging.getLogger("e3dapp")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_ENDPOINTS = {"ipc": "/tmp/e3dapp.setup", "tcp": "127.0.0.1:9990"}


def resolve_endpoint(args) -> str:
    """E3_ENDPOINT wins over --endpoint, which wins over the per-transport default."""
    return os.environ.get("E3_ENDPOINT") or args.endpoint or DEFAULT_ENDPOINTS[args.transport]


def _add_transport(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transport", choices=("ipc", "tcp"), default="ipc")
    p.add_argument("--endpoint", help="socket path (ipc) or host:port (tcp); E3_ENDPOINT overrides")


def _add_radio(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = RadioConfig()
    p.add_argument("--n-prbs", type=int, default=d.n_prbs if defaults else None)
    p.add_argument("--slot-us", type=int, default=d.slot_us if defaults else None)
    p.add_argument("--resolution", type=int, default=d.resolution_bins if defaults else None,
                   help="sensing bins per slot (384, 768, 1536 or 2048)")


def _add_dapp(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = DappSelection()

    def dflt(v):
        return v if defaults else None

    p.add_argument("--dapp", choices=("spectrum", "ranging") if defaults else ("spectrum", "ranging", "none"),
                   default=dflt("spectrum"))
    p.add_argument("--threshold-db", type=float, default=dflt(d.threshold_db))
    p.add_argument("--hysteresis-slots", type=int, default=dflt(d.hysteresis_slots))
    p.add_argument("--M", dest="M", type=int, default=dflt(d.M), help="CIR snapshots per range estimate")
    p.add_argument("--model-order", type=int, default=dflt(d.model_order))
    p.add_argument("--grid-step-ns", type=float, default=dflt(d.grid_step_ns))
    p.add_argument("--tau-max-ns", type=float, default=dflt(d.tau_max_ns))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e3dapp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file or built-in scenario")
    p.add_argument("scenario", help="path or built-in name (see `list`)")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-slots", type=int)
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    _add_radio(p, defaults=False)
    _add_dapp(p, defaults=False)

    p = sub.add_parser("bench", help="control-loop latency benchmark")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", action="store_true", help="all 16 configurations")
    g.add_argument("--config", type=int, metavar="ID", help="one configuration, 0..15")
    g.add_argument("--overhead", action="store_true", help="print the transport overhead table")
    p.add_argument("--out", type=Path, help="CSV path")
    p.add_argument("--n-loops", type=int, default=10_000)
    p.add_argument("--mode", choices=("process", "thread"), default="process")
    _add_transport(p)

    p = sub.add_parser("validate", help="check a scenario file without running it")
    p.add_argument("scenario")

    sub.add_parser("list", help="list built-in scenarios")

    p = sub.add_parser("agent", help="run the simulated DU and E3 agent in real time")
    _add_transport(p)
    _add_radio(p, defaults=True)
    p.add_argument("--incumbent", action="store_true", help="enable the default incumbent")
    p.add_argument("--duration-slots", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ue-distance-m", type=float, default=5.0)
    p.add_argument("--ul-snr-db", type=float, default=0.0)
    p.add_argument("--n-subcarriers", type=int, default=128)

    p = sub.add_parser("dapp", help="run a dApp against a running agent")
    _add_transport(p)
    _add_radio(p, defaults=True)
    _add_dapp(p, defaults=True)
    p.add_argument("--dapp-id", type=int, default=1)
    p.add_argument("--max-ticks", type=int, default=None)
    return parser


def _override_scenario(sc, args):
    radio = {k: v for k, v in (("n_prbs", args.n_prbs), ("slot_us", args.slot_us),
                                ("resolution_bins", args.resolution)) if v is not None}
    dapp = {k: v for k, v in (("kind", args.dapp), ("threshold_db", args.threshold_db),
                               ("hysteresis_slots", args.hysteresis_slots), ("M", args.M),
                               ("model_order", args.model_order), ("grid_step_ns", args.grid_step_ns),
                               ("tau_max_ns", args.tau_max_ns)) if v is not None}
    try:
        if radio:
            sc.radio = dataclasses.replace(sc.radio, **radio)
        if dapp:
            sc.dapp = dataclasses.replace(sc.dapp, **dapp)
            if sc.dapp.kind == "spectrum":
                sc.dapp.spectrum_config(sc.radio)
            elif sc.dapp.kind == "ranging":
                sc.dapp.ranging_config(sc.radio)
    except ValueError as exc:
        raise ConfigError(f"command-line override: {exc}") from None
    if args.seed is not None:
        sc.seed = args.seed
    if args.duration_slots is not None:
        if args.duration_slots < 1:
            raise ConfigError("command-line override: --duration-slots must be >= 1")
        sc.duration_slots = args.duration_slots
    return sc


def cmd_run(args) -> int:
    sc = _override_scenario(load_scenario(resolve(args.scenario)), args)
    result = run_scenario(sc)
    for path in result.write(args.out):
        print(f"wrote {path}")
    for k, v in result.summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.overhead:
        text = bench.emit_overhead_table()
        if args.out:
            args.out.write_text(text)
        print(text, end="")
        return EXIT_OK
    configs = bench.grid(args.n_loops, args.transport)
    if args.config is not None:
        if not 0 <= args.config < len(configs):
            raise ConfigError(f"--config must be in 0..{len(configs) - 1}")
        configs = [configs[args.config]]
    endpoint = os.environ.get("E3_ENDPOINT") or args.endpoint
    if endpoint and len(configs) == 1:
        configs[0].endpoint = endpoint

    def progress(res):
        c = res.summary["cumulative"]
        print(f"config {res.config.config_id:2d}  ind {res.config.indication_bytes:5d} B  "
              f"ctrl {res.config.control_bytes:4d} B  mean {c.mean_us:8.1f} us  p99 {c.p99_us:8.1f} us  n={c.n}")

    bench.run_grid(configs, args.out, mode=args.mode, progress=progress)
    if args.out:
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        path = resolve(args.scenario)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    problems = validate(path)
    for msg in problems:
        print(f"{path}: {msg}", file=sys.stderr)
    if not problems:
        print(f"{path}: ok")
    return EXIT_CONFIG if problems else EXIT_OK


def cmd_list(args) -> int:
    for name in list_scenarios():
        print(name)
    return EXIT_OK


def cmd_agent(args) -> int:
    try:
        radio = RadioConfig(n_prbs=args.n_prbs, resolution_bins=args.resolution, slot_us=args.slot_us)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    du = SimulatedDU(radio, IncumbentConfig(enabled=args.incumbent), seed=args.seed, ue_distance_m=args.ue_distance_m,
                     ul_snr_db=args.ul_snr_db, n_subcarriers=args.n_subcarriers)
    agent = E3Agent(du)
    endpoint = resolve_endpoint(args)
    period = radio.slot_us * 1e-6
    with transport.open_server(args.transport, endpoint) as server:
        agent.attach(server)
        log.info("agent listening on %s:%s", args.transport, endpoint)
        start = time.monotonic()
        for slot in range(args.duration_slots):
            agent.step(slot)
            delay = start + (slot + 1) * period - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        agent.drain_outbound()
    print(f"slots: {args.duration_slots}")
    print(f"final mask: {' '.join(map(str, sorted(du.scheduler.mask)))}")
    print(f"reports relayed: {len(agent.xapp.reports)}")
    return EXIT_OK


def cmd_dapp(args) -> int:
    radio_kw = dict(n_prbs=args.n_prbs, resolution_bins=args.resolution, slot_us=args.slot_us)
    sel = DappSelection(args.dapp, args.threshold_db, args.hysteresis_slots, 1, args.M, args.model_order,
                        args.grid_step_ns, args.tau_max_ns)
    try:
        radio = RadioConfig(**radio_kw)
        cfg = sel.spectrum_config(radio) if args.dapp == "spectrum" else sel.ranging_config(radio)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with DappCore(args.dapp_id, args.transport, resolve_endpoint(args)) as core:
        dapp = SpectrumSharingDapp(core, cfg) if args.dapp == "spectrum" else RangingDapp(core, cfg)
        dapp.start()
        handled = core.control_loop(max_ticks=args.max_ticks, poll_timeout=0.5)
    print(f"ticks: {handled}")
    if isinstance(dapp, SpectrumSharingDapp):
        print(f"controls sent: {dapp.controls_sent}")
    else:
        for est in dapp.estimates:
            print(f"estimate: {est.distance_m:.3f} m (M={est.M}, peak {est.peak_db:.1f} dB)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "validate": cmd_validate, "list": cmd_list,
            "agent": cmd_agent, "dapp": cmd_dapp}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (transport.TransportError, bench.ClockUnusable, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
