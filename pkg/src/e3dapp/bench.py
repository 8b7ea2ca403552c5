"""Four-stage control-loop latency benchmark and transport overhead table.

Stages per loop, all on the host-wide monotonic clock:

    collect  = T1 - T0   agent dispatch -> dApp receipt
    process  = T2 - T1   decode + detection
    create   = T3 - T2   Control encode
    deliver  = T4 - T3   transmission + application at the agent
"""

from __future__ import annotations

import csv
import io
import ipaddress
import logging
import multiprocessing as mp
import os
import socket
import tempfile
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .agent import SM_SPECTRUM, E3Agent
from .ransim import IncumbentConfig, RadioConfig, SimulatedDU, gen_spectrum
from .sdk import DappCore, LoopTick
from .spectrum import SpectrumConfig, detect
from .transport import OverheadModel, TransportKind, account_overhead, open_server

log = logging.getLogger(__name__)

INDICATION_SIZES = (1536, 3072, 6144, 8192)
STAGES = ("collect", "process", "create", "deliver", "cumulative")
CSV_COLUMNS = ("config_id", "indication_bytes", "control_bytes", "stage", "mean_us", "p50_us", "p99_us", "n")
WARMUP = 100
BENCH_DAPP_ID = 4242


class ClockUnusable(RuntimeError):
    pass


@dataclass(frozen=True)
class StageLatencyRecord:
    sequence: int
    t0: int
    t1: int
    t2: int
    t3: int
    t4: int
    failed: bool = False

    @property
    def collect(self) -> int:
        return self.t1 - self.t0

    @property
    def process(self) -> int:
        return self.t2 - self.t1

    @property
    def create(self) -> int:
        return self.t3 - self.t2

    @property
    def deliver(self) -> int:
        return self.t4 - self.t3

    @property
    def cumulative(self) -> int:
        return self.t4 - self.t0

    def monotone(self) -> bool:
        return self.t0 <= self.t1 <= self.t2 <= self.t3 <= self.t4


def max_entries_for(resolution: int, n_prbs: int = 106) -> int:
    """Largest blacklist a detector at this resolution can produce."""
    return min(n_prbs, resolution)


@dataclass
class BenchConfig:
    indication_bytes: int = 1536
    control_entries: int = 4
    n_loops: int = 10_000
    warmup: int = WARMUP
    transport: str = "ipc"
    endpoint: str | None = None
    config_id: int = 0
    seed: int = 0
    timeout: float = 5.0

    def __post_init__(self):
        if self.indication_bytes % 4:
            raise ValueError("indication_bytes must be a multiple of 4")
        if self.control_entries < 0:
            raise ValueError("control_entries must be >= 0")

    @property
    def resolution(self) -> int:
        return self.indication_bytes // 4

    @property
    def control_bytes(self) -> int:
        return 4 * self.control_entries


def grid(n_loops: int = 10_000, transport: str = "ipc") -> list[BenchConfig]:
    """The 4 x 4 grid: indication size x control size (0, 4, 8 and all PRBs)."""
    out = []
    for i, size in enumerate(INDICATION_SIZES):
        for j, entries in enumerate((0, 4, 8, max_entries_for(size // 4))):
            out.append(BenchConfig(size, entries, n_loops, transport=transport, config_id=4 * i + j))
    return out


@dataclass(frozen=True)
class StageSummary:
    mean_us: float
    p50_us: float
    p99_us: float
    min_us: float
    max_us: float
    n: int


def summarize(records: list[StageLatencyRecord]) -> dict[str, StageSummary]:
    if not records:
        nan = float("nan")
        return {s: StageSummary(nan, nan, nan, nan, nan, 0) for s in STAGES}
    out = {}
    for stage in STAGES:
        us = np.array([getattr(r, stage) for r in records], dtype=np.float64) / 1e3
        p50, p99 = np.percentile(us, [50, 99])
        out[stage] = StageSummary(float(us.mean()), float(p50), float(p99), float(us.min()), float(us.max()), len(us))
    return out


@dataclass
class BenchResult:
    config: BenchConfig
    records: list[StageLatencyRecord]
    summary: dict[str, StageSummary] = field(default_factory=dict)
    drops: int = 0

    def rows(self) -> list[dict]:
        return [
            {
                "config_id": self.config.config_id,
                "indication_bytes": self.config.indication_bytes,
                "control_bytes": self.config.control_bytes,
                "stage": stage,
                "mean_us": f"{s.mean_us:.3f}",
                "p50_us": f"{s.p50_us:.3f}",
                "p99_us": f"{s.p99_us:.3f}",
                "n": s.n,
            }
            for stage, s in self.summary.items()
        ]


def write_csv(results: list[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for res in results:
            w.writerows(res.rows())


def _bench_payloads(cfg: BenchConfig, count: int = 8) -> list[bytes]:
    radio = RadioConfig(resolution_bins=cfg.resolution)
    inc = IncumbentConfig(enabled=True)
    return [gen_spectrum(radio, inc, slot, seed=cfg.seed).to_payload() for slot in range(count)]


def _bench_handler(cfg: BenchConfig):
    scfg = SpectrumConfig(resolution=cfg.resolution)
    entries = tuple(range(cfg.control_entries))

    def handler(ind: codec.IndicationBody):
        from .ransim import IqSpectrum

        detect(IqSpectrum.from_payload(ind.payload), scfg)
        return entries

    return handler


def _dapp_main(kind: str, endpoint: str, cfg: BenchConfig, total: int, conn) -> None:
    """dApp side of the benchmark; sends (seq, t0, t1, t2, t3, failed) tuples back."""
    ticks: list[LoopTick] = []
    try:
        core = DappCore(BENCH_DAPP_ID, kind, endpoint, timeout=cfg.timeout)
        core.setup_connection([SM_SPECTRUM])
        core.add_callback(SM_SPECTRUM, _bench_handler(cfg))
        core.subscribe(SM_SPECTRUM, 1)
        core.tick_sink = ticks.append
        conn.send(("ready", None))
        core.control_loop(max_ticks=total, poll_timeout=cfg.timeout)
        conn.send(("ticks", [(t.sequence, t.t0, t.t1, t.t2, t.t3, t.failed) for t in ticks]))
        core.close()
    except Exception as exc:  # report to the parent instead of dying silently
        conn.send(("error", f"{type(exc).__name__}: {exc}"))
    finally:
        conn.close()


def _check_same_host(kind: TransportKind, endpoint: str) -> None:
    if kind is not TransportKind.TCP:
        return
    host = endpoint.rpartition(":")[0].strip("[]")
    try:
        addrs = {ipaddress.ip_address(a[4][0]) for a in socket.getaddrinfo(host, None)}
    except socket.gaierror as exc:
        raise ClockUnusable(f"cannot resolve {host}") from exc
    local = {ipaddress.ip_address(a) for a in ("0.0.0.0", "::")}
    if not all(a.is_loopback or a in local for a in addrs):
        raise ClockUnusable("cross-host benchmarks would compare unrelated monotonic clocks")


def _default_endpoint(kind: TransportKind, cfg: BenchConfig) -> str:
    if kind is TransportKind.TCP:
        return f"127.0.0.1:{20000 + 3 * cfg.config_id}"
    if kind is TransportKind.IN_PROCESS:
        return f"bench-{os.getpid()}-{cfg.config_id}-{time.monotonic_ns()}"
    return os.path.join(tempfile.gettempdir(), f"e3bench-{os.getpid()}-{cfg.config_id}.setup")


def run_bench(cfg: BenchConfig, *, mode: str = "process") -> BenchResult:
    """Run one configuration. `mode` is "process" (dApp in a child process) or "thread"."""
    kind = TransportKind.parse(cfg.transport)
    endpoint = cfg.endpoint or _default_endpoint(kind, cfg)
    _check_same_host(kind, endpoint)
    if cfg.n_loops <= 0:
        return BenchResult(cfg, [], summarize([]))
    if kind is TransportKind.IN_PROCESS:
        mode = "thread"

    t4_by_seq: dict[int, int] = {}
    du = SimulatedDU(RadioConfig(resolution_bins=cfg.resolution))
    agent = E3Agent(du, on_control_applied=lambda ctrl, t4: t4_by_seq.__setitem__(ctrl.sequence, t4))
    payloads = _bench_payloads(cfg)
    total = cfg.n_loops

    parent, child = mp.Pipe()
    with open_server(kind, endpoint, accept_timeout=cfg.timeout) as server:
        agent.attach(server)
        if mode == "process":
            worker = mp.get_context("spawn").Process(target=_dapp_main, args=(kind.value, endpoint, cfg, total, child),
                                                     daemon=True)
        else:
            worker = threading.Thread(target=_dapp_main, args=(kind.value, endpoint, cfg, total, child), daemon=True)
        worker.start()
        try:
            # Setup then Subscription
            deadline = time.monotonic() + 30.0
            while not parent.poll():
                agent.serve_request(server, 0.05)
                if time.monotonic() > deadline:
                    raise TimeoutError("dApp never became ready")
            tag, info = parent.recv()
            if tag != "ready":
                raise RuntimeError(f"dApp failed during setup: {info}")
            dapp_id = agent.paired_dapps()[0]
            cs = agent.pairings[dapp_id].channels
            for loop in range(total):
                agent.dispatch_slot(loop, {SM_SPECTRUM: payloads[loop % len(payloads)]})
                pdu = cs.next(cfg.timeout)
                agent.handle_outbound(pdu, dapp_id)
            if not parent.poll(cfg.timeout + 30.0):
                raise TimeoutError("dApp did not return its timestamps")
            tag, ticks = parent.recv()
            if tag != "ticks":
                raise RuntimeError(f"dApp failed: {ticks}")
        finally:
            worker.join(timeout=10)
    drops = server.drops

    records = []
    for seq, t0, t1, t2, t3, failed in ticks:
        t4 = t4_by_seq.get(seq)
        if t3 is None or t4 is None:
            continue
        rec = StageLatencyRecord(seq, t0, t1, t2, t3, t4, failed)
        if not rec.monotone():
            raise ClockUnusable(f"non-monotonic timestamps on loop {seq}: {rec}")
        records.append(rec)
    records.sort(key=lambda r: r.sequence)
    kept = records[cfg.warmup:]
    return BenchResult(cfg, kept, summarize(kept), drops)


def run_grid(configs: list[BenchConfig], out_path=None, *, mode: str = "process", progress=None) -> list[BenchResult]:
    results = []
    for cfg in configs:
        res = run_bench(cfg, mode=mode)
        results.append(res)
        if progress is not None:
            progress(res)
    if out_path is not None:
        write_csv(results, out_path)
    return results


# transport overhead table

OVERHEAD_COLUMNS = ("transport", "overhead_pct_without_framing", "overhead_pct_with_framing")


def overhead_rows(model: OverheadModel | None = None, reference_payload: int = 8192) -> list[dict]:
    """Per-transport overhead for a full segment, plus the E3 header share of a reference Indication."""
    model = model or OverheadModel.calibrated()
    framing_pct = 100.0 * float(codec.header_overhead_exact(reference_payload))
    rows = []
    for kind in (TransportKind.TCP, TransportKind.SCTP_MODEL, TransportKind.LOCAL_IPC):
        size = model.mss_for(kind) if kind in model.mss else reference_payload
        pct = 100.0 * (account_overhead(model, kind, size) - size) / size
        rows.append({
            "transport": kind.value,
            "overhead_pct_without_framing": round(pct, 4),
            "overhead_pct_with_framing": round(pct + framing_pct, 4),
        })
    return rows


def emit_overhead_table(model: OverheadModel | None = None, reference_payload: int = 8192) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=OVERHEAD_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(overhead_rows(model, reference_payload))
    return buf.getvalue()
