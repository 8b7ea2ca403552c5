"""Scenario files and the deterministic single-process runner.

A scenario is a YAML mapping:

    radio:          # required; RadioConfig fields
      resolution_bins: 1536
    incumbent:      # IncumbentConfig fields
      enabled: true
    scheduler:
      type: type1   # the only allocation type implemented
    goodput:        # GoodputModel fields
      collateral_penalty: 0.3
    ue:             # UL channel used by the ranging dApp
      distance_m: 5.0
      ul_snr_db: 0.0
      n_subcarriers: 128
    dapp:
      kind: spectrum          # spectrum | ranging | none
      threshold_db: 20.0
      hysteresis_slots: 0
      period_slots: 1
      M: 20
      model_order: 1
      grid_step_ns: 0.1
      tau_max_ns: 200.0
    duration_slots: 200
    seed: 0

The runner drives agent and dApp in lockstep over in-memory channels: each
slot the agent drains Controls, swaps the mask in, dispatches, then the dApp
handles the Indication. Outputs carry no wall-clock values, so equal inputs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import statistics
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import transport
from .agent import E3Agent
from .ranging import RangingConfig, RangingDapp
from .ransim import GoodputModel, IncumbentConfig, RadioConfig, SimulatedDU
from .sdk import DappCore
from .spectrum import SpectrumConfig, SpectrumSharingDapp

log = logging.getLogger(__name__)

DAPP_KINDS = ("spectrum", "ranging", "none")
SCHEDULER_TYPES = ("type1",)
SCENARIO_DIR = "scenarios"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field_path: str | None = None):
        self.line = line
        self.field = field_path
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(field_path)
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


@dataclass
class UeConfig:
    distance_m: float = 5.0
    ul_snr_db: float = 0.0
    n_subcarriers: int = 128


@dataclass
class DappSelection:
    kind: str = "spectrum"
    threshold_db: float = 20.0
    hysteresis_slots: int = 0
    period_slots: int = 1
    M: int = 20
    model_order: int = 1
    grid_step_ns: float = 0.1
    tau_max_ns: float = 200.0

    def spectrum_config(self, radio: RadioConfig) -> SpectrumConfig:
        return SpectrumConfig(self.threshold_db, radio.noise_floor_db, radio.n_prbs, radio.resolution_bins,
                              self.hysteresis_slots)

    def ranging_config(self, radio: RadioConfig) -> RangingConfig:
        return RangingConfig(M=self.M, model_order=self.model_order, tau_max_s=self.tau_max_ns * 1e-9,
                             grid_step_s=self.grid_step_ns * 1e-9, bandwidth_hz=radio.bandwidth_hz)


@dataclass
class Scenario:
    radio: RadioConfig
    incumbent: IncumbentConfig = field(default_factory=IncumbentConfig)
    goodput: GoodputModel = field(default_factory=GoodputModel)
    ue: UeConfig = field(default_factory=UeConfig)
    dapp: DappSelection = field(default_factory=DappSelection)
    scheduler: str = "type1"
    duration_slots: int = 200
    seed: int = 0
    name: str = "scenario"


# parsing with line numbers


def _plain(node: yaml.Node):
    return yaml.safe_load(yaml.serialize(node))


def _mapping(node: yaml.Node, path: str) -> dict[str, yaml.Node]:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", node.start_mark.line + 1, path)
    out = {}
    for k, v in node.value:
        key = _plain(k)
        if not isinstance(key, str):
            raise ConfigError(f"keys must be strings, got {key!r}", k.start_mark.line + 1, path)
        if key in out:
            raise ConfigError("duplicate key", k.start_mark.line + 1, f"{path}.{key}" if path else key)
        out[key] = v
    return out


_NUMBER = (int, float)


def _coerce(value, ftype: str, line: int, path: str):
    if value is None and "None" in ftype:
        return None
    if "bool" in ftype:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", line, path)
        return value
    if ftype.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", line, path)
        return value
    if ftype.startswith("float"):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a sign (3.6e9) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"expected a number, got {value!r}", line, path)
        return float(value)
    if ftype.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", line, path)
        return value
    return value


def _build(cls, node: yaml.Node | None, path: str):
    if node is None or (isinstance(node, yaml.ScalarNode) and _plain(node) is None):
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, vnode in _mapping(node, path).items():
        line = vnode.start_mark.line + 1
        if key not in fields:
            raise ConfigError(f"unknown field (expected one of {', '.join(sorted(fields))})", line,
                              f"{path}.{key}")
        kwargs[key] = _coerce(_plain(vnode), str(fields[key].type), line, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), node.start_mark.line + 1, path) from None


TOP_LEVEL = ("radio", "incumbent", "scheduler", "goodput", "ue", "dapp", "duration_slots", "seed")


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark is not None else None) from None
    if root is None:
        raise ConfigError("empty scenario file", 1)
    top = _mapping(root, "")
    for key, vnode in top.items():
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown section (expected one of {', '.join(TOP_LEVEL)})",
                              vnode.start_mark.line + 1, key)
    if "radio" not in top:
        raise ConfigError("missing required section", root.start_mark.line + 1, "radio")

    radio = _build(RadioConfig, top["radio"], "radio")
    incumbent = _build(IncumbentConfig, top.get("incumbent"), "incumbent")
    gp = _build(GoodputModel, top.get("goodput"), "goodput")
    ue = _build(UeConfig, top.get("ue"), "ue")
    dapp = _build(DappSelection, top.get("dapp"), "dapp")
    if dapp.kind not in DAPP_KINDS:
        line = _mapping(top["dapp"], "dapp")["kind"].start_mark.line + 1
        raise ConfigError(f"unknown dApp {dapp.kind!r} (expected one of {', '.join(DAPP_KINDS)})", line, "dapp.kind")

    scheduler = "type1"
    if "scheduler" in top:
        sched = _mapping(top["scheduler"], "scheduler")
        for key, vnode in sched.items():
            if key != "type":
                raise ConfigError("unknown field (expected type)", vnode.start_mark.line + 1, f"scheduler.{key}")
            scheduler = _plain(vnode)
            if scheduler not in SCHEDULER_TYPES:
                raise ConfigError(f"unsupported scheduler {scheduler!r}", vnode.start_mark.line + 1, "scheduler.type")

    def scalar_int(key, default, minimum):
        if key not in top:
            return default
        vnode = top[key]
        value = _coerce(_plain(vnode), "int", vnode.start_mark.line + 1, key)
        if value < minimum:
            raise ConfigError(f"must be >= {minimum}", vnode.start_mark.line + 1, key)
        return value

    duration = scalar_int("duration_slots", 200, 1)
    seed = scalar_int("seed", 0, 0)

    if incumbent.enabled:
        lo, hi = incumbent.band
        if hi <= radio.f_lo or lo >= radio.f_lo + radio.bandwidth_hz:
            raise ConfigError("incumbent band does not intersect the carrier", top["incumbent"].start_mark.line + 1,
                              "incumbent")
    if dapp.kind == "spectrum":
        try:
            dapp.spectrum_config(radio)
        except ValueError as exc:
            raise ConfigError(str(exc), top.get("dapp", root).start_mark.line + 1, "dapp") from None
    if dapp.kind == "ranging":
        try:
            dapp.ranging_config(radio)
        except ValueError as exc:
            raise ConfigError(str(exc), top.get("dapp", root).start_mark.line + 1, "dapp") from None
    return Scenario(radio, incumbent, gp, ue, dapp, scheduler, duration, seed, name)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text, path.stem)


def validate(path) -> list[str]:
    """Diagnostics for a scenario file; empty when valid. Never runs the scenario."""
    try:
        load_scenario(path)
    except ConfigError as exc:
        return [str(exc)]
    return []


def _builtin_dir():
    return resources.files(__package__).joinpath(SCENARIO_DIR)


def list_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in _builtin_dir().iterdir() if p.name.endswith(".yaml"))


def resolve(name_or_path) -> Path:
    """A path as given, or a built-in scenario by name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    candidate = _builtin_dir().joinpath(f"{name_or_path}.yaml")
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"no such scenario file or built-in: {name_or_path}")


# running

TIMELINE_COLUMNS = ("slot", "usable_prbs", "n_blocked", "n_interfered", "goodput_mbps", "blocked")
CONTROL_COLUMNS = ("slot", "n_blocked", "blocked")
RANGING_COLUMNS = ("estimate", "distance_m", "error_m", "peak_db", "M", "snr_db")

_run_ids = itertools.count()


@dataclass
class ScenarioResult:
    scenario: Scenario
    timeline: list[dict]
    summary: dict[str, str]
    controls: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    ranging: list[dict] = field(default_factory=list)
    reports: int = 0

    @property
    def mean_goodput(self) -> float:
        return float(self.summary["mean_goodput_mbps"])

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [_write_csv(out / "timeline.csv", TIMELINE_COLUMNS, self.timeline)]
        if self.scenario.dapp.kind == "spectrum":
            rows = [{"slot": s, "n_blocked": len(b), "blocked": _prb_list(b)} for s, b in self.controls]
            written.append(_write_csv(out / "controls.csv", CONTROL_COLUMNS, rows))
        if self.scenario.dapp.kind == "ranging":
            written.append(_write_csv(out / "ranging.csv", RANGING_COLUMNS, self.ranging))
        summary = out / "summary.txt"
        summary.write_text("".join(f"{k}: {v}\n" for k, v in self.summary.items()))
        written.append(summary)
        return written


def _write_csv(path: Path, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _prb_list(prbs) -> str:
    return " ".join(str(p) for p in sorted(prbs))


def _pair(agent: E3Agent, server, start) -> None:
    """Serve Setup/Subscription while `start` runs on a helper thread."""
    failure: list[BaseException] = []

    def runner():
        try:
            start()
        except BaseException as exc:
            failure.append(exc)

    t = threading.Thread(target=runner, name="dapp-setup", daemon=True)
    t.start()
    while t.is_alive():
        agent.serve_request(server, 0.01)
    t.join()
    if failure:
        raise failure[0]


def run_scenario(sc: Scenario) -> ScenarioResult:
    du = SimulatedDU(sc.radio, sc.incumbent, sc.goodput, seed=sc.seed, ue_distance_m=sc.ue.distance_m,
                     ul_snr_db=sc.ue.ul_snr_db, n_subcarriers=sc.ue.n_subcarriers)
    agent = E3Agent(du)
    endpoint = f"scenario-{sc.name}-{next(_run_ids)}"
    dapp = core = None
    with transport.open_server(transport.TransportKind.IN_PROCESS, endpoint) as server:
        agent.attach(server)
        try:
            if sc.dapp.kind != "none":
                core = DappCore(1, transport.TransportKind.IN_PROCESS, endpoint)
                if sc.dapp.kind == "spectrum":
                    dapp = SpectrumSharingDapp(core, sc.dapp.spectrum_config(sc.radio))
                else:
                    dapp = RangingDapp(core, sc.dapp.ranging_config(sc.radio))
                _pair(agent, server, lambda: dapp.start(sc.dapp.period_slots))

            timeline = []
            for slot in range(sc.duration_slots):
                sent = agent.step(slot)
                hit = du.interfered(slot)
                timeline.append({
                    "slot": slot,
                    "usable_prbs": len(du.usable_run),
                    "n_blocked": len(du.scheduler.mask),
                    "n_interfered": len(hit & set(du.usable_run)),
                    "goodput_mbps": f"{du.slot_goodput(slot):.6f}",
                    "blocked": _prb_list(du.scheduler.mask),
                })
                for _ in range(sent):
                    core.poll_once(transport.DEFAULT_TIMEOUT)
            agent.drain_outbound()
        finally:
            if core is not None:
                core.close()

    goodputs = [float(r["goodput_mbps"]) for r in timeline]
    summary = {
        "scenario": sc.name,
        "dapp": sc.dapp.kind,
        "incumbent": "yes" if sc.incumbent.enabled else "no",
        "seed": str(sc.seed),
        "duration_slots": str(sc.duration_slots),
        "mean_goodput_mbps": f"{sum(goodputs) / len(goodputs):.6f}",
        "min_goodput_mbps": f"{min(goodputs):.6f}",
        "max_goodput_mbps": f"{max(goodputs):.6f}",
        "reports_relayed": str(len(agent.xapp.reports)),
    }
    result = ScenarioResult(sc, timeline, summary, reports=len(agent.xapp.reports))
    if isinstance(dapp, SpectrumSharingDapp):
        result.controls = list(dapp.timeline)
        summary["controls_sent"] = str(dapp.controls_sent)
        summary["final_blacklist"] = _prb_list(dapp.last_sent or ())
    if isinstance(dapp, RangingDapp):
        true_d = sc.ue.distance_m
        for i, est in enumerate(dapp.estimates):
            result.ranging.append({
                "estimate": i,
                "distance_m": f"{est.distance_m:.6f}",
                "error_m": f"{abs(est.distance_m - true_d):.6f}",
                "peak_db": f"{est.peak_db:.4f}",
                "M": est.M,
                "snr_db": f"{est.snr_db:.4f}",
            })
        summary["estimates"] = str(len(dapp.estimates))
        if dapp.estimates:
            summary["median_error_m"] = f"{statistics.median(abs(e.distance_m - true_d) for e in dapp.estimates):.6f}"
    return result

