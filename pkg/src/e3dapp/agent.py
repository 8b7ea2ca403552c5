"""RAN-side E3 termination.

The agent pairs dApps, keeps the subscription table, fans RAN snapshots out as
Indications, applies incoming Controls to the simulated DU and relays Reports
to a local mock xApp endpoint. It is a single reactor: every public method is
expected to be called from one thread, except the mock xApp's read accessors.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import codec
from .codec import (
    ControlBody,
    E3Pdu,
    IndicationBody,
    ReportBody,
    SetupRequestBody,
    SetupResponseBody,
    SubscriptionRequestBody,
    SubscriptionResponseBody,
    XAppControlBody,
)
from .ransim import EntryOutOfRange, SimulatedDU
from .transport import ChannelSet, Disconnected, ServerChannelSet, TimedOut

log = logging.getLogger(__name__)

SM_SPECTRUM = 1
SM_CIR = 2

POLICY_THRESHOLD_OVERRIDE = 1


def encode_threshold_policy(threshold_db: float) -> bytes:
    return struct.pack(">i", round(threshold_db * 100))


def decode_threshold_policy(payload: bytes) -> float:
    if len(payload) != 4:
        raise ValueError("threshold policy payload is a 4-byte signed centi-dB value")
    return struct.unpack(">i", payload)[0] / 100.0


class AgentError(Exception):
    pass


class DuplicateDappId(AgentError):
    pass


class NotPaired(AgentError):
    pass


class UnknownSm(AgentError):
    pass


class AlreadySubscribed(AgentError):
    pass


@dataclass
class ServiceModel:
    sm_id: int
    name: str
    producer: Callable[[int], bytes] | None = None
    consumer: Callable[[ControlBody], None] | None = None


class ServiceModelRegistry:
    def __init__(self, models=()):
        self._models: dict[int, ServiceModel] = {}
        for m in models:
            self.register(m)

    def register(self, model: ServiceModel) -> None:
        if model.sm_id in self._models:
            raise ValueError(f"sm_id {model.sm_id} already registered")
        self._models[model.sm_id] = model

    def get(self, sm_id: int) -> ServiceModel:
        try:
            return self._models[sm_id]
        except KeyError:
            raise UnknownSm(f"sm_id {sm_id} not registered") from None

    def __contains__(self, sm_id) -> bool:
        return sm_id in self._models

    def ids(self) -> list[int]:
        return sorted(self._models)

    @classmethod
    def builtin(cls, du: SimulatedDU) -> ServiceModelRegistry:
        return cls([
            ServiceModel(SM_SPECTRUM, "SPECTRUM", du.spectrum_payload, lambda c: du.stage_mask(c.entries)),
            ServiceModel(SM_CIR, "CIR", du.cir_payload, None),
        ])


@dataclass
class Subscription:
    dapp_id: int
    sm_id: int
    period_slots: int
    channels: ChannelSet | None = None
    start_slot: int | None = None
    last_served_slot: int | None = None

    def due(self, slot: int) -> bool:
        if self.last_served_slot is not None and slot <= self.last_served_slot:
            return False
        start = slot if self.start_slot is None else self.start_slot
        return (slot - start) % max(self.period_slots, 1) == 0


class SubscriptionTable:
    def __init__(self):
        self.entries: dict[tuple[int, int], Subscription] = {}

    def add(self, sub: Subscription) -> None:
        key = (sub.dapp_id, sub.sm_id)
        if key in self.entries:
            raise AlreadySubscribed(f"dapp {sub.dapp_id} already subscribed to sm {sub.sm_id}")
        self.entries[key] = sub

    def for_sm(self, sm_id: int) -> list[Subscription]:
        return [s for s in self.entries.values() if s.sm_id == sm_id]

    def drop_dapp(self, dapp_id: int) -> None:
        for key in [k for k in self.entries if k[0] == dapp_id]:
            del self.entries[key]

    def sm_ids(self) -> set[int]:
        return {sm for _, sm in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


class MockXAppEndpoint:
    """Stands in for the Near-RT RIC side: logs Reports, queues one policy per trigger."""

    def __init__(self):
        self._lock = threading.Lock()
        self._reports: list[ReportBody] = []
        self._pending: list[XAppControlBody] = []

    def receive(self, report: ReportBody) -> None:
        with self._lock:
            self._reports.append(report)

    @property
    def reports(self) -> list[ReportBody]:
        with self._lock:
            return list(self._reports)

    def trigger_policy(self, dapp_id: int, policy_key: int, policy_value: bytes) -> None:
        with self._lock:
            self._pending.append(XAppControlBody(dapp_id, policy_key, bytes(policy_value)))

    def take_pending(self) -> list[XAppControlBody]:
        with self._lock:
            out, self._pending = self._pending, []
        return out


@dataclass
class Pairing:
    dapp_id: int
    sm_ids: tuple[int, ...]
    channels: ChannelSet | None = None


class E3Agent:
    def __init__(self, du: SimulatedDU | None = None, registry: ServiceModelRegistry | None = None,
                 xapp: MockXAppEndpoint | None = None,
                 on_control_applied: Callable[[ControlBody, int], None] | None = None):
        self.du = du if du is not None else SimulatedDU()
        self.registry = registry if registry is not None else ServiceModelRegistry.builtin(self.du)
        self.xapp = xapp if xapp is not None else MockXAppEndpoint()
        self.subscriptions = SubscriptionTable()
        self.pairings: dict[int, Pairing] = {}
        self.servers: list[ServerChannelSet] = []
        self.on_control_applied = on_control_applied
        self._seq: dict[int, int] = {}
        self.bytes_published: dict[int, int] = {}

    # E3 Setup / Subscription

    def handle_setup(self, req: SetupRequestBody, channels: ChannelSet | None = None) -> SetupResponseBody:
        if req.dapp_id in self.pairings:
            raise DuplicateDappId(f"dapp {req.dapp_id} is already paired")
        accepted = tuple(sm for sm in req.requested_sm_ids if sm in self.registry)
        if accepted:
            self.pairings[req.dapp_id] = Pairing(req.dapp_id, accepted, channels)
        return SetupResponseBody(req.dapp_id, bool(accepted), accepted)

    def handle_subscription(self, req: SubscriptionRequestBody) -> SubscriptionResponseBody:
        pairing = self.pairings.get(req.dapp_id)
        if pairing is None:
            raise NotPaired(f"dapp {req.dapp_id} has not completed setup")
        if req.sm_id not in pairing.sm_ids:
            raise UnknownSm(f"sm {req.sm_id} was not accepted for dapp {req.dapp_id}")
        self.subscriptions.add(Subscription(req.dapp_id, req.sm_id, req.period_slots, pairing.channels))
        return SubscriptionResponseBody(req.dapp_id, req.sm_id, True)

    def paired_dapps(self) -> list[int]:
        """Pairing list as an xApp-side discovery query would see it."""
        return sorted(self.pairings)

    def handle_request(self, pdu: E3Pdu, channels: ChannelSet | None = None) -> E3Pdu:
        """Wire-level wrapper: agent errors become accepted=0 replies."""
        body = pdu.body
        if isinstance(body, SetupRequestBody):
            try:
                return E3Pdu(self.handle_setup(body, channels))
            except DuplicateDappId as exc:
                log.warning("%s", exc)
                return E3Pdu(SetupResponseBody(body.dapp_id, False, ()))
        if isinstance(body, SubscriptionRequestBody):
            try:
                return E3Pdu(self.handle_subscription(body))
            except AgentError as exc:
                log.warning("%s", exc)
                return E3Pdu(SubscriptionResponseBody(body.dapp_id, body.sm_id, False))
        raise AgentError(f"{pdu.kind.name} is not a setup-channel request")

    def attach(self, server: ServerChannelSet) -> None:
        self.servers.append(server)

    def serve_request(self, server: ServerChannelSet, timeout: float | None = 0.0) -> bool:
        """Answer at most one pending setup-channel request. Returns True if one was handled."""
        try:
            if timeout == 0.0:
                req = server.poll_request()
                if req is None:
                    return False
            else:
                try:
                    req = server.next_request(timeout)
                except TimedOut:
                    return False
            server.reply(self.handle_request(req, server))
        except Disconnected:
            self._release(server)
        return True

    def _release(self, server: ServerChannelSet) -> None:
        """The dApp on `server` went away: forget it and listen for a new one."""
        dapps = [d for d, p in self.pairings.items() if p.channels is server]
        for dapp_id in dapps:
            log.info("dapp %d disconnected", dapp_id)
            self._drain_pairing(self.pairings[dapp_id], 0.0)
            self.unpair(dapp_id)
        if not dapps:
            server.reset()

    # data plane

    def dispatch_slot(self, slot: int, snapshots: dict[int, bytes]) -> int:
        """Publish one Indication per due subscriber. Payload and sequence are shared per sm_id."""
        sent = 0
        for sm_id, payload in snapshots.items():
            due = [s for s in self.subscriptions.for_sm(sm_id) if s.due(slot)]
            if not due:
                continue
            seq = self._seq.get(sm_id, 0)
            self._seq[sm_id] = codec.next_sequence(seq)
            frame = codec.encode(E3Pdu(IndicationBody(sm_id, seq, time.monotonic_ns(), payload)))
            for sub in due:
                if sub.start_slot is None:
                    sub.start_slot = slot
                sub.last_served_slot = slot
                if sub.channels is None:
                    continue
                try:
                    sub.channels.publish(frame)
                except Disconnected:
                    log.warning("dapp %d disconnected", sub.dapp_id)
                    self.unpair(sub.dapp_id)
                    continue
                sent += 1
                self.bytes_published[sm_id] = self.bytes_published.get(sm_id, 0) + len(frame)
        return sent

    def apply_control(self, ctrl: ControlBody, dapp_id: int | None = None) -> int:
        """Hand a Control to its service model. Returns the monotonic ns at which it was applied."""
        if dapp_id is not None and dapp_id not in self.pairings:
            raise NotPaired(f"control from unpaired dapp {dapp_id}")
        model = self.registry.get(ctrl.sm_id)
        if model.consumer is None:
            raise UnknownSm(f"sm {ctrl.sm_id} accepts no control")
        model.consumer(ctrl)
        t4 = time.monotonic_ns()
        if self.on_control_applied is not None:
            self.on_control_applied(ctrl, t4)
        return t4

    def relay_report(self, report: ReportBody) -> None:
        if report.dapp_id not in self.pairings:
            raise NotPaired(f"report from unpaired dapp {report.dapp_id}")
        self.xapp.receive(report)

    def handle_outbound(self, pdu: E3Pdu, dapp_id: int) -> None:
        body = pdu.body
        if isinstance(body, ControlBody):
            self.apply_control(body, dapp_id)
        elif isinstance(body, ReportBody):
            self.relay_report(body)
        else:
            log.warning("ignoring %s on outbound channel of dapp %d", pdu.kind.name, dapp_id)

    def drain_outbound(self, timeout: float = 0.0) -> int:
        """Process every Control/Report already queued by paired dApps."""
        return sum(self._drain_pairing(p, timeout) for p in list(self.pairings.values()))

    def _drain_pairing(self, pairing: Pairing, timeout: float) -> int:
        cs = pairing.channels
        if cs is None:
            return 0
        n = 0
        wait = timeout
        while True:
            try:
                pdu = cs.next(wait)
            except TimedOut:
                break
            except Disconnected:
                if pairing.dapp_id in self.pairings:
                    self.unpair(pairing.dapp_id)
                break
            wait = 0.0
            try:
                self.handle_outbound(pdu, pairing.dapp_id)
            except (AgentError, EntryOutOfRange) as exc:
                log.warning("rejected outbound %s from dapp %d: %s", pdu.kind.name, pairing.dapp_id, exc)
            n += 1
        return n

    def push_policies(self) -> int:
        n = 0
        for body in self.xapp.take_pending():
            pairing = self.pairings.get(body.dapp_id)
            if pairing is None or pairing.channels is None:
                log.warning("policy for unpaired dapp %d dropped", body.dapp_id)
                continue
            try:
                pairing.channels.publish(E3Pdu(body))
            except Disconnected:
                self.unpair(body.dapp_id)
                continue
            n += 1
        return n

    def unpair(self, dapp_id: int) -> None:
        pairing = self.pairings.pop(dapp_id, None)
        self.subscriptions.drop_dapp(dapp_id)
        if pairing is not None and isinstance(pairing.channels, ServerChannelSet):
            pairing.channels.reset()

    def step(self, slot: int) -> int:
        """One reactor iteration: setup requests, outbound traffic, slot boundary, dispatch."""
        for server in self.servers:
            while self.serve_request(server, 0.0):
                pass
        self.drain_outbound()
        self.du.begin_slot(slot)
        snapshots = {}
        for sm_id in sorted(self.subscriptions.sm_ids()):
            producer = self.registry.get(sm_id).producer
            if producer is not None:
                snapshots[sm_id] = producer(slot)
        sent = self.dispatch_slot(slot, snapshots)
        self.push_policies()
        return sent
