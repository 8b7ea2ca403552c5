"""dApp-side framework: one shared E3 interface per endpoint, callbacks, and the loop driver."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from . import codec, transport
from .codec import (
    ControlBody,
    E3Pdu,
    IndicationBody,
    ReportBody,
    SetupRequestBody,
    SubscriptionRequestBody,
    SubscriptionResponseBody,
    XAppControlBody,
)
from .transport import ChannelSet, TransportKind

log = logging.getLogger(__name__)

Handler = Callable[[IndicationBody], Optional[Sequence[int]]]
PolicyHandler = Callable[[XAppControlBody], None]


class DappError(Exception):
    pass


class UnknownSm(DappError):
    pass


class DuplicateHandler(DappError):
    pass


class EndpointInUse(DappError):
    pass


@dataclass
class LoopTick:
    """One handled Indication. t0 is the agent's dispatch stamp, t1..t3 are stamped here."""

    sm_id: int
    sequence: int
    t0: int
    t1: int
    t2: int = 0
    t3: int | None = None
    control: tuple[int, ...] | None = None
    report: bytes | None = None
    failed: bool = False
    error: str | None = None


class DappCore:
    """The E3 interface of one dApp endpoint.

    At most one core exists per (transport, endpoint) in a process; use
    `DappCore.shared` to get the existing one. Handlers run on the thread that
    drives `control_loop`/`poll_once`, one tick at a time. `schedule_control`
    and `schedule_report` called from inside a handler are published after the
    handler returns, so t1 <= t2 <= t3 always holds.
    """

    _registry: dict[tuple[TransportKind, str], DappCore] = {}
    _registry_lock = threading.Lock()

    def __init__(self, dapp_id: int, transport_kind: TransportKind | str, endpoint: str, *,
                 timeout: float = transport.DEFAULT_TIMEOUT, queue_size: int = transport.DEFAULT_QUEUE):
        self.dapp_id = dapp_id
        self.kind = TransportKind.parse(transport_kind)
        self.endpoint = endpoint
        self.timeout = timeout
        self.queue_size = queue_size
        key = (self.kind, endpoint)
        with DappCore._registry_lock:
            if key in DappCore._registry:
                raise EndpointInUse(f"an E3 interface already exists for {self.kind.value}:{endpoint}")
            DappCore._registry[key] = self
        self.channels: ChannelSet | None = None
        self.accepted: tuple[int, ...] = ()
        self.subscribed: set[int] = set()
        self._callbacks: dict[int, Handler] = {}
        self._policy_handler: PolicyHandler | None = None
        self._tick: LoopTick | None = None
        self._scheduled: list[E3Pdu] = []
        self.tick_sink: Callable[[LoopTick], None] | None = None
        self.ticks = 0
        self._stop = threading.Event()

    @classmethod
    def shared(cls, dapp_id: int, transport_kind, endpoint: str, **kw) -> DappCore:
        kind = TransportKind.parse(transport_kind)
        with cls._registry_lock:
            core = cls._registry.get((kind, endpoint))
        return core if core is not None else cls(dapp_id, kind, endpoint, **kw)

    # E3 Setup / Subscription

    def setup_connection(self, requested_sms: Sequence[int]) -> list[int]:
        """Pair with the RAN node. Returns the accepted service models."""
        self.channels = transport.connect(self.kind, self.endpoint, SetupRequestBody(self.dapp_id, tuple(requested_sms)),
                                          timeout=self.timeout, queue_size=self.queue_size)
        self.accepted = self.channels.setup_response.sm_ids
        return list(self.accepted)

    def subscribe(self, sm_id: int, period_slots: int = 1) -> bool:
        self._require_accepted(sm_id)
        reply = self._channels().request(E3Pdu(SubscriptionRequestBody(self.dapp_id, sm_id, period_slots)),
                                         self.timeout)
        body = reply.body
        if not isinstance(body, SubscriptionResponseBody):
            raise transport.ProtocolViolation(f"expected SubscriptionResponse, got {reply.kind.name}")
        if body.accepted:
            self.subscribed.add(sm_id)
        return body.accepted

    def _channels(self) -> ChannelSet:
        if self.channels is None or self.channels.state is not transport.ChannelState.PAIRED:
            raise transport.Disconnected("not paired")
        return self.channels

    def _require_accepted(self, sm_id: int) -> None:
        if sm_id not in self.accepted:
            raise UnknownSm(f"sm {sm_id} was not accepted at setup")

    # callbacks

    def add_callback(self, sm_id: int, handler: Handler) -> None:
        self._require_accepted(sm_id)
        if sm_id in self._callbacks:
            raise DuplicateHandler(f"sm {sm_id} already has a handler")
        self._callbacks[sm_id] = handler

    def remove_callback(self, sm_id: int) -> None:
        if self._callbacks.pop(sm_id, None) is None:
            raise UnknownSm(f"no handler registered for sm {sm_id}")

    def on_policy(self, handler: PolicyHandler | None) -> None:
        self._policy_handler = handler

    # outbound

    def schedule_control(self, entries: Sequence[int], sm_id: int = 1, sequence: int | None = None) -> None:
        if sequence is None:
            sequence = self._tick.sequence if self._tick is not None else 0
        pdu = E3Pdu(ControlBody(sm_id, sequence, tuple(entries)))
        if self._tick is not None:
            self._tick.control = pdu.body.entries
            self._scheduled.append(pdu)
        else:
            self._channels().publish(pdu)

    def schedule_report(self, payload: bytes, sm_id: int = 1) -> None:
        pdu = E3Pdu(ReportBody(self.dapp_id, sm_id, bytes(payload)))
        if self._tick is not None:
            self._tick.report = pdu.body.payload
            self._scheduled.append(pdu)
        else:
            self._channels().publish(pdu)

    def _flush_scheduled(self) -> None:
        tx = self._channels().tx
        pending, self._scheduled = self._scheduled, []
        for pdu in pending:
            frame = codec.encode(pdu)
            if isinstance(pdu.body, ControlBody):
                self._tick.t3 = time.monotonic_ns()
            tx.publish(frame)

    # loop

    def poll_once(self, timeout: float | None = 0.0) -> LoopTick | None:
        """Handle at most one inbound PDU. Returns the tick for Indications."""
        cs = self._channels()
        try:
            frame, t1 = cs.next_frame(timeout)
        except transport.TimedOut:
            return None
        pdu, _ = codec.decode(frame)
        body = pdu.body
        if isinstance(body, XAppControlBody):
            if self._policy_handler is not None:
                try:
                    self._policy_handler(body)
                except Exception:
                    log.exception("policy handler failed")
            return None
        if not isinstance(body, IndicationBody):
            log.warning("unexpected %s on inbound channel", pdu.kind.name)
            return None
        tick = LoopTick(body.sm_id, body.sequence, body.origin_ts_ns, t1)
        handler = self._callbacks.get(body.sm_id)
        self._tick = tick
        try:
            if handler is not None:
                decision = handler(body)
                if decision is not None:
                    self.schedule_control(decision, sm_id=body.sm_id, sequence=body.sequence)
            tick.t2 = time.monotonic_ns()
            self._flush_scheduled()
        except Exception as exc:
            tick.t2 = tick.t2 or time.monotonic_ns()
            tick.failed = True
            tick.error = f"{type(exc).__name__}: {exc}"
            self._scheduled.clear()
            log.warning("handler for sm %d failed on seq %d: %s", body.sm_id, body.sequence, tick.error)
        finally:
            self._tick = None
        self.ticks += 1
        if self.tick_sink is not None:
            self.tick_sink(tick)
        return tick

    def control_loop(self, stop: threading.Event | None = None, *, max_ticks: int | None = None,
                     poll_timeout: float = 0.05) -> int:
        """Poll and dispatch until `stop` is set, `stop()` is called or `max_ticks` Indications were handled."""
        if not self._callbacks:
            raise DappError("register at least one callback before starting the loop")
        stop = stop or self._stop
        handled = 0
        while not stop.is_set() and (max_ticks is None or handled < max_ticks):
            try:
                tick = self.poll_once(poll_timeout)
            except transport.Disconnected:
                log.info("E3 connection closed, leaving control loop")
                break
            if tick is not None:
                handled += 1
        return handled

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self._stop.set()
        if self.channels is not None:
            self.channels.close()
        with DappCore._registry_lock:
            if DappCore._registry.get((self.kind, self.endpoint)) is self:
                del DappCore._registry[(self.kind, self.endpoint)]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
