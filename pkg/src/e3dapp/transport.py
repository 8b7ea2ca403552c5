"""E3 connector: three logical channels per dApp-RAN pairing.

* setup: request/reply, carries Setup and Subscription exchanges
* inbound: RAN -> dApp stream (Indication, XAppControl)
* outbound: dApp -> RAN stream (Control, Report)

The RAN side binds all three endpoints; the dApp connects the setup channel
first and the two data channels only after an accepted SetupResponse.
Frames are self-delimiting (see codec), so stream sockets need no extra framing.

Data channels never block the publisher. Each end keeps a bounded queue and
drops the oldest frame when it overflows, counting every drop.
"""

from __future__ import annotations

import collections
import enum
import errno
import math
import os
import select
import socket
import threading
import time
from dataclasses import dataclass, field

from . import codec
from .codec import E3Pdu

DEFAULT_QUEUE = 64
DEFAULT_TIMEOUT = 2.0
_RECV_CHUNK = 1 << 16


class TransportKind(enum.Enum):
    LOCAL_IPC = "ipc"
    TCP = "tcp"
    IN_PROCESS = "inproc"
    # accounting only, never opened
    SCTP_MODEL = "sctp"

    @classmethod
    def parse(cls, value: str | TransportKind) -> TransportKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown transport {value!r}") from None


class TransportError(Exception):
    pass


class InvalidEndpoint(TransportError, ValueError):
    pass


class AddressInUse(TransportError):
    pass


class PermissionDenied(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class SetupRejected(TransportError):
    def __init__(self, response):
        super().__init__(f"setup rejected for dapp {response.dapp_id}")
        self.response = response


class TimedOut(TransportError, TimeoutError):
    pass


class Disconnected(TransportError):
    pass


class ProtocolViolation(TransportError):
    pass


@dataclass(frozen=True)
class Endpoints:
    setup: str
    inbound: str
    outbound: str


def _parse_host_port(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise InvalidEndpoint(f"expected host:port, got {endpoint!r}")
    p = int(port)
    if not 0 < p <= 65533:
        raise InvalidEndpoint(f"port {p} leaves no room for the two data ports")
    return host.strip("[]"), p


def derive_endpoints(kind: TransportKind, endpoint: str) -> Endpoints:
    """Data endpoints follow from the setup endpoint: `.in`/`.out` suffixes or ports +1/+2."""
    kind = TransportKind.parse(kind)
    if not endpoint:
        raise InvalidEndpoint("empty endpoint")
    if kind is TransportKind.TCP:
        host, port = _parse_host_port(endpoint)
        return Endpoints(f"{host}:{port}", f"{host}:{port + 1}", f"{host}:{port + 2}")
    if kind is TransportKind.LOCAL_IPC:
        if ":" in endpoint:
            raise InvalidEndpoint(f"IPC endpoint must be a filesystem path, got {endpoint!r}")
        base = endpoint[: -len(".setup")] if endpoint.endswith(".setup") else endpoint
        eps = Endpoints(endpoint, base + ".in", base + ".out")
        if max(len(os.fsencode(p)) for p in (eps.setup, eps.inbound, eps.outbound)) > 107:
            raise InvalidEndpoint("IPC path too long for a Unix socket")
        return eps
    if kind is TransportKind.IN_PROCESS:
        return Endpoints(endpoint, endpoint + ".in", endpoint + ".out")
    raise InvalidEndpoint(f"{kind.value} cannot be opened")


class Channel:
    """One ordered, bounded message stream."""

    def __init__(self, queue_size: int = DEFAULT_QUEUE):
        if queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        self.queue_size = queue_size
        self.drops = 0
        self.sent = 0
        self.bytes_sent = 0

    def publish(self, pdu: E3Pdu | bytes) -> None:
        frame = pdu if isinstance(pdu, (bytes, bytearray)) else codec.encode(pdu)
        self._publish_frame(bytes(frame))
        self.sent += 1
        self.bytes_sent += len(frame)

    def next(self, timeout: float | None = None) -> E3Pdu:
        frame, _ = self.next_frame(timeout)
        return codec.decode(frame)[0]

    def _publish_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def next_frame(self, timeout: float | None = None) -> tuple[bytes, int]:
        """Oldest undelivered frame and the monotonic ns at which it was handed over."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class MemoryChannel(Channel):
    def __init__(self, queue_size: int = DEFAULT_QUEUE):
        super().__init__(queue_size)
        self._q: collections.deque[bytes] = collections.deque()
        self._cv = threading.Condition()
        self.closed = False

    def _publish_frame(self, frame: bytes) -> None:
        with self._cv:
            if self.closed:
                raise Disconnected("channel closed")
            if len(self._q) >= self.queue_size:
                self._q.popleft()
                self.drops += 1
            self._q.append(frame)
            self._cv.notify()

    def next_frame(self, timeout=None):
        with self._cv:
            if not self._q:
                if self.closed:
                    raise Disconnected("channel closed")
                self._cv.wait_for(lambda: self._q or self.closed, timeout)
            if not self._q:
                if self.closed:
                    raise Disconnected("channel closed")
                raise TimedOut("no message within timeout")
            return self._q.popleft(), time.monotonic_ns()

    def pending(self) -> int:
        with self._cv:
            return len(self._q)

    def clear(self) -> None:
        with self._cv:
            self._q.clear()

    def close(self) -> None:
        with self._cv:
            self.closed = True
            self._cv.notify_all()


class SocketChannel(Channel):
    """Stream-socket channel. Either end may publish or read; a data channel uses one direction."""

    def __init__(self, sock: socket.socket, queue_size: int = DEFAULT_QUEUE):
        super().__init__(queue_size)
        sock.setblocking(False)
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self._poll = select.poll()
        self._poll.register(sock, select.POLLIN)
        self._rx = bytearray()
        self._in: collections.deque[bytes] = collections.deque()
        self._out: collections.deque[bytes] = collections.deque()
        self._partial = memoryview(b"")
        self._eof = False
        self.closed = False
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    # sending

    def _publish_frame(self, frame: bytes) -> None:
        with self._send_lock:
            if self.closed or self._eof:
                raise Disconnected("peer gone")
            if len(self._out) >= self.queue_size:
                self._out.popleft()
                self.drops += 1
            self._out.append(frame)
            self._flush_nowait()

    def _flush_nowait(self) -> None:
        while True:
            if not self._partial:
                if not self._out:
                    return
                self._partial = memoryview(self._out.popleft())
            try:
                n = self.sock.send(self._partial)
            except BlockingIOError:
                return
            except (BrokenPipeError, ConnectionResetError) as exc:
                self._eof = True
                raise Disconnected(str(exc)) from exc
            self._partial = self._partial[n:]

    def flush(self, timeout: float | None = DEFAULT_TIMEOUT) -> None:
        """Block until every queued frame has been handed to the kernel."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._send_lock:
            self._flush_nowait()
            while self._partial or self._out:
                wait = None if deadline is None else max(0.0, deadline - time.monotonic())
                if wait == 0.0:
                    raise TimedOut("flush timed out")
                select.select([], [self.sock], [], wait)
                self._flush_nowait()

    # receiving

    def _pump(self) -> None:
        while True:
            try:
                chunk = self.sock.recv(_RECV_CHUNK)
            except BlockingIOError:
                break
            except ConnectionResetError:
                self._eof = True
                break
            if not chunk:
                self._eof = True
                break
            self._rx += chunk
        pos = 0
        rx = self._rx
        while True:
            n = codec.frame_length(rx, pos)
            if n is None or pos + n > len(rx):
                break
            if len(self._in) >= self.queue_size:
                self._in.popleft()
                self.drops += 1
            self._in.append(bytes(rx[pos : pos + n]))
            pos += n
        if pos:
            del rx[:pos]

    def next_frame(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._recv_lock:
            while True:
                if self.closed:
                    raise Disconnected("channel closed")
                if not self._in:
                    self._pump()
                if self._in:
                    return self._in.popleft(), time.monotonic_ns()
                if self._eof:
                    raise Disconnected("peer closed the connection")
                if deadline is None:
                    self._poll.poll()
                else:
                    wait = deadline - time.monotonic()
                    if wait <= 0:
                        raise TimedOut("no message within timeout")
                    self._poll.poll(max(1, math.ceil(wait * 1000)))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


class ChannelState(enum.Enum):
    IDLE = "idle"
    SETUP_SENT = "setup_sent"
    PAIRED = "paired"
    CLOSED = "closed"


@dataclass
class ChannelSet:
    """The three channels of one dApp-RAN pairing, seen from one side."""

    kind: TransportKind
    endpoints: Endpoints
    role: str  # "ran" or "dapp"
    setup: Channel | None = None
    inbound: Channel | None = None
    outbound: Channel | None = None
    state: ChannelState = ChannelState.IDLE
    setup_response: codec.SetupResponseBody | None = field(default=None, repr=False)

    @property
    def tx(self) -> Channel:
        self._require_paired()
        return self.inbound if self.role == "ran" else self.outbound

    @property
    def rx(self) -> Channel:
        self._require_paired()
        return self.outbound if self.role == "ran" else self.inbound

    def _require_paired(self) -> None:
        if self.state is not ChannelState.PAIRED:
            raise Disconnected(f"channel set is {self.state.value}, not paired")

    def publish(self, pdu: E3Pdu | bytes) -> None:
        self.tx.publish(pdu)

    def next(self, timeout: float | None = None) -> E3Pdu:
        return self.rx.next(timeout)

    def next_frame(self, timeout: float | None = None) -> tuple[bytes, int]:
        return self.rx.next_frame(timeout)

    @property
    def drops(self) -> int:
        return sum(c.drops for c in (self.setup, self.inbound, self.outbound) if c is not None)

    def request(self, pdu: E3Pdu, timeout: float | None = DEFAULT_TIMEOUT) -> E3Pdu:
        """Send one request on the setup channel and wait for its reply (dApp side)."""
        if self.setup is None or self.role != "dapp":
            raise ProtocolViolation("request() is a dApp-side setup-channel call")
        self.setup.publish(pdu)
        if isinstance(self.setup, SocketChannel):
            self.setup.flush(timeout)
        return self.setup.next(timeout)

    def close(self) -> None:
        for ch in (self.setup, self.inbound, self.outbound):
            if ch is not None:
                ch.close()
        self.state = ChannelState.CLOSED


# in-process hubs, keyed by endpoint name
_hubs: dict[str, ServerChannelSet] = {}
_hubs_lock = threading.Lock()


class ServerChannelSet(ChannelSet):
    """RAN side: owns the listeners and accepts exactly one dApp pairing."""

    def __init__(self, kind: TransportKind, endpoints: Endpoints, queue_size: int = DEFAULT_QUEUE,
                 accept_timeout: float = DEFAULT_TIMEOUT):
        super().__init__(kind, endpoints, "ran")
        self.queue_size = queue_size
        self.accept_timeout = accept_timeout
        self._listeners: dict[str, socket.socket] = {}
        self._paths: list[str] = []
        # in-process rendezvous
        self._mem_req: MemoryChannel | None = None
        self._mem_rep: MemoryChannel | None = None

    # binding

    def _bind(self) -> None:
        if self.kind is TransportKind.IN_PROCESS:
            self._mem_req = MemoryChannel(self.queue_size)
            self._mem_rep = MemoryChannel(self.queue_size)
            self.setup = _MemoryDuplex(self._mem_req, self._mem_rep)
            with _hubs_lock:
                if self.endpoints.setup in _hubs:
                    raise AddressInUse(self.endpoints.setup)
                _hubs[self.endpoints.setup] = self
            return
        try:
            for name, ep in (("setup", self.endpoints.setup), ("inbound", self.endpoints.inbound),
                             ("outbound", self.endpoints.outbound)):
                self._listeners[name] = self._listen(ep)
        except BaseException:
            self.close()
            raise

    def _listen(self, ep: str) -> socket.socket:
        if self.kind is TransportKind.LOCAL_IPC:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            if os.path.exists(ep):
                if _unix_alive(ep):
                    sock.close()
                    raise AddressInUse(ep)
                os.unlink(ep)
            addr = ep
        else:
            host, port = _parse_host_port(ep)
            sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            addr = (host, port)
        try:
            sock.bind(addr)
            sock.listen(1)
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(ep) from exc
            if exc.errno in (errno.EACCES, errno.EPERM):
                raise PermissionDenied(ep) from exc
            if exc.errno in (errno.ENOENT, errno.EADDRNOTAVAIL, errno.EINVAL):
                raise InvalidEndpoint(f"{ep}: {exc.strerror}") from exc
            raise
        if self.kind is TransportKind.LOCAL_IPC:
            self._paths.append(ep)
        return sock

    def _accept(self, name: str, timeout: float | None) -> socket.socket:
        lst = self._listeners[name]
        lst.settimeout(timeout)
        try:
            conn, _ = lst.accept()
        except socket.timeout:
            raise TimedOut(f"no connection on {name} channel") from None
        return conn

    # serving

    def next_request(self, timeout: float | None = None) -> E3Pdu:
        """Next Setup/Subscription request from the dApp."""
        if self.setup is None:
            self.setup = SocketChannel(self._accept("setup", timeout), self.queue_size)
        return self.setup.next(timeout)

    def poll_request(self) -> E3Pdu | None:
        if self.setup is None and self.kind is not TransportKind.IN_PROCESS:
            readable, _, _ = select.select([self._listeners["setup"]], [], [], 0)
            if not readable:
                return None
        try:
            return self.next_request(0)
        except TimedOut:
            return None

    def reply(self, pdu: E3Pdu) -> None:
        if self.setup is None:
            raise ProtocolViolation("no setup connection to reply on")
        body = pdu.body
        pairing = isinstance(body, codec.SetupResponseBody) and body.accepted and self.state is not ChannelState.PAIRED
        if pairing and self.kind is TransportKind.IN_PROCESS:
            self._open_data()
        self.setup.publish(pdu)
        if isinstance(self.setup, SocketChannel):
            self.setup.flush(self.accept_timeout)
        if pairing and self.kind is not TransportKind.IN_PROCESS:
            self._open_data()

    def _open_data(self) -> None:
        if self.kind is TransportKind.IN_PROCESS:
            self.inbound = MemoryChannel(self.queue_size)
            self.outbound = MemoryChannel(self.queue_size)
        else:
            self.inbound = SocketChannel(self._accept("inbound", self.accept_timeout), self.queue_size)
            self.outbound = SocketChannel(self._accept("outbound", self.accept_timeout), self.queue_size)
        self.state = ChannelState.PAIRED

    def reset(self) -> None:
        """Drop the current dApp connection and wait for a new Setup on the same listeners."""
        if self.kind is TransportKind.IN_PROCESS:
            self._mem_req.clear()
            self._mem_rep.clear()
        else:
            for ch in (self.setup, self.inbound, self.outbound):
                if ch is not None:
                    ch.close()
            self.setup = None
        self.inbound = self.outbound = None
        self.setup_response = None
        self.state = ChannelState.IDLE

    def close(self) -> None:
        super().close()
        for s in self._listeners.values():
            s.close()
        self._listeners.clear()
        for p in self._paths:
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass
        self._paths.clear()
        with _hubs_lock:
            if _hubs.get(self.endpoints.setup) is self:
                del _hubs[self.endpoints.setup]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _MemoryDuplex(Channel):
    """Request/reply pair for the in-process setup channel."""

    def __init__(self, rx: MemoryChannel, tx: MemoryChannel):
        super().__init__(rx.queue_size)
        self._rx = rx
        self._tx = tx

    def _publish_frame(self, frame: bytes) -> None:
        self._tx._publish_frame(frame)

    def next_frame(self, timeout=None):
        return self._rx.next_frame(timeout)

    def close(self) -> None:
        self._rx.close()
        self._tx.close()


def _unix_alive(path: str) -> bool:
    probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        probe.connect(path)
        return True
    except OSError:
        return False
    finally:
        probe.close()


def open_server(kind: TransportKind | str, endpoint: str, *, queue_size: int = DEFAULT_QUEUE,
                accept_timeout: float = DEFAULT_TIMEOUT) -> ServerChannelSet:
    kind = TransportKind.parse(kind)
    server = ServerChannelSet(kind, derive_endpoints(kind, endpoint), queue_size, accept_timeout)
    server._bind()
    return server


def _dial(kind: TransportKind, ep: str, timeout: float) -> socket.socket:
    if kind is TransportKind.LOCAL_IPC:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        addr = ep
    else:
        host, port = _parse_host_port(ep)
        sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_STREAM)
        addr = (host, port)
    sock.settimeout(timeout)
    try:
        sock.connect(addr)
    except (ConnectionRefusedError, FileNotFoundError) as exc:
        sock.close()
        raise ConnectionRefused(ep) from exc
    except socket.timeout:
        sock.close()
        raise TimedOut(f"connect to {ep}") from None
    return sock


def connect(kind: TransportKind | str, endpoint: str, setup: codec.SetupRequestBody, *,
            timeout: float = DEFAULT_TIMEOUT, queue_size: int = DEFAULT_QUEUE) -> ChannelSet:
    """dApp side: run E3 Setup and open the data channels once it is accepted.

    Idle -> SetupSent -> Paired. Raises SetupRejected, ConnectionRefused or TimedOut.
    """
    kind = TransportKind.parse(kind)
    eps = derive_endpoints(kind, endpoint)
    cs = ChannelSet(kind, eps, "dapp")
    if kind is TransportKind.IN_PROCESS:
        with _hubs_lock:
            hub = _hubs.get(eps.setup)
        if hub is None:
            raise ConnectionRefused(eps.setup)
        cs.setup = _MemoryDuplex(hub._mem_rep, hub._mem_req)
    else:
        cs.setup = SocketChannel(_dial(kind, eps.setup, timeout), queue_size)
    cs.state = ChannelState.SETUP_SENT
    try:
        reply = cs.request(E3Pdu(setup), timeout)
    except BaseException:
        cs.close()
        raise
    body = reply.body
    if not isinstance(body, codec.SetupResponseBody):
        cs.close()
        raise ProtocolViolation(f"expected SetupResponse, got {reply.kind.name}")
    cs.setup_response = body
    if not body.accepted:
        cs.close()
        raise SetupRejected(body)
    if kind is TransportKind.IN_PROCESS:
        cs.inbound, cs.outbound = hub.inbound, hub.outbound
    else:
        cs.inbound = SocketChannel(_dial(kind, eps.inbound, timeout), queue_size)
        cs.outbound = SocketChannel(_dial(kind, eps.outbound, timeout), queue_size)
    cs.state = ChannelState.PAIRED
    return cs


# overhead accounting

IP_TCP_HEADER = 40  # 20 B IPv4 + 20 B TCP per segment
IP_SCTP_HEADER = 40 + 28  # IPv4 + SCTP common header and DATA chunk, per segment


@dataclass(frozen=True)
class OverheadModel:
    """Per-segment protocol bytes and segment size for each transport."""

    per_message_header_bytes: dict = field(default_factory=lambda: {
        TransportKind.LOCAL_IPC: 0,
        TransportKind.IN_PROCESS: 0,
        TransportKind.TCP: IP_TCP_HEADER,
        TransportKind.SCTP_MODEL: IP_SCTP_HEADER,
    })
    mss: dict = field(default_factory=lambda: {TransportKind.TCP: 1460, TransportKind.SCTP_MODEL: 1452})

    @classmethod
    def uniform(cls, mss: int) -> OverheadModel:
        return cls(mss={TransportKind.TCP: mss, TransportKind.SCTP_MODEL: mss})

    @classmethod
    def calibrated(cls) -> OverheadModel:
        """Segment sizes at which TCP costs 20% and the SCTP model about 42% per full segment."""
        return cls(mss={TransportKind.TCP: 200, TransportKind.SCTP_MODEL: 162})

    def mss_for(self, kind: TransportKind) -> int:
        return self.mss.get(kind, 1)


def account_overhead(model: OverheadModel, kind: TransportKind | str, frame_len: int) -> int:
    """Bytes on the wire for one E3 frame of `frame_len` bytes. Pure accounting, nothing is sent."""
    if frame_len <= 0:
        raise ValueError("frame_len must be positive")
    kind = TransportKind.parse(kind)
    hdr = model.per_message_header_bytes.get(kind, 0)
    if hdr == 0:
        return frame_len
    return frame_len + hdr * -(-frame_len // model.mss_for(kind))
