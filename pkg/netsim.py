"""
netsim.py - Seeded discrete-event network for the simulated cluster.

The clock is a simpy Environment (1 tick = 1 ms). Every node owns an inbound
queue served at a finite rate; in shared mode client requests and consensus
messages compete for one bounded FIFO, in segregated mode consensus traffic
gets its own unbounded queue that is always served first. Messages may be
dropped (full queue, partition, crashed endpoint) or corrupted in flight, in
which case the receiver's signature check rejects them.
"""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import simpy

from constants import DEFAULT_DELAY_BASE_TICKS, DEFAULT_DELAY_JITTER_TICKS, DEFAULT_QUEUE_CAPACITY
from signatures import KeyRegistry, client_identity, node_identity
from utils import JsonLinesWriter

logger = logging.getLogger(__name__)

SHARED = "shared"
SEGREGATED = "segregated"

DROP_QUEUE_FULL = "queue_full"
DROP_PARTITION = "partition"
DROP_CRASHED = "crashed"


class NetSimError(Exception):
    """Raised for invalid network or fault configuration."""
    pass


def client_endpoint(client_id: int) -> int:
    """Clients live outside the node id space as negative endpoints."""
    return -(client_id + 1)


def endpoint_identity(endpoint: int) -> str:
    return node_identity(endpoint) if endpoint >= 0 else client_identity(-endpoint - 1)


@dataclass(frozen=True)
class DelayModel:
    kind: str = "uniform"
    base: int = DEFAULT_DELAY_BASE_TICKS
    jitter: int = DEFAULT_DELAY_JITTER_TICKS
    mean: float = 3.0
    std: float = 1.0


@dataclass(frozen=True)
class PartitionSpec:
    side_a: FrozenSet[int]
    side_b: FrozenSet[int]
    start: int
    duration: int

    @property
    def end(self) -> int:
        return self.start + self.duration

    def active(self, now: float) -> bool:
        return self.start <= now < self.end

    def separates(self, a: int, b: int) -> bool:
        return (a in self.side_a and b in self.side_b) or (a in self.side_b and b in self.side_a)


@dataclass
class FaultSchedule:
    crashes: List[Tuple[int, int]] = field(default_factory=list)
    restarts: List[Tuple[int, int]] = field(default_factory=list)
    partitions: List[PartitionSpec] = field(default_factory=list)
    delay: DelayModel = field(default_factory=DelayModel)
    corruption_rate: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise NetSimError(f"corruption_rate must be in [0, 1], got {self.corruption_rate}")
        for p in self.partitions:
            if p.side_a & p.side_b:
                raise NetSimError("Partition sides must be disjoint")
            if p.duration < 0:
                raise NetSimError("Partition duration must be non-negative")

    @property
    def first_fault_time(self) -> Optional[int]:
        times = [t for _, t in self.crashes] + [p.start for p in self.partitions]
        return min(times) if times else None


class PeerQueue:
    """Bounded FIFO; offering to a full queue discards the message and counts the drop."""

    def __init__(self, capacity: Optional[int] = DEFAULT_QUEUE_CAPACITY):
        self.capacity = capacity
        self.occupants: Deque[Any] = deque()
        self.drop_count = 0
        self.peak = 0

    def offer(self, item) -> bool:
        if self.capacity is not None and len(self.occupants) >= self.capacity:
            self.drop_count += 1
            return False
        self.occupants.append(item)
        if len(self.occupants) > self.peak:
            self.peak = len(self.occupants)
        return True

    def pop(self):
        return self.occupants.popleft()

    def clear(self) -> List[Any]:
        items = list(self.occupants)
        self.occupants.clear()
        return items

    def __len__(self):
        return len(self.occupants)


@dataclass
class Envelope:
    kind: str
    src: int
    dst: int
    payload: Any
    wire: bytes
    signature: bytes
    consensus: bool
    sent_at: float


class Timer:
    """Cancellable one-shot callback on the simulation clock."""

    __slots__ = ("callback", "cancelled", "owner", "epoch", "due")

    def __init__(self, callback: Callable[[], None], owner: Optional[int], epoch: int, due: float):
        self.callback = callback
        self.cancelled = False
        self.owner = owner
        self.epoch = epoch
        self.due = due

    def cancel(self) -> None:
        self.cancelled = True


class TraceSink:
    """
    Running SHA-256 over canonical event records, optionally mirrored to JSON-lines.
    """

    def __init__(self, path=None, header: Optional[Dict[str, Any]] = None):
        self._hash = hashlib.sha256()
        self.events = 0
        self.kinds: Dict[str, int] = {}
        self._writer = JsonLinesWriter(path) if path else None
        if self._writer and header is not None:
            self._writer.write({"type": "header", **header})

    def record(self, time: float, src: int, dst: int, kind: str, status: str) -> None:
        line = f"{time:.3f}|{src}|{dst}|{kind}|{status}\n"
        self._hash.update(line.encode("ascii"))
        self.events += 1
        key = f"{kind}:{status}"
        self.kinds[key] = self.kinds.get(key, 0) + 1
        if self._writer:
            self._writer.write({"type": "event", "t": round(time, 3), "src": src, "dst": dst,
                                "kind": kind, "status": status})

    def count(self, kind: str, status: str = "delivered") -> int:
        return self.kinds.get(f"{kind}:{status}", 0)

    @property
    def hexdigest(self) -> str:
        return self._hash.hexdigest()

    def close(self, footer: Optional[Dict[str, Any]] = None) -> None:
        if self._writer:
            if footer is not None:
                self._writer.write({"type": "footer", **footer})
            self._writer.close()


class SimNetwork:
    """
    Message transport between node endpoints on a simpy clock.

    Args:
        env: simpy Environment driving the run
        n_nodes: Number of node endpoints (0..n_nodes-1)
        registry: Key registry used to sign and verify envelopes
        rng: numpy Generator dedicated to the network
        channel: SHARED or SEGREGATED inbound queues
        queue_capacity: Bound of the shared (or request) queue
        service_rate: Messages handled per tick per node; None delivers on arrival
        faults: Crashes, partitions, delay model and corruption rate
        trace: Event trace sink
    """

    DELAY_BATCH = 4096

    def __init__(self, env: simpy.Environment, n_nodes: int, registry: KeyRegistry,
                 rng: np.random.Generator, channel: str = SHARED,
                 queue_capacity: Optional[int] = DEFAULT_QUEUE_CAPACITY,
                 service_rate: Optional[float] = None,
                 faults: Optional[FaultSchedule] = None,
                 trace: Optional[TraceSink] = None):
        if channel not in (SHARED, SEGREGATED):
            raise NetSimError(f"Unknown channel mode: {channel}")
        if service_rate is not None and service_rate <= 0:
            raise NetSimError("service_rate must be positive")
        self.env = env
        self.n_nodes = n_nodes
        self.registry = registry
        self.rng = rng
        self.channel = channel
        self.service_time = None if service_rate is None else 1.0 / service_rate
        self.faults = faults or FaultSchedule()
        self.faults.validate()
        self.trace = trace or TraceSink()

        self._handlers: Dict[int, Callable[[Envelope], None]] = {}
        self._crashed = [False] * n_nodes
        self._epochs = [0] * n_nodes
        self._busy = [False] * n_nodes
        self.request_queues = [PeerQueue(queue_capacity) for _ in range(n_nodes)]
        self.consensus_queues = [PeerQueue(None) for _ in range(n_nodes)]
        self._partitions: List[PartitionSpec] = []
        self._heal_listeners: List[Callable[[PartitionSpec], None]] = []
        self._restart_listeners: List[Callable[[int], None]] = []
        self._delays: List[int] = []

        self.sent = 0
        self.delivered = 0
        self.rejected = 0
        self.in_flight = 0
        self.dropped: Dict[str, int] = {DROP_QUEUE_FULL: 0, DROP_PARTITION: 0, DROP_CRASHED: 0}

        for spec in self.faults.partitions:
            self.apply_partition(spec)
        for node, at in self.faults.crashes:
            self.crash(node, at)
        for node, at in self.faults.restarts:
            self.schedule(max(0, at - self.env.now), lambda n=node: self.restart(n))

    # Clock

    @property
    def now(self) -> float:
        return self.env.now

    def schedule(self, delay: float, callback: Callable[[], None], owner: Optional[int] = None) -> Timer:
        """
        Run callback after delay ticks.

        Timers owned by a node do not fire while it is crashed, nor after it restarts.
        """
        epoch = self._epochs[owner] if owner is not None else 0
        timer = Timer(callback, owner, epoch, self.env.now + delay)
        event = self.env.timeout(max(0, delay))
        event.callbacks.append(lambda _event, t=timer: self._fire(t))
        return timer

    def _fire(self, timer: Timer) -> None:
        if timer.cancelled:
            return
        if timer.owner is not None:
            if self._crashed[timer.owner] or self._epochs[timer.owner] != timer.epoch:
                return
        timer.callback()

    def run_until(self, t: float) -> str:
        """Advance the clock to t and return the running trace hash."""
        self.env.run(until=t)
        return self.trace.hexdigest

    # Endpoints

    def register(self, node_id: int, handler: Callable[[Envelope], None]) -> None:
        self._handlers[node_id] = handler

    def on_heal(self, listener: Callable[[PartitionSpec], None]) -> None:
        self._heal_listeners.append(listener)

    def on_restart(self, listener: Callable[[int], None]) -> None:
        self._restart_listeners.append(listener)

    def is_alive(self, node: int) -> bool:
        return node < 0 or not self._crashed[node]

    def crash(self, node: int, t: Optional[float] = None) -> None:
        """Crash node at time t (now if omitted); it processes no further events."""
        if t is not None and t > self.env.now:
            self.schedule(t - self.env.now, lambda: self.crash(node))
            return
        if self._crashed[node]:
            return
        self._crashed[node] = True
        for queue in (self.request_queues[node], self.consensus_queues[node]):
            for envelope in queue.clear():
                self._drop(envelope, DROP_CRASHED)
        self.trace.record(self.env.now, node, node, "crash", "fault")
        logger.info(f"t={self.env.now:.0f} node {node} crashed")

    def restart(self, node: int) -> None:
        if not self._crashed[node]:
            return
        self._crashed[node] = False
        self._epochs[node] += 1
        self._busy[node] = False
        self.trace.record(self.env.now, node, node, "restart", "fault")
        logger.info(f"t={self.env.now:.0f} node {node} restarted")
        for listener in self._restart_listeners:
            listener(node)

    def apply_partition(self, spec: PartitionSpec) -> None:
        """Install a partition window; cross-side messages are dropped while it is active."""
        self._partitions.append(spec)
        self.schedule(max(0, spec.start - self.env.now), lambda: self._partition_started(spec))
        self.schedule(max(0, spec.end - self.env.now), lambda: self._partition_healed(spec))

    def _partition_started(self, spec: PartitionSpec) -> None:
        self.trace.record(self.env.now, -1, -1, "partition", "fault")
        logger.info(f"t={self.env.now:.0f} partition {sorted(spec.side_a)} | {sorted(spec.side_b)}")

    def _partition_healed(self, spec: PartitionSpec) -> None:
        self.trace.record(self.env.now, -1, -1, "heal", "fault")
        logger.info(f"t={self.env.now:.0f} partition healed")
        for listener in self._heal_listeners:
            listener(spec)

    def partitioned(self, a: int, b: int) -> bool:
        if a < 0 or b < 0:
            return False
        now = self.env.now
        return any(p.active(now) and p.separates(a, b) for p in self._partitions)

    # Transport

    def _next_delay(self) -> int:
        if not self._delays:
            model = self.faults.delay
            if model.kind == "normal":
                draws = np.rint(self.rng.normal(model.mean, model.std, self.DELAY_BATCH))
                draws = np.maximum(draws, 1)
            else:
                draws = self.rng.integers(model.base, model.base + model.jitter + 1, self.DELAY_BATCH)
            # Consumed from the end
            self._delays = [int(d) for d in draws[::-1]]
        return self._delays.pop()

    def _corrupt(self, wire: bytes) -> bytes:
        if self.faults.corruption_rate <= 0.0 or not wire:
            return wire
        if self.rng.random() >= self.faults.corruption_rate:
            return wire
        index = int(self.rng.integers(0, len(wire)))
        flipped = bytearray(wire)
        flipped[index] ^= 0xFF
        return bytes(flipped)

    def sign(self, src: int, wire: bytes) -> bytes:
        return self.registry.sign(endpoint_identity(src), wire)

    def send(self, src: int, dst: int, kind: str, payload: Any, wire: bytes,
             consensus: bool = True, signature: Optional[bytes] = None) -> None:
        """Send one message; loss is silent to the sender."""
        if src >= 0 and self._crashed[src]:
            return
        if signature is None:
            signature = self.sign(src, wire)
        envelope = Envelope(kind, src, dst, payload, self._corrupt(wire), signature, consensus, self.env.now)
        self.sent += 1
        self.in_flight += 1
        if self.partitioned(src, dst):
            self._drop(envelope, DROP_PARTITION)
            return
        event = self.env.timeout(self._next_delay())
        event.callbacks.append(lambda _event, e=envelope: self._arrive(e))

    def broadcast(self, src: int, kind: str, payload: Any, wire: bytes,
                  consensus: bool = True, targets: Optional[Sequence[int]] = None,
                  signature: Optional[bytes] = None) -> None:
        """Send to every other node (or to targets), signing the payload once."""
        if src >= 0 and self._crashed[src]:
            return
        if signature is None:
            signature = self.sign(src, wire)
        for dst in (targets if targets is not None else range(self.n_nodes)):
            if dst != src:
                self.send(src, dst, kind, payload, wire, consensus, signature)

    def _drop(self, envelope: Envelope, reason: str) -> None:
        self.in_flight -= 1
        self.dropped[reason] += 1
        self.trace.record(self.env.now, envelope.src, envelope.dst, envelope.kind, reason)

    def _arrive(self, envelope: Envelope) -> None:
        dst = envelope.dst
        if self._crashed[dst]:
            self._drop(envelope, DROP_CRASHED)
            return
        if self.partitioned(envelope.src, dst):
            self._drop(envelope, DROP_PARTITION)
            return
        if self.service_time is None:
            self._deliver(envelope)
            return
        if self.channel == SEGREGATED and envelope.consensus:
            queue = self.consensus_queues[dst]
        else:
            queue = self.request_queues[dst]
        if not queue.offer(envelope):
            self._drop(envelope, DROP_QUEUE_FULL)
            return
        if not self._busy[dst]:
            self._serve_next(dst)

    def _serve_next(self, node: int) -> None:
        if self._crashed[node]:
            self._busy[node] = False
            return
        if self.consensus_queues[node]:
            envelope = self.consensus_queues[node].pop()
        elif self.request_queues[node]:
            envelope = self.request_queues[node].pop()
        else:
            self._busy[node] = False
            return
        self._busy[node] = True
        epoch = self._epochs[node]
        event = self.env.timeout(self.service_time)
        event.callbacks.append(lambda _event, e=envelope, ep=epoch: self._served(e, ep))

    def _served(self, envelope: Envelope, epoch: int) -> None:
        node = envelope.dst
        if self._crashed[node] or self._epochs[node] != epoch:
            self._drop(envelope, DROP_CRASHED)
            return
        self._deliver(envelope)
        self._serve_next(node)

    def _deliver(self, envelope: Envelope) -> None:
        self.in_flight -= 1
        self.delivered += 1
        signer = endpoint_identity(envelope.src)
        if not self.registry.verify(signer, envelope.wire, envelope.signature):
            self.rejected += 1
            self.trace.record(self.env.now, envelope.src, envelope.dst, envelope.kind, "rejected")
            return
        self.trace.record(self.env.now, envelope.src, envelope.dst, envelope.kind, "delivered")
        handler = self._handlers.get(envelope.dst)
        if handler is not None:
            handler(envelope)

    # Reporting

    def stats(self) -> Dict[str, Any]:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "rejected": self.rejected,
            "in_flight": self.in_flight,
            "dropped": dict(self.dropped),
            "peak_queue": max((q.peak for q in self.request_queues), default=0),
        }
