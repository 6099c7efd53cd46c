"""Publish/subscribe metadata and the rules that mutate it.

``BrokerState`` is a plain, single-threaded state machine: the server calls
one method per complete request frame, and each method either raises
(before touching anything) or applies its whole effect. Side effects for
other sessions are queued as events in ``outbox`` for the server to send.

Clients are identified by an opaque ``client`` key (the server uses its
session number); ``pid`` is only used to give each process one arena.
"""

import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

from zerocast.arena import ArenaDescriptor, shm_name_for
from zerocast.errors import (
    AddressOutOfArena,
    BrokerError,
    ConflictingArena,
    LimitExceeded,
    NotHolder,
    PayloadTooLarge,
    QueueFull,
    UnknownEntry,
)
from zerocast.wire import MAX_PAYLOAD

MiB = 1 << 20


@dataclass
class BrokerConfig:
    pool_start: int = 0x2000_0000_0000
    arena_capacity: int = 64 * MiB
    slot_stride: int = 128 * MiB
    max_slots: int = 4096
    queue_capacity: int = 16
    max_topics: int = 1024
    max_endpoints_per_topic: int = 256
    max_payload: int = MAX_PAYLOAD


# events handed to the server; ``client`` names the receiving session


class Delivery(NamedTuple):
    client: int
    subscriber_id: int
    publisher_id: int
    entry_id: int
    address: int
    arena_name: str


class Reclaim(NamedTuple):
    client: int
    publisher_id: int
    entry_id: int


class Announce(NamedTuple):
    client: int
    subscriber_id: int
    publisher_id: int
    arena: ArenaDescriptor


class BaselineDelivery(NamedTuple):
    client: int
    subscriber_id: int
    origin_id: int
    payload: bytes


class UnlinkArena(NamedTuple):
    name: str


@dataclass
class QueueEntry:
    publisher_id: int
    entry_id: int
    message_address: int
    arena_name: str
    unreceived_count: int
    pending: set
    delivered_to: set = field(default_factory=set)
    holder_refs: dict = field(default_factory=dict)
    ref_count: int = 0
    published_at: int = field(default_factory=time.monotonic_ns)

    @property
    def key(self):
        return self.publisher_id, self.entry_id


@dataclass
class PublisherRecord:
    publisher_id: int
    topic: str
    client: int
    pid: int
    arena: ArenaDescriptor
    queue_capacity: int
    queue: OrderedDict = field(default_factory=OrderedDict)
    next_entry_id: int = 1


@dataclass
class SubscriberRecord:
    subscriber_id: int
    topic: str
    client: int
    pid: int


@dataclass
class BaselineEndpoint:
    endpoint_id: int
    topic: str
    client: int
    is_publisher: bool


@dataclass
class TopicRecord:
    name: str
    publishers: dict = field(default_factory=dict)
    subscribers: dict = field(default_factory=dict)
    baseline_publishers: dict = field(default_factory=dict)
    baseline_subscribers: dict = field(default_factory=dict)

    def empty(self):
        return not (self.publishers or self.subscribers or self.baseline_publishers or self.baseline_subscribers)

    def endpoint_count(self):
        return (len(self.publishers) + len(self.subscribers)
                + len(self.baseline_publishers) + len(self.baseline_subscribers))


class BrokerState:
    def __init__(self, config=None):
        self.config = config or BrokerConfig()
        self.topics = {}
        self.publishers = {}
        self.subscribers = {}
        self.baseline = {}
        self.entries = {}
        # pid -> ArenaDescriptor, for processes with a live client
        self.arenas = {}
        self.client_pids = {}
        # arena name -> live entry count, for arenas whose owning process is gone
        self.retired_arenas = {}
        self.next_id = 1
        self.next_slot = 0
        self.outbox = []

    # helpers

    def _new_id(self):
        i = self.next_id
        self.next_id += 1
        return i

    def _bind_client(self, client, pid):
        known = self.client_pids.get(client)
        if known is None:
            self.client_pids[client] = pid
        elif known != pid:
            raise ConflictingArena(f"client already registered as pid {known}")

    def _topic_for_new_endpoint(self, name):
        topic = self.topics.get(name)
        if topic is None:
            if len(self.topics) >= self.config.max_topics:
                raise LimitExceeded(f"topic limit {self.config.max_topics} reached")
            return TopicRecord(name)
        if topic.endpoint_count() >= self.config.max_endpoints_per_topic:
            raise LimitExceeded(f"endpoint limit reached on {name!r}")
        return topic

    def _arena_for(self, pid):
        arena = self.arenas.get(pid)
        if arena is not None:
            return arena
        if self.next_slot >= self.config.max_slots:
            raise LimitExceeded("arena slot pool exhausted")
        base = self.config.pool_start + self.next_slot * self.config.slot_stride
        self.next_slot += 1
        return ArenaDescriptor(shm_name_for(pid, base), base, self.config.arena_capacity, pid)

    def _owned_publisher(self, client, publisher_id):
        pub = self.publishers.get(publisher_id)
        if pub is None or pub.client != client:
            raise BrokerError(f"publisher {publisher_id} does not belong to this session")
        return pub

    def _settle(self, entry):
        if entry.ref_count or entry.unreceived_count:
            return
        del self.entries[entry.key]
        pub = self.publishers.get(entry.publisher_id)
        if pub is not None:
            del pub.queue[entry.entry_id]
            self.outbox.append(Reclaim(pub.client, pub.publisher_id, entry.entry_id))
            return
        name = entry.arena_name
        if name in self.retired_arenas:
            self.retired_arenas[name] -= 1
            if not self.retired_arenas[name]:
                del self.retired_arenas[name]
                self.outbox.append(UnlinkArena(name))

    # registration

    def register_publisher(self, client, pid, topic_name):
        """Returns (publisher_id, ArenaDescriptor, current subscriber count)."""
        self._bind_client(client, pid)
        topic = self._topic_for_new_endpoint(topic_name)
        arena = self._arena_for(pid)
        self.topics[topic_name] = topic
        self.arenas[pid] = arena
        pub = PublisherRecord(self._new_id(), topic_name, client, pid, arena, self.config.queue_capacity)
        self.publishers[pub.publisher_id] = pub
        topic.publishers[pub.publisher_id] = pub
        for sub in topic.subscribers.values():
            self.outbox.append(Announce(sub.client, sub.subscriber_id, pub.publisher_id, arena))
        return pub.publisher_id, arena, len(topic.subscribers)

    def register_subscriber(self, client, pid, topic_name):
        """Returns (subscriber_id, [(publisher_id, ArenaDescriptor), ...])."""
        self._bind_client(client, pid)
        topic = self._topic_for_new_endpoint(topic_name)
        self.topics[topic_name] = topic
        sub = SubscriberRecord(self._new_id(), topic_name, client, pid)
        self.subscribers[sub.subscriber_id] = sub
        topic.subscribers[sub.subscriber_id] = sub
        return sub.subscriber_id, [(p.publisher_id, p.arena) for p in topic.publishers.values()]

    def register_baseline(self, client, pid, topic_name, is_publisher):
        self._bind_client(client, pid)
        topic = self._topic_for_new_endpoint(topic_name)
        self.topics[topic_name] = topic
        ep = BaselineEndpoint(self._new_id(), topic_name, client, is_publisher)
        self.baseline[ep.endpoint_id] = ep
        group = topic.baseline_publishers if is_publisher else topic.baseline_subscribers
        group[ep.endpoint_id] = ep
        return ep.endpoint_id

    # message flow

    def publish_entry(self, client, publisher_id, address, deliver=True):
        pub = self._owned_publisher(client, publisher_id)
        if not pub.arena.contains(address):
            raise AddressOutOfArena(f"{address:#x} is outside arena {pub.arena.name}")
        if len(pub.queue) >= pub.queue_capacity:
            raise QueueFull(f"publisher {publisher_id} has {len(pub.queue)} unreclaimed entries")
        subs = set(self.topics[pub.topic].subscribers)
        entry = QueueEntry(publisher_id, pub.next_entry_id, address, pub.arena.name, len(subs), subs)
        pub.next_entry_id += 1
        pub.queue[entry.entry_id] = entry
        self.entries[entry.key] = entry
        if deliver:
            for sub_id in sorted(subs):
                self.deliver(publisher_id, entry.entry_id, sub_id)
        self._settle(entry)
        return entry.entry_id

    def deliver(self, publisher_id, entry_id, subscriber_id):
        """Commit one delivery notification and credit the subscriber a reference."""
        entry = self.entries[(publisher_id, entry_id)]
        entry.pending.remove(subscriber_id)
        entry.unreceived_count -= 1
        entry.delivered_to.add(subscriber_id)
        entry.ref_count += 1
        entry.holder_refs[subscriber_id] = entry.holder_refs.get(subscriber_id, 0) + 1
        sub = self.subscribers[subscriber_id]
        arena = self.publishers[publisher_id].arena
        self.outbox.append(Delivery(sub.client, subscriber_id, publisher_id, entry_id, entry.message_address, arena.name))

    def _held_entry(self, client, holder_id, publisher_id, entry_id):
        entry = self.entries.get((publisher_id, entry_id))
        if entry is None:
            raise UnknownEntry(f"no entry ({publisher_id}, {entry_id})")
        holder = self.subscribers.get(holder_id) or self.publishers.get(holder_id)
        if holder is None or holder.client != client or entry.holder_refs.get(holder_id, 0) < 1:
            raise NotHolder(f"endpoint {holder_id} holds no reference to ({publisher_id}, {entry_id})")
        return entry

    def incr_ref(self, client, holder_id, publisher_id, entry_id):
        entry = self._held_entry(client, holder_id, publisher_id, entry_id)
        entry.ref_count += 1
        entry.holder_refs[holder_id] += 1

    def decr_ref(self, client, holder_id, publisher_id, entry_id):
        entry = self._held_entry(client, holder_id, publisher_id, entry_id)
        entry.ref_count -= 1
        entry.holder_refs[holder_id] -= 1
        if not entry.holder_refs[holder_id]:
            del entry.holder_refs[holder_id]
        self._settle(entry)

    def baseline_publish(self, client, origin_id, payload):
        ep = self.baseline.get(origin_id)
        if ep is None or ep.client != client or not ep.is_publisher:
            raise BrokerError(f"baseline endpoint {origin_id} does not belong to this session")
        if len(payload) > self.config.max_payload:
            raise PayloadTooLarge(f"{len(payload)} bytes exceeds {self.config.max_payload}")
        payload = bytes(payload)
        for sub in self.topics[ep.topic].baseline_subscribers.values():
            self.outbox.append(BaselineDelivery(sub.client, sub.endpoint_id, origin_id, payload))

    # teardown

    def process_exit(self, client):
        """Remove every trace of ``client``, as if it had dropped all its handles first."""
        pid = self.client_pids.pop(client, None)
        if pid is None:
            return
        subs = {i for i, s in self.subscribers.items() if s.client == client}
        pubs = {i for i, p in self.publishers.items() if p.client == client}
        touched = []
        for key in sorted(self.entries):
            entry = self.entries[key]
            changed = False
            for holder in subs | pubs:
                n = entry.holder_refs.pop(holder, 0)
                if n:
                    entry.ref_count -= n
                    changed = True
            dead_pending = entry.pending & subs
            if entry.publisher_id in pubs:
                dead_pending = set(entry.pending)
            if dead_pending:
                entry.pending -= dead_pending
                entry.unreceived_count -= len(dead_pending)
                changed = True
            if changed or entry.publisher_id in pubs:
                touched.append(entry)

        for i in subs:
            sub = self.subscribers.pop(i)
            del self.topics[sub.topic].subscribers[i]
        for i in [i for i, ep in self.baseline.items() if ep.client == client]:
            ep = self.baseline.pop(i)
            topic = self.topics[ep.topic]
            (topic.baseline_publishers if ep.is_publisher else topic.baseline_subscribers).pop(i)
        for i in pubs:
            pub = self.publishers.pop(i)
            del self.topics[pub.topic].publishers[i]
        for name in [n for n, t in self.topics.items() if t.empty()]:
            del self.topics[name]

        arena = None
        if pid not in self.client_pids.values():
            arena = self.arenas.pop(pid, None)
        if arena is not None:
            self.retired_arenas[arena.name] = sum(e.arena_name == arena.name for e in self.entries.values())
        for entry in touched:
            if entry.key in self.entries:
                self._settle(entry)
        if arena is not None and self.retired_arenas.get(arena.name) == 0:
            del self.retired_arenas[arena.name]
            self.outbox.append(UnlinkArena(arena.name))

    def drain(self):
        out, self.outbox = self.outbox, []
        return out

    # inspection

    def snapshot(self):
        """Deterministic, JSON-compatible view of all metadata."""

        def arena(a):
            return [a.name, a.base, a.capacity, a.owner_process]

        return {
            "next_id": self.next_id,
            "next_slot": self.next_slot,
            "clients": sorted([c, p] for c, p in self.client_pids.items()),
            "arenas": sorted([pid, *arena(a)] for pid, a in self.arenas.items()),
            "retired_arenas": sorted(self.retired_arenas.items()),
            "topics": {
                name: {
                    "publishers": sorted(t.publishers),
                    "subscribers": sorted(t.subscribers),
                    "baseline_publishers": sorted(t.baseline_publishers),
                    "baseline_subscribers": sorted(t.baseline_subscribers),
                }
                for name, t in sorted(self.topics.items())
            },
            "publishers": [
                [p.publisher_id, p.topic, p.client, p.pid, arena(p.arena), list(p.queue), p.next_entry_id]
                for _, p in sorted(self.publishers.items())
            ],
            "subscribers": [[s.subscriber_id, s.topic, s.client, s.pid] for _, s in sorted(self.subscribers.items())],
            "baseline": [[e.endpoint_id, e.topic, e.client, e.is_publisher] for _, e in sorted(self.baseline.items())],
            "entries": [
                [e.publisher_id, e.entry_id, e.message_address, e.arena_name, e.ref_count, e.unreceived_count,
                 sorted(e.pending), sorted(e.delivered_to), sorted(e.holder_refs.items())]
                for _, e in sorted(self.entries.items())
            ],
        }

    def dump(self):
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":")).encode()
