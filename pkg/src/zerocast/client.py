"""Client side: contexts, publishers, subscriptions and message handles.

A :class:`Context` holds one broker session. A reader thread owns the socket's
receive side; callbacks run one at a time on a dispatch thread.

Publishers build messages in place inside their process's arena
(:class:`LoanedMessage`) and hand over only the root address. Subscribers
receive a :class:`SharedMessage` that reads straight out of the publisher's
arena through a read-only mapping. The handle passed to a callback is
released when the callback returns; call ``clone()`` to keep the message.
"""

import logging
import os
import queue
import socket
import threading
import weakref

from zerocast import schema as schemas
from zerocast.arena import attach_read_only, create_arena, unlink_arena
from zerocast.broker.server import default_path
from zerocast.errors import (
    PROTOCOL_VIOLATION,
    ArenaError,
    BrokerUnreachable,
    ConsumedMessageError,
    NameCollision,
    ProtocolError,
    SessionClosed,
    ZerocastError,
    error_from_code,
)
from zerocast.schema import SEQ_DESCRIPTOR
from zerocast.wire import BROKER_TO_CLIENT, CLIENT_TO_BROKER, FrameDecoder, Op, Transport, decode, encode

log = logging.getLogger("zerocast.client")

REQUEST_TIMEOUT = 30.0
INITIAL_SEQ_CAPACITY = 4

# Arenas are per process, not per context: every context in a process shares
# its own arena and its read-only views. Values are [mapping, refcount].
_registry_lock = threading.Lock()
_own_arenas = {}
_views = {}


def _acquire_own(name, base, capacity):
    with _registry_lock:
        slot = _own_arenas.get(name)
        if slot is None:
            try:
                arena = create_arena(name, base, capacity)
            except NameCollision:
                # the name embeds our pid, so a leftover object is stale
                log.warning("replacing stale arena object name=%s", name)
                unlink_arena(name)
                arena = create_arena(name, base, capacity)
            slot = _own_arenas[name] = [arena, 0]
        slot[1] += 1
        return slot[0]


def _release_own(name):
    with _registry_lock:
        slot = _own_arenas.get(name)
        if slot is None:
            return
        slot[1] -= 1
        if slot[1] == 0:
            del _own_arenas[name]
            slot[0].close(unlink=True)


def _acquire_view(name, base, capacity):
    with _registry_lock:
        own = _own_arenas.get(name)
        if own is not None:
            return own[0]
        slot = _views.get(name)
        if slot is None:
            slot = _views[name] = [attach_read_only(name, base, capacity), 0]
        slot[1] += 1
        return slot[0]


def _release_view(name):
    with _registry_lock:
        slot = _views.get(name)
        if slot is None:
            return
        slot[1] -= 1
        if slot[1] == 0:
            del _views[name]
            slot[0].close()


class _Request:
    def __init__(self, op, on_reply):
        self.op = op
        self.on_reply = on_reply
        self.done = threading.Event()
        self.values = None
        self.error = None


class Context:
    """One broker session for this process."""

    def __init__(self, broker_path=None, *, on_broker_lost=None, name="zerocast"):
        self.path = broker_path or default_path()
        self.pid = os.getpid()
        self.on_broker_lost = on_broker_lost
        self.errors = 0
        self.closed = False
        self.broker_lost = threading.Event()
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._sock.connect(self.path)
        except OSError as exc:
            self._sock.close()
            raise BrokerUnreachable(f"cannot reach broker at {self.path}: {exc}") from None
        self._send_lock = threading.Lock()
        self._request_lock = threading.Lock()
        self._pending = None
        self._publishers = {}
        self._subscriptions = {}
        self._baseline_subs = {}
        self._known_arenas = {}
        self._own_names = []
        self._view_names = set()
        self._attach_lock = threading.Lock()
        self._tasks = queue.SimpleQueue()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader", daemon=True)
        self._dispatcher = threading.Thread(target=self._dispatch_loop, name=f"{name}-dispatch", daemon=True)
        self._reader.start()
        self._dispatcher.start()

    @property
    def dispatch_thread_id(self):
        """OS thread id of the thread that runs subscription callbacks."""
        return self._dispatcher.native_id

    # plumbing

    def _send(self, op, *values):
        data = encode(CLIENT_TO_BROKER, op, *values)
        with self._send_lock:
            if self.closed or self.broker_lost.is_set():
                raise SessionClosed("broker session is closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise SessionClosed(f"broker connection lost: {exc}") from None

    def _request(self, op, *values, on_reply=None):
        with self._request_lock:
            req = _Request(op, on_reply)
            self._pending = req
            try:
                self._send(op, *values)
                if not req.done.wait(REQUEST_TIMEOUT):
                    raise SessionClosed(f"no broker reply to {Op(op).name}")
            finally:
                self._pending = None
            if req.error is not None:
                raise req.error
            return req.values

    def _read_loop(self):
        decoder = FrameDecoder()
        try:
            while True:
                data = self._sock.recv(1 << 20)
                if not data:
                    break
                decoder.feed(data)
                for op, payload in decoder.frames():
                    self._on_frame(op, decode(BROKER_TO_CLIENT, op, payload))
        except (OSError, ProtocolError) as exc:
            if not self.closed:
                log.error("broker stream failed: %s", exc)
        self.broker_lost.set()
        req = self._pending
        if req is not None:
            req.error = SessionClosed("broker closed the session")
            req.done.set()
        self._tasks.put(None)
        if not self.closed:
            log.error("broker connection lost path=%s", self.path)
            if self.on_broker_lost is not None:
                self.on_broker_lost()

    def _on_frame(self, op, values):
        req = self._pending
        if op == Op.ERROR:
            code, answered, message = values
            if req is not None and answered == req.op:
                req.error = error_from_code(code, message)
                req.done.set()
            else:
                self.errors += 1
                level = logging.ERROR if code == PROTOCOL_VIOLATION else logging.WARNING
                log.log(level, "broker error code=%d op=%#x msg=%s", code, answered, message)
        elif op in (Op.REGISTER_PUBLISHER, Op.REGISTER_SUBSCRIBER, Op.PUBLISH_ENTRY):
            if req is None or req.op != op:
                raise ProtocolError(f"unsolicited {Op(op).name} reply")
            if req.on_reply is not None:
                try:
                    req.on_reply(values)
                except Exception as exc:
                    req.error = exc
            req.values = values
            req.done.set()
        elif op == Op.DELIVERY:
            sub = self._subscriptions.get(values[0])
            if sub is not None and values[1] in sub.ignore:
                # released here so it never waits behind callbacks
                sub.ignored += 1
                try:
                    self._send(Op.DECR_REF, *values[:3])
                except SessionClosed:
                    pass
            else:
                self._tasks.put((self._deliver, values))
        elif op == Op.RECLAIM_NOTICE:
            pub = self._publishers.get(values[0])
            if pub is not None:
                pub._reclaim(values[1])
        elif op == Op.ARENA_ANNOUNCE:
            _, _, name, base, capacity = values
            self._learn_arena(name, base, capacity)
        elif op == Op.BASELINE_DELIVERY:
            sub = self._baseline_subs.get(values[0])
            if sub is not None and values[1] in sub.ignore:
                sub.ignored += 1
            else:
                self._tasks.put((self._deliver_baseline, values))

    def _dispatch_loop(self):
        while True:
            task = self._tasks.get()
            if task is None:
                return
            fn, arg = task
            try:
                fn(arg)
            except SessionClosed:
                pass
            except Exception:
                self.errors += 1
                log.exception("callback failed")

    # arenas seen by this context

    def _learn_arena(self, name, base, capacity):
        self._known_arenas[name] = (base, capacity)
        self._view_for(name)

    def _view_for(self, name):
        """Mapping for arena ``name``, attaching read-only on first use; None if that fails."""
        with self._attach_lock:
            with _registry_lock:
                own = _own_arenas.get(name)
                if own is not None:
                    return own[0]
                if name in self._view_names:
                    return _views[name][0]
            if name not in self._known_arenas:
                return None
            base, capacity = self._known_arenas[name]
            try:
                view = _acquire_view(name, base, capacity)
            except (ArenaError, OSError, ValueError) as exc:
                log.warning("arena attach failed name=%s base=%#x: %s", name, base, exc)
                return None
            if name not in _own_arenas:
                self._view_names.add(name)
            return view

    # delivery

    def _deliver(self, values):
        sub_id, pub_id, entry_id, address, arena_name = values
        sub = self._subscriptions.get(sub_id)
        view = self._view_for(arena_name)
        if sub is None or view is None:
            self.errors += 1
            log.error("cannot map delivery sub=%d pub=%d entry=%d arena=%s; releasing it",
                      sub_id, pub_id, entry_id, arena_name)
            self._send(Op.DECR_REF, sub_id, pub_id, entry_id)
            return
        msg = SharedMessage(self, sub, pub_id, entry_id, address, view)
        try:
            sub.callback(msg)
        finally:
            msg.drop()

    def _deliver_baseline(self, values):
        sub_id, origin_id, payload = values
        sub = self._baseline_subs.get(sub_id)
        if sub is None:
            return
        value = schemas.deserialize(sub.schema, payload)
        sub.callback(BaselineMessage(sub.schema, value, origin_id))

    def _drop_later(self, sub_id, pub_id, entry_id):
        self._tasks.put((self._drop_now, (sub_id, pub_id, entry_id)))

    def _drop_now(self, key):
        if not self.closed and not self.broker_lost.is_set():
            self._send(Op.DECR_REF, *key)

    # endpoints

    def create_publisher(self, topic, schema):
        arena_holder = {}

        def on_reply(values):
            # runs on the reader thread, before any later frame is looked at
            pub_id, name, base, capacity, _ = values
            arena_holder["arena"] = _acquire_own(name, base, capacity)
            self._own_names.append(name)

        pub_id, name, base, capacity, n_subs = self._request(
            Op.REGISTER_PUBLISHER, Transport.ZERO_COPY, topic, self.pid, on_reply=on_reply)
        pub = Publisher(self, topic, schema, pub_id, arena_holder["arena"])
        self._publishers[pub_id] = pub
        log.info("publisher registered topic=%s id=%d arena=%s subscribers=%d", topic, pub_id, name, n_subs)
        return pub

    def create_subscription(self, topic, schema, callback, *, ignore=()):
        """Subscribe to zero-copy messages. Deliveries from publisher ids in
        ``ignore`` are released straight away without running ``callback``."""
        sub = Subscription(self, topic, schema, callback, ignore)

        def on_reply(values):
            sub.subscriber_id, arenas = values
            self._subscriptions[sub.subscriber_id] = sub
            for name, base, capacity, _ in arenas:
                self._learn_arena(name, base, capacity)

        self._request(Op.REGISTER_SUBSCRIBER, Transport.ZERO_COPY, topic, self.pid, on_reply=on_reply)
        log.info("subscription registered topic=%s id=%d", topic, sub.subscriber_id)
        return sub

    def create_baseline_publisher(self, topic, schema):
        origin_id = self._request(Op.REGISTER_PUBLISHER, Transport.BASELINE, topic, self.pid)[0]
        return BaselinePublisher(self, topic, schema, origin_id)

    def create_baseline_subscription(self, topic, schema, callback, *, ignore=()):
        sub = Subscription(self, topic, schema, callback, ignore)

        def on_reply(values):
            sub.subscriber_id = values[0]
            self._baseline_subs[sub.subscriber_id] = sub

        self._request(Op.REGISTER_SUBSCRIBER, Transport.BASELINE, topic, self.pid, on_reply=on_reply)
        return sub

    # teardown

    def close(self):
        if self.closed:
            return
        with self._send_lock:
            self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=5)
        if threading.current_thread() is not self._dispatcher:
            self._dispatcher.join(timeout=5)
        for name in self._own_names:
            _release_own(name)
        for name in self._view_names:
            _release_view(name)
        self._own_names = []
        self._view_names = set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Subscription:
    def __init__(self, ctx, topic, schema, callback, ignore=()):
        self.ctx = ctx
        self.topic = topic
        self.schema = schema
        self.callback = callback
        self.ignore = frozenset(ignore)
        self.ignored = 0
        self.subscriber_id = None


class Publisher:
    def __init__(self, ctx, topic, schema, publisher_id, arena):
        self.ctx = ctx
        self.topic = topic
        self.schema = schema
        self.publisher_id = publisher_id
        self.arena = arena
        self._outstanding = {}
        self.published = 0
        self.reclaimed = 0

    def allocate(self):
        """Exclusive, writable message in this process's arena, zero-initialised."""
        addr = self.arena.alloc(self.schema.root_size)
        self.arena.write(addr, bytes(self.schema.root_size))
        return LoanedMessage(self, addr)

    def publish(self, msg):
        """Hand ``msg`` to every subscriber. Consumes it; on error it stays ours."""
        if msg.publisher is not self:
            raise ValueError("message was allocated by a different publisher")
        msg._check()
        addr = msg.address

        def on_reply(values):
            self._outstanding[values[1]] = addr

        self.ctx._request(Op.PUBLISH_ENTRY, self.publisher_id, addr, on_reply=on_reply)
        msg._consume()
        self.published += 1

    def _reclaim(self, entry_id):
        addr = self._outstanding.pop(entry_id, None)
        if addr is None:
            log.warning("reclaim for unknown entry pub=%d entry=%d", self.publisher_id, entry_id)
            return
        _free_message(self.arena, self.schema, addr)
        self.reclaimed += 1

    @property
    def outstanding(self):
        return len(self._outstanding)


def _free_message(arena, schema, root):
    if arena.closed:
        return
    for name in schema.seq_names:
        data = SEQ_DESCRIPTOR.unpack(arena.read(root + schema.offsets[name], 24))[0]
        if data:
            arena.dealloc(data)
    arena.dealloc(root)


class _Fields:
    def _read_field(self, mapping, name):
        fmt = self.schema.formats[name]
        if name in self.schema.element_sizes:
            raise KeyError(f"{name!r} is a sequence; use seq({name!r})")
        out = fmt.unpack(mapping.read(self.address + self.schema.offsets[name], fmt.size))
        return out[0] if len(out) == 1 else out


class LoanedMessage(_Fields):
    """Writable message owned by exactly one publisher until it is published."""

    def __init__(self, publisher, address):
        self.publisher = publisher
        self.schema = publisher.schema
        self._address = address
        self._consumed = False
        self._finalizer = weakref.finalize(self, _free_message, publisher.arena, self.schema, address)

    def _check(self):
        if self._consumed:
            raise ConsumedMessageError("message was already published or discarded")
        if self.publisher.arena.closed:
            raise ConsumedMessageError("publisher context is closed")

    def _consume(self):
        self._consumed = True
        self._finalizer.detach()

    @property
    def address(self):
        self._check()
        return self._address

    def __setitem__(self, name, value):
        self._check()
        if name in self.schema.element_sizes:
            raise KeyError(f"{name!r} is a sequence; use seq({name!r})")
        fmt = self.schema.formats[name]
        self.publisher.arena.write(self._address + self.schema.offsets[name], fmt.pack(value))

    def __getitem__(self, name):
        self._check()
        return self._read_field(self.publisher.arena, name)

    def seq(self, name):
        self._check()
        return LoanedSeq(self, name)

    def root_bytes(self):
        self._check()
        return self.publisher.arena.read(self._address, self.schema.root_size)

    def discard(self):
        """Give the memory back without publishing."""
        self._check()
        self._consumed = True
        self._finalizer()


class LoanedSeq:
    """Growable sequence inside a LoanedMessage. Capacity doubles on growth."""

    def __init__(self, msg, name):
        self.msg = msg
        self.name = name
        self.element_size = msg.schema.element_sizes[name]
        self._desc = msg._address + msg.schema.offsets[name]
        self._arena = msg.publisher.arena

    def _get(self):
        return SEQ_DESCRIPTOR.unpack(self._arena.read(self._desc, 24))

    def _set(self, data, length, capacity):
        self._arena.write(self._desc, SEQ_DESCRIPTOR.pack(data, length, capacity))

    def __len__(self):
        self.msg._check()
        return self._get()[1]

    @property
    def capacity(self):
        return self._get()[2]

    @property
    def data_address(self):
        return self._get()[0]

    def reserve(self, n):
        """Ensure room for ``n`` elements, doubling capacity; data may move."""
        self.msg._check()
        data, length, cap = self._get()
        if n <= cap:
            return
        new_cap = max(cap, INITIAL_SEQ_CAPACITY)
        while new_cap < n:
            new_cap *= 2
        nbytes = new_cap * self.element_size
        if data:
            data = self._arena.realloc(data, nbytes)
        else:
            data = self._arena.alloc(nbytes)
        self._set(data, length, new_cap)

    def extend(self, raw):
        raw = memoryview(raw).cast("B")
        if len(raw) % self.element_size:
            raise ValueError(f"{len(raw)} bytes is not a whole number of {self.element_size}-byte elements")
        length = self._get()[1]
        n = len(raw) // self.element_size
        self.reserve(length + n)
        data, _, cap = self._get()
        self._arena.write(data + length * self.element_size, raw)
        self._set(data, length + n, cap)

    def push(self, element):
        self.extend(element)

    def resize(self, n):
        """Set the length to ``n``; new elements are zero bytes."""
        length = len(self)
        if n > length:
            self.extend(bytes((n - length) * self.element_size))
        else:
            data, _, cap = self._get()
            self._set(data, n, cap)

    def view(self):
        data, length, _ = self._get()
        if not data:
            return memoryview(b"")
        return self._arena.view(data, length * self.element_size)

    def __bytes__(self):
        return bytes(self.view())


class SharedMessage(_Fields):
    """Read-only handle on a published message; one broker reference per handle."""

    def __init__(self, ctx, subscription, publisher_id, entry_id, address, mapping):
        self.ctx = ctx
        self.subscription = subscription
        self.schema = subscription.schema
        self.publisher_id = publisher_id
        self.entry_id = entry_id
        self._address = address
        self._mapping = mapping
        self._released = False
        self._finalizer = weakref.finalize(
            self, ctx._drop_later, subscription.subscriber_id, publisher_id, entry_id)

    def _check(self):
        if self._released:
            raise ConsumedMessageError("message handle was released")
        if self.ctx.closed or self._mapping.closed:
            raise SessionClosed("context is closed")

    @property
    def address(self):
        return self._address

    def __getitem__(self, name):
        self._check()
        return self._read_field(self._mapping, name)

    def root_bytes(self):
        self._check()
        return self._mapping.read(self._address, self.schema.root_size)

    def seq(self, name):
        """Zero-copy read-only view of a sequence's elements."""
        self._check()
        data, length, _ = SEQ_DESCRIPTOR.unpack(self._mapping.read(self._address + self.schema.offsets[name], 24))
        if not data or not length:
            return memoryview(b"")
        return self._mapping.view(data, length * self.schema.element_sizes[name]).toreadonly()

    def clone(self):
        """Another handle on the same message, valid until dropped."""
        self._check()
        self.ctx._send(Op.INCR_REF, self.subscription.subscriber_id, self.publisher_id, self.entry_id)
        return SharedMessage(self.ctx, self.subscription, self.publisher_id, self.entry_id,
                             self._address, self._mapping)

    def drop(self):
        if self._released:
            return
        self._released = True
        self._finalizer.detach()
        if not self.ctx.closed and not self.ctx.broker_lost.is_set():
            try:
                self.ctx._send(Op.DECR_REF, self.subscription.subscriber_id, self.publisher_id, self.entry_id)
            except SessionClosed:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.drop()


class BaselinePublisher:
    def __init__(self, ctx, topic, schema, origin_id):
        self.ctx = ctx
        self.topic = topic
        self.schema = schema
        self.origin_id = origin_id

    def publish(self, value):
        self.publish_bytes(schemas.serialize(self.schema, value))

    def publish_bytes(self, payload):
        self.ctx._send(Op.BASELINE_PUBLISH, self.origin_id, payload)


class BaselineMessage:
    """A deserialized copy delivered through the baseline transport."""

    def __init__(self, schema, value, origin_id):
        self.schema = schema
        self.value = value
        self.origin_id = origin_id

    def __getitem__(self, name):
        return self.value[name]

    def seq(self, name):
        return self.value[name]


__all__ = [
    "BaselineMessage",
    "BaselinePublisher",
    "Context",
    "LoanedMessage",
    "Publisher",
    "SharedMessage",
    "Subscription",
    "ZerocastError",
]
