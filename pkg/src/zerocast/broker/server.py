"""Single-threaded broker daemon on a Unix-domain stream socket.

One selector loop owns every session and the ``BrokerState``. A request is
applied only once its frame is complete. A reply goes out before every
notification the request caused except deliveries to other sessions, so a
publisher always learns its entry id before that entry's reclaim notice.
"""

import logging
import os
import selectors
import socket
import threading

from zerocast.arena import unlink_arena
from zerocast.broker.state import (
    Announce,
    BaselineDelivery,
    BrokerState,
    Delivery,
    Reclaim,
    UnlinkArena,
)
from zerocast.errors import (
    PROTOCOL_VIOLATION,
    BrokerError,
    NotHolder,
    ProtocolError,
    UnknownEntry,
)
from zerocast.wire import BROKER_TO_CLIENT, CLIENT_TO_BROKER, FrameDecoder, Op, Transport, decode, encode

log = logging.getLogger("zerocast.broker")

DEFAULT_PATH = "/tmp/zerocast.sock"
# a session whose unsent backlog grows past this is treated as dead
MAX_BACKLOG = 256 << 20


def default_path():
    return os.environ.get("ZEROCAST_BROKER", DEFAULT_PATH)


class _Violation(Exception):
    def __init__(self, op, message):
        super().__init__(message)
        self.op = op


class Session:
    def __init__(self, sid, sock):
        self.sid = sid
        self.sock = sock
        self.decoder = FrameDecoder()
        self.out = bytearray()
        self.closing = False


class BrokerServer:
    def __init__(self, path=None, config=None):
        self.path = path or default_path()
        self.state = BrokerState(config)
        self.sessions = {}
        self._next_sid = 1
        self._sel = selectors.DefaultSelector()
        self._listener = None
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._calls = []
        self._calls_lock = threading.Lock()
        self._stop = False
        self._thread = None

    # lifecycle

    def bind(self):
        if os.path.exists(self.path):
            probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                probe.connect(self.path)
            except OSError:
                os.unlink(self.path)  # stale socket from a dead broker
            else:
                raise OSError(f"a broker is already listening on {self.path}")
            finally:
                probe.close()
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(self.path)
        sock.listen(128)
        sock.setblocking(False)
        self._listener = sock
        self._sel.register(sock, selectors.EVENT_READ, "accept")
        self._sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        log.info("listening path=%s", self.path)

    def serve_forever(self):
        if self._listener is None:
            self.bind()
        try:
            while not self._stop:
                for key, mask in self._sel.select():
                    tag = key.data
                    if tag == "accept":
                        self._accept()
                    elif tag == "wake":
                        self._run_calls()
                    else:
                        self._service(tag, mask)
        finally:
            self._teardown()

    def start_in_thread(self):
        self.bind()
        self._thread = threading.Thread(target=self.serve_forever, name="zerocast-broker", daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self._stop = True
        self._wake()
        if self._thread is not None:
            self._thread.join(timeout=10)

    def call(self, fn, timeout=10):
        """Run ``fn(server)`` on the loop thread and return its result."""
        done = threading.Event()
        box = {}

        def run():
            try:
                box["value"] = fn(self)
            except BaseException as exc:
                box["error"] = exc
            done.set()

        with self._calls_lock:
            self._calls.append(run)
        self._wake()
        if not done.wait(timeout):
            raise TimeoutError("broker loop did not answer")
        if "error" in box:
            raise box["error"]
        return box["value"]

    def snapshot(self):
        """Deterministic dump of the broker metadata, taken between frames."""
        return self.call(lambda s: s.state.dump())

    def session_count(self):
        return self.call(lambda s: len(s.sessions))

    def _wake(self):
        try:
            self._wake_w.send(b"\0")
        except OSError:
            pass

    def _run_calls(self):
        try:
            while self._wake_r.recv(4096):
                pass
        except BlockingIOError:
            pass
        with self._calls_lock:
            calls, self._calls = self._calls, []
        for run in calls:
            run()

    def _teardown(self):
        for sess in list(self.sessions.values()):
            self._drop_session(sess, "shutdown")
        if self._listener is not None:
            self._sel.unregister(self._listener)
            self._listener.close()
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass
        self._sel.close()
        self._wake_r.close()
        self._wake_w.close()
        log.info("stopped")

    # sessions

    def _accept(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except BlockingIOError:
                return
            sock.setblocking(False)
            sess = Session(self._next_sid, sock)
            self._next_sid += 1
            self.sessions[sess.sid] = sess
            self._sel.register(sock, selectors.EVENT_READ, sess)
            log.debug("session open sid=%d", sess.sid)

    def _service(self, sess, mask):
        if mask & selectors.EVENT_WRITE:
            self._flush(sess)
        if mask & selectors.EVENT_READ and sess.sid in self.sessions:
            try:
                data = sess.sock.recv(1 << 20)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                data = b""
            if not data:
                self._drop_session(sess, "disconnected")
                return
            sess.decoder.feed(data)
            try:
                for op, payload in sess.decoder.frames():
                    self._handle(sess, op, payload)
                    if sess.sid not in self.sessions:
                        return
            except ProtocolError as exc:
                self._violation(sess, 0, str(exc))

    def _drop_session(self, sess, reason):
        if self.sessions.pop(sess.sid, None) is None:
            return
        try:
            self._sel.unregister(sess.sock)
        except (KeyError, ValueError):
            pass
        sess.sock.close()
        self.state.process_exit(sess.sid)
        log.info("session closed sid=%d reason=%s", sess.sid, reason)
        self._dispatch_events()

    def _violation(self, sess, op, message):
        log.warning("protocol violation sid=%d op=%#x msg=%s", sess.sid, op, message)
        sess.out += encode(BROKER_TO_CLIENT, Op.ERROR, PROTOCOL_VIOLATION, op, message[:1000])
        try:
            sess.sock.setblocking(True)
            sess.sock.settimeout(0.5)
            sess.sock.sendall(sess.out)
        except OSError:
            pass
        self._drop_session(sess, "protocol violation")

    # output

    def _send(self, sess, data):
        if sess.sid not in self.sessions:
            return
        sess.out += data
        self._flush(sess)

    def _flush(self, sess):
        if sess.out:
            try:
                n = sess.sock.send(sess.out)
                del sess.out[:n]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self._drop_session(sess, "send failed")
                return
        if len(sess.out) > MAX_BACKLOG:
            self._drop_session(sess, "backlog limit")
            return
        want = selectors.EVENT_READ | (selectors.EVENT_WRITE if sess.out else 0)
        if self._sel.get_key(sess.sock).events != want:
            self._sel.modify(sess.sock, want, sess)

    def _dispatch_events(self, events=None):
        for ev in self.state.drain() if events is None else events:
            if isinstance(ev, UnlinkArena):
                unlink_arena(ev.name)
                log.info("arena unlinked name=%s", ev.name)
                continue
            sess = self.sessions.get(ev.client)
            if sess is None:
                continue
            if isinstance(ev, Delivery):
                data = encode(BROKER_TO_CLIENT, Op.DELIVERY, ev.subscriber_id, ev.publisher_id,
                              ev.entry_id, ev.address, ev.arena_name)
            elif isinstance(ev, Reclaim):
                data = encode(BROKER_TO_CLIENT, Op.RECLAIM_NOTICE, ev.publisher_id, ev.entry_id)
            elif isinstance(ev, Announce):
                a = ev.arena
                data = encode(BROKER_TO_CLIENT, Op.ARENA_ANNOUNCE, ev.subscriber_id, ev.publisher_id,
                              a.name, a.base, a.capacity)
            elif isinstance(ev, BaselineDelivery):
                data = encode(BROKER_TO_CLIENT, Op.BASELINE_DELIVERY, ev.subscriber_id, ev.origin_id, ev.payload)
            else:
                raise TypeError(ev)
            self._send(sess, data)

    # requests

    def _handle(self, sess, op, payload):
        try:
            args = decode(CLIENT_TO_BROKER, op, payload)
        except ProtocolError as exc:
            self._violation(sess, op, str(exc))
            return
        st = self.state
        sid = sess.sid
        reply = None
        try:
            if op in (Op.REGISTER_PUBLISHER, Op.REGISTER_SUBSCRIBER):
                transport, topic, pid = args
                if transport not in (Transport.ZERO_COPY, Transport.BASELINE):
                    raise _Violation(op, f"unknown transport {transport}")
                if not topic:
                    raise _Violation(op, "empty topic name")
                if transport == Transport.BASELINE:
                    ep = st.register_baseline(sid, pid, topic, op == Op.REGISTER_PUBLISHER)
                    # baseline endpoints carry no arena
                    if op == Op.REGISTER_PUBLISHER:
                        reply = encode(BROKER_TO_CLIENT, op, ep, "", 0, 0, 0)
                    else:
                        reply = encode(BROKER_TO_CLIENT, op, ep, [])
                elif op == Op.REGISTER_PUBLISHER:
                    pub_id, arena, n = st.register_publisher(sid, pid, topic)
                    reply = encode(BROKER_TO_CLIENT, op, pub_id, arena.name, arena.base, arena.capacity, n)
                else:
                    sub_id, arenas = st.register_subscriber(sid, pid, topic)
                    reply = encode(BROKER_TO_CLIENT, op, sub_id,
                                   [(a.name, a.base, a.capacity, p) for p, a in arenas])
                log.info("registered sid=%d op=%s topic=%s transport=%d", sid, Op(op).name, topic, transport)
            elif op == Op.PUBLISH_ENTRY:
                pub_id, address = args
                if pub_id not in st.publishers or st.publishers[pub_id].client != sid:
                    raise _Violation(op, f"publisher {pub_id} does not belong to this session")
                entry_id = st.publish_entry(sid, pub_id, address)
                reply = encode(BROKER_TO_CLIENT, op, pub_id, entry_id)
            elif op == Op.INCR_REF:
                st.incr_ref(sid, *args)
            elif op == Op.DECR_REF:
                st.decr_ref(sid, *args)
            elif op == Op.BASELINE_PUBLISH:
                origin, blob = args
                ep = st.baseline.get(origin)
                if ep is None or ep.client != sid or not ep.is_publisher:
                    raise _Violation(op, f"baseline endpoint {origin} does not belong to this session")
                st.baseline_publish(sid, origin, blob)
        except _Violation as exc:
            self._violation(sess, exc.op, str(exc))
            return
        except (UnknownEntry, NotHolder) as exc:
            self._violation(sess, op, str(exc))
            return
        except BrokerError as exc:
            log.info("request refused sid=%d op=%#x code=%d msg=%s", sid, op, exc.code, exc)
            reply = encode(BROKER_TO_CLIENT, Op.ERROR, exc.code, op, str(exc)[:1000])
        if reply is not None:
            # deliveries first: they do not depend on the reply, and a reclaim
            # raised by this same request must still follow it
            events = self.state.drain()
            self._dispatch_events([e for e in events if isinstance(e, Delivery)])
            self._send(sess, reply)
            self._dispatch_events([e for e in events if not isinstance(e, Delivery)])
        else:
            self._dispatch_events()
