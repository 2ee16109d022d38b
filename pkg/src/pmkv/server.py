"""Line-oriented TCP front end over a single store.

One reader thread per connection parses frames and feeds a shared queue; a
single executor thread applies commands to the store and writes replies, so
the engine only ever sees serial access and per-connection reply order is
preserved by construction.  Parse failures become error replies routed
through the same queue, keeping the connection usable.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Optional

from . import protocol
from .errors import PmkvError, ProtocolError
from .store import Store

DEFAULT_PORT = 7379


class _Connection:
    _ids = iter(range(1 << 62))

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wlock = threading.Lock()
        self.alive = True
        self.id = next(self._ids)

    def send(self, payload: bytes) -> None:
        if not self.alive:
            return
        try:
            with self.wlock:
                self.sock.sendall(payload)
        except OSError:
            self.alive = False

    def close(self) -> None:
        self.alive = False
        try:
            self.rfile.close()
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Server:
    """Accepts many clients, executes their commands strictly serially."""

    def __init__(self, store: Store, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.store = store
        self.listener = socket.create_server((host, port), reuse_port=False)
        self.address = self.listener.getsockname()
        self._queue: "queue.Queue" = queue.Queue()
        self._conns: set[_Connection] = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self.commands_served = 0

    # -- lifecycle -----------------------------------------------------

    def start(self) -> None:
        for target, name in (
            (self._accept_loop, "pmkv-accept"),
            (self._execute_loop, "pmkv-exec"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def wait(self) -> None:
        """Block until SHUTDOWN drains the queue and stops the server."""
        self._stopping.wait()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5)

    def serve_forever(self) -> None:
        self.start()
        self.wait()

    def stop(self) -> None:
        if self._stopping.is_set():
            return
        self._stopping.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        self._queue.put(None)  # unblock the executor

    # -- reader side -----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _addr = self.listener.accept()
            except OSError:
                return  # listener closed
            conn = _Connection(sock)
            with self._conns_lock:
                self._conns.add(conn)
            t = threading.Thread(
                target=self._read_loop, args=(conn,), name=f"pmkv-read-{conn.id}", daemon=True
            )
            t.start()
            self._threads.append(t)

    def _read_loop(self, conn: _Connection) -> None:
        try:
            while conn.alive and not self._stopping.is_set():
                try:
                    cmd = protocol.read_command(conn.rfile)
                except ProtocolError as exc:
                    self._queue.put((conn, exc))
                    continue
                except OSError:
                    break
                if cmd is None:
                    break
                self._queue.put((conn, cmd))
                if cmd.verb == "SHUTDOWN":
                    return  # no further frames from this client
        finally:
            with self._conns_lock:
                self._conns.discard(conn)

    # -- executor side ------------------------------------------------------

    def _execute_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            conn, cmd = item
            if isinstance(cmd, ProtocolError):
                conn.send(protocol.error(str(cmd)))
                continue
            if cmd.verb == "SHUTDOWN":
                conn.send(protocol.OK)
                self.stop()
                return
            conn.send(self._apply(cmd))
            self.commands_served += 1
            self.store.snapshot_tick()

    def _apply(self, cmd: protocol.Command) -> bytes:
        try:
            if cmd.verb == "PING":
                return protocol.PONG
            if cmd.verb == "GET":
                value = self.store.get(cmd.key)
                return protocol.NIL if value is None else protocol.bulk(value)
            if cmd.verb == "SET":
                self.store.set(cmd.key, cmd.value)
                return protocol.OK
            if cmd.verb == "DEL":
                return protocol.integer(int(self.store.delete(cmd.key)))
            return protocol.error(f"unhandled verb {cmd.verb}")
        except PmkvError as exc:
            return protocol.error(f"{type(exc).__name__}: {exc}")


def serve(store: Store, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> None:
    """Run until a client issues SHUTDOWN."""
    server = Server(store, host, port)
    server.serve_forever()


class Client:
    """Minimal blocking client used by tests and the benchmark driver."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self.rfile = self.sock.makefile("rb")

    def _round_trip(self, cmd: protocol.Command) -> protocol.Reply:
        self.sock.sendall(protocol.encode_command(cmd))
        return protocol.read_reply(self.rfile)

    def ping(self) -> str:
        return self._round_trip(protocol.Command("PING"))

    def set(self, key: bytes, value: bytes) -> str:
        return self._round_trip(protocol.Command("SET", key, value))

    def get(self, key: bytes) -> Optional[bytes]:
        return self._round_trip(protocol.Command("GET", key))

    def delete(self, key: bytes) -> int:
        return self._round_trip(protocol.Command("DEL", key))

    def shutdown(self) -> str:
        return self._round_trip(protocol.Command("SHUTDOWN"))

    def raw(self, payload: bytes) -> bytes:
        """Send arbitrary bytes, read one reply frame verbatim."""
        self.sock.sendall(payload)
        line = self.rfile.readline()
        if line.startswith(b"$") and not line.startswith(b"$-1"):
            n = int(line[1:-2])
            return line + self.rfile.read(n + 2)
        return line

    def close(self) -> None:
        try:
            self.rfile.close()
        finally:
            self.sock.close()
