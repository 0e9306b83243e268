"""
kvstore.py — Key-value cache backends: a RESP2 (Redis wire protocol) client and an
in-process store with the same interface.

Only SET (optionally with EX), GET and DEL are spoken. Values are opaque bytes.
Every network call is bounded by the configured timeout.

Cache URLs:
    redis://host:port   →  RespClient
    memory://           →  MemoryKV
The CITYFLOW_CACHE_URL environment variable overrides any configured URL.
"""
import logging
import math
import os
import socket
import threading
import time
from abc import ABC, abstractmethod
from typing import BinaryIO, Callable
from urllib.parse import urlparse

from config import CACHE_URL_ENV, KV_TIMEOUT_SECONDS

logger = logging.getLogger(__name__)

DEFAULT_REDIS_PORT = 6379


class KVError(RuntimeError):
    """Base class for cache failures."""


class KVConnectionError(KVError):
    pass


class KVTimeoutError(KVError):
    pass


class KVProtocolError(KVError):
    pass


# ── Backends ───────────────────────────────────────────────────────────────────

class KVBackend(ABC):
    @abstractmethod
    def set(self, key: str, value: bytes, ttl_seconds: float | None = None) -> None:
        ...

    @abstractmethod
    def get(self, key: str) -> bytes | None:
        ...

    @abstractmethod
    def delete(self, key: str) -> int:
        ...

    def close(self) -> None:
        pass


class MemoryKV(KVBackend):
    """Thread-safe dict store; expiry is checked lazily on read."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self._clock = clock
        self._data: dict[str, tuple[bytes, float | None]] = {}
        self._lock = threading.Lock()

    def set(self, key: str, value: bytes, ttl_seconds: float | None = None) -> None:
        expires = None if ttl_seconds is None else self._clock() + _ttl_seconds(ttl_seconds)
        with self._lock:
            self._data[key] = (bytes(value), expires)

    def get(self, key: str) -> bytes | None:
        with self._lock:
            item = self._data.get(key)
            if item is None:
                return None
            value, expires = item
            if expires is not None and self._clock() >= expires:
                del self._data[key]
                return None
            return value

    def delete(self, key: str) -> int:
        with self._lock:
            return 1 if self._data.pop(key, None) is not None else 0

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._data)


class RespClient(KVBackend):
    """Minimal blocking RESP2 client over one TCP connection."""

    def __init__(self, host: str = "localhost", port: int = DEFAULT_REDIS_PORT,
                 timeout: float = KV_TIMEOUT_SECONDS):
        self.host, self.port, self.timeout = host, port, timeout
        self._sock: socket.socket | None = None
        self._reader: BinaryIO | None = None

    def connect(self) -> None:
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout as exc:
            raise KVTimeoutError(f"connect to {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise KVConnectionError(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        self._sock.settimeout(self.timeout)
        self._reader = self._sock.makefile("rb")
        logger.debug("Connected to cache at %s:%d", self.host, self.port)

    def close(self) -> None:
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock, self._reader = None, None

    def execute(self, *args: str | bytes) -> object:
        self.connect()
        try:
            self._sock.sendall(encode_command(*args))
            reply = decode_reply(self._reader)
        except socket.timeout as exc:
            self.close()
            raise KVTimeoutError(f"{args[0]!r} timed out after {self.timeout}s") from exc
        except KVProtocolError:
            raise
        except OSError as exc:
            self.close()
            raise KVConnectionError(f"connection to {self.host}:{self.port} failed: {exc}") from exc
        if isinstance(reply, ServerError):
            raise KVProtocolError(f"server error: {reply}")
        return reply

    def set(self, key: str, value: bytes, ttl_seconds: float | None = None) -> None:
        args: list[str | bytes] = ["SET", key, value]
        if ttl_seconds is not None:
            args += ["EX", str(_ttl_seconds(ttl_seconds))]
        reply = self.execute(*args)
        if reply != "OK":
            raise KVProtocolError(f"unexpected SET reply {reply!r}")

    def get(self, key: str) -> bytes | None:
        reply = self.execute("GET", key)
        if reply is not None and not isinstance(reply, bytes):
            raise KVProtocolError(f"unexpected GET reply {reply!r}")
        return reply

    def delete(self, key: str) -> int:
        reply = self.execute("DEL", key)
        if not isinstance(reply, int):
            raise KVProtocolError(f"unexpected DEL reply {reply!r}")
        return reply


# ── Wire format ────────────────────────────────────────────────────────────────

class ServerError(str):
    """An ``-ERR ...`` reply."""


def encode_command(*args: str | bytes) -> bytes:
    """RESP array of bulk strings."""
    parts = [b"*%d\r\n" % len(args)]
    for arg in args:
        raw = arg.encode("utf-8") if isinstance(arg, str) else bytes(arg)
        parts.append(b"$%d\r\n%s\r\n" % (len(raw), raw))
    return b"".join(parts)


def decode_reply(stream: BinaryIO) -> object:
    """
    Read one RESP2 reply: simple string → str, error → ServerError,
    integer → int, bulk string → bytes (None for nil), array → list.
    """
    line = stream.readline()
    if not line:
        raise KVConnectionError("connection closed by server")
    if not line.endswith(b"\r\n"):
        raise KVProtocolError(f"unterminated reply line {line!r}")
    kind, body = line[:1], line[1:-2]
    try:
        if kind == b"+":
            return body.decode("utf-8")
        if kind == b"-":
            return ServerError(body.decode("utf-8"))
        if kind == b":":
            return int(body)
        if kind == b"$":
            n = int(body)
            if n < 0:
                return None
            data = stream.read(n + 2)
            if len(data) != n + 2 or data[-2:] != b"\r\n":
                raise KVProtocolError("truncated bulk string")
            return data[:-2]
        if kind == b"*":
            n = int(body)
            return None if n < 0 else [decode_reply(stream) for _ in range(n)]
    except ValueError as exc:
        raise KVProtocolError(f"malformed reply {line!r}") from exc
    raise KVProtocolError(f"unknown reply type {kind!r}")


# ── Factory and helpers ────────────────────────────────────────────────────────

def resolve_cache_url(configured: str | None = None) -> str:
    return os.environ.get(CACHE_URL_ENV) or configured or "memory://"


def connect(url: str | None = None, timeout: float = KV_TIMEOUT_SECONDS) -> KVBackend:
    url = resolve_cache_url(url)
    parsed = urlparse(url)
    if parsed.scheme == "memory":
        return MemoryKV()
    if parsed.scheme in ("redis", "tcp", ""):
        host = parsed.hostname or "localhost"
        return RespClient(host, parsed.port or DEFAULT_REDIS_PORT, timeout)
    raise ValueError(f"unsupported cache URL {url!r}")


def kv_set(backend: KVBackend, key: str, value: bytes, ttl_seconds: float | None = None) -> None:
    backend.set(key, value, ttl_seconds)


def kv_get(backend: KVBackend, key: str) -> bytes | None:
    return backend.get(key)


def kv_del(backend: KVBackend, key: str) -> int:
    return backend.delete(key)


def _ttl_seconds(ttl: float) -> int:
    """EX takes whole seconds, at least 1."""
    return max(1, int(math.ceil(ttl)))
