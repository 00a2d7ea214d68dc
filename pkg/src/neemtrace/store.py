"""Content-addressable, immutable object store.

Layout under the root directory::

    objects/<first 2 hex>/<remaining 62 hex>   canonical object bytes (read-only)
    index                                      canonical JSON cache of the objects
    lock                                       advisory single-writer lock

Objects are keyed by the SHA-256 of their canonical bytes. Every read
re-hashes; the index is a cache and can be rebuilt from ``objects/``.
"""

from __future__ import annotations

import contextlib
import datetime as _dt
import fcntl
import logging
import os
import tempfile
from pathlib import Path

from .errors import IntegrityViolation, MalformedObject, NotFound, StoreLocked
from .model import HASH_RE, canonical_bytes, content_hash, load_json

log = logging.getLogger(__name__)

HASH_ALGORITHM = "sha256"
KINDS = ("episode", "audit_trail", "plan")
ENV_VAR = "TRACE_STORE_DIR"


def parse_kind(data: bytes, kind: str):
    """Decode ``data`` as ``kind``; raise MalformedObject if it is not canonical."""
    from .model import canonical_encode, decode_episode
    from .simworld import decode_plan, encode_plan
    from .verify import decode_audit_trail, encode_audit_trail

    if kind == "episode":
        obj = decode_episode(data)
        again = canonical_encode(obj)
    elif kind == "plan":
        obj = decode_plan(data)
        again = encode_plan(obj)
    elif kind == "audit_trail":
        obj = decode_audit_trail(data)
        again = encode_audit_trail(obj)
    else:
        raise MalformedObject(f"unknown kind '{kind}'")
    if again != data:
        raise MalformedObject(f"{kind} bytes are not in canonical form")
    return obj


def sniff_kind(data: bytes) -> str:
    doc = load_json(data)
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind not in KINDS:
        raise MalformedObject("object carries no known kind")
    return kind


class Store:
    def __init__(self, root):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.index_path = self.root / "index"
        self.lock_path = self.root / "lock"
        self._lock_fd = None
        self._lock_depth = 0
        self.objects.mkdir(parents=True, exist_ok=True)
        self._index = None

    @classmethod
    def from_env(cls, default=".trace-store"):
        return cls(os.environ.get(ENV_VAR, default))

    # -- paths and index ---------------------------------------------------

    def path_for(self, h: str) -> Path:
        if not HASH_RE.match(h):
            raise NotFound(f"not a content hash: {h!r}")
        return self.objects / h[:2] / h[2:]

    @property
    def index(self) -> dict:
        if self._index is None:
            self._index = self._load_index()
        return self._index

    def _load_index(self) -> dict:
        try:
            doc = load_json(self.index_path.read_bytes())
            if isinstance(doc, dict) and isinstance(doc.get("entries"), dict):
                return doc["entries"]
            log.warning("index malformed, rebuilding")
        except FileNotFoundError:
            pass
        except MalformedObject:
            log.warning("index unreadable, rebuilding")
        return self._scan()

    def _scan(self) -> dict:
        entries = {}
        for sub in sorted(self.objects.iterdir()) if self.objects.exists() else ():
            if not sub.is_dir() or len(sub.name) != 2:
                continue
            for obj in sorted(sub.iterdir()):
                h = sub.name + obj.name
                if not HASH_RE.match(h):
                    continue
                data = obj.read_bytes()
                try:
                    kind = sniff_kind(data)
                except MalformedObject:
                    kind = "unknown"
                entries[h] = {"kind": kind, "length": len(data), "path": str(obj.relative_to(self.root))}
        return entries

    def rebuild_index(self) -> None:
        with self.writer():
            self._index = self._scan()
            self._write_index()

    def _write_index(self) -> None:
        data = canonical_bytes({"algorithm": HASH_ALGORITHM, "entries": self._index})
        _atomic_write(self.index_path, data)

    # -- locking -----------------------------------------------------------

    @contextlib.contextmanager
    def writer(self):
        """Hold the advisory write lock; a second writer gets StoreLocked."""
        if self._lock_depth == 0:
            fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT, 0o644)
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                os.close(fd)
                raise StoreLocked(f"store {self.root} is locked by another writer") from None
            self._lock_fd = fd
            self._index = self._load_index()
        self._lock_depth += 1
        try:
            yield self
        finally:
            self._lock_depth -= 1
            if self._lock_depth == 0:
                fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
                os.close(self._lock_fd)
                self._lock_fd = None

    # -- operations ----------------------------------------------------------

    def put(self, data: bytes, kind: str, *, created: str | None = None) -> str:
        """Store ``data`` under its hash. Idempotent."""
        parse_kind(data, kind)
        h = content_hash(data)
        with self.writer():
            path = self.path_for(h)
            if h in self._index and path.exists():
                return h
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(path, data, mode=0o444)
            entry = {"kind": kind, "length": len(data), "path": str(path.relative_to(self.root))}
            entry["created"] = created or _now()
            self._index[h] = entry
            self._write_index()
        return h

    def get(self, h: str) -> bytes:
        path = self.path_for(h)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"object {h} not found") from None
        if content_hash(data) != h:
            raise IntegrityViolation(f"object {h} does not hash to its key")
        return data

    def kind_of(self, h: str) -> str:
        entry = self.index.get(h)
        if entry is None:
            return sniff_kind(self.get(h))
        return entry["kind"]

    def verify_all(self) -> list[tuple[str, str]]:
        self._index = None
        known = set(self.index) | set(self._scan())
        out = []
        for h in sorted(known):
            try:
                self.get(h)
                out.append((h, "ok"))
            except NotFound:
                out.append((h, "missing"))
            except IntegrityViolation:
                out.append((h, "corrupt"))
        return out

    def list(self, kind: str | None = None) -> list[str]:
        return sorted(h for h, e in self.index.items() if kind is None or e["kind"] == kind)

    def __contains__(self, h: str) -> bool:
        return HASH_RE.match(h) is not None and self.path_for(h).exists()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, data: bytes, mode: int = 0o644) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
