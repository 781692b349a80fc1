"""Key-value parameter store shared by all function invocations.

Two interchangeable backends: :class:`MemoryStore` and :class:`FileStore`.
The file backend lays blobs out as ``<root>/<namespace>/<round>/<id>.blob``
with a ``<id>.blob.sha256`` sidecar holding the hex digest.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

NAMESPACES = ("weights", "logits", "client_config", "consensus", "history")


class StoreError(Exception):
    pass


class NotFound(StoreError, KeyError):
    pass


class IntegrityError(StoreError):
    pass


@dataclass(frozen=True, order=True)
class StoreKey:
    namespace: str
    owner: str
    round: int = 0

    def __post_init__(self):
        if self.namespace not in NAMESPACES:
            raise ValueError(f"unknown namespace {self.namespace!r}")
        if not self.owner or "/" in self.owner or self.owner.startswith("."):
            raise ValueError(f"invalid key owner {self.owner!r}")
        if self.round < 0:
            raise ValueError("round must be nonnegative")

    def __str__(self) -> str:
        return f"{self.namespace}/{self.round}/{self.owner}"


@dataclass(frozen=True)
class Blob:
    data: bytes
    sha256: str = ""
    created_at: float = field(default_factory=time.time, compare=False)

    def __post_init__(self):
        digest = hashlib.sha256(self.data).hexdigest()
        if not self.sha256:
            object.__setattr__(self, "sha256", digest)
        elif self.sha256 != digest:
            raise IntegrityError("blob hash does not match its bytes")


class ParameterStore:
    """Interface shared by both backends."""

    def put(self, key: StoreKey, blob: Blob | bytes) -> None:
        raise NotImplementedError

    def get(self, key: StoreKey) -> Blob:
        raise NotImplementedError

    def list_keys(self, namespace: str, round: int) -> list[StoreKey]:
        raise NotImplementedError

    def exists(self, key: StoreKey) -> bool:
        try:
            self.get(key)
        except NotFound:
            return False
        return True

    def put_bytes(self, key: StoreKey, data: bytes) -> Blob:
        blob = Blob(data)
        self.put(key, blob)
        return blob

    def get_bytes(self, key: StoreKey) -> bytes:
        return self.get(key).data


class MemoryStore(ParameterStore):
    def __init__(self):
        self._data: dict[StoreKey, Blob] = {}
        self._lock = threading.Lock()

    def put(self, key, blob):
        if not isinstance(blob, Blob):
            blob = Blob(bytes(blob))
        with self._lock:
            self._data[key] = blob

    def get(self, key):
        with self._lock:
            try:
                return self._data[key]
            except KeyError:
                raise NotFound(str(key)) from None

    def list_keys(self, namespace, round):
        with self._lock:
            keys = [k for k in self._data if k.namespace == namespace and k.round == round]
        return sorted(keys)


class FileStore(ParameterStore):
    """Directory-backed store. Writes go to a temp file and are renamed into place."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks = [threading.Lock() for _ in range(64)]

    def _lock(self, key: StoreKey) -> threading.Lock:
        return self._locks[hash(key) % len(self._locks)]

    def _path(self, key: StoreKey) -> Path:
        return self.root / key.namespace / str(key.round) / f"{key.owner}.blob"

    def put(self, key, blob):
        if not isinstance(blob, Blob):
            blob = Blob(bytes(blob))
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tag = f".tmp-{os.getpid()}-{threading.get_ident()}"
            with self._lock(key):
                for target, payload in ((path, blob.data), (Path(f"{path}.sha256"), blob.sha256.encode())):
                    tmp = target.with_name(target.name + tag)
                    with open(tmp, "wb") as fh:
                        fh.write(payload)
                    os.replace(tmp, target)
        except OSError as exc:
            raise StoreError(f"cannot write {key}: {exc}") from exc

    def get(self, key):
        path = self._path(key)
        with self._lock(key):
            try:
                data = path.read_bytes()
                digest = Path(f"{path}.sha256").read_text().strip()
                created = path.stat().st_mtime
            except FileNotFoundError:
                raise NotFound(str(key)) from None
            except OSError as exc:
                raise StoreError(f"cannot read {key}: {exc}") from exc
        return Blob(data, digest, created)

    def list_keys(self, namespace, round):
        directory = self.root / namespace / str(round)
        if not directory.is_dir():
            return []
        keys = [
            StoreKey(namespace, p.name[: -len(".blob")], round)
            for p in directory.iterdir()
            if p.name.endswith(".blob")
        ]
        return sorted(keys)
