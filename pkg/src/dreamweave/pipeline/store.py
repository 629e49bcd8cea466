"""Write-once file store keyed by namespace and content digest.

Layout: ``<root>/<task>/<scene>/<trajectory>/<stack>/<digest>/<file>``. Each
file is written to a temporary name and renamed into place, so readers never
see a partial file. Writing a file that already exists is a no-op when the
bytes match and a ``StoreConflictError`` otherwise.
"""

from __future__ import annotations

import hashlib
import io
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from PIL import Image

STORE_ENV = "DREAMWEAVE_STORE"
_SEGMENT = re.compile(r"^[A-Za-z0-9._-]+$")


class StoreConflictError(RuntimeError):
    pass


@dataclass(frozen=True)
class StoreKey:
    task: str
    scene: str
    trajectory: str
    stack: str
    digest: str

    def __post_init__(self):
        for name in ("task", "scene", "trajectory", "stack", "digest"):
            value = getattr(self, name)
            if not _SEGMENT.match(value) or value in (".", ".."):
                raise ValueError(f"invalid {name} segment {value!r}")

    @property
    def parts(self) -> tuple[str, ...]:
        return (self.task, self.scene, self.trajectory, self.stack, self.digest)

    def to_dict(self) -> dict:
        return dict(zip(("task", "scene", "trajectory", "stack", "digest"), self.parts))

    @classmethod
    def from_dict(cls, d: Mapping) -> "StoreKey":
        return cls(d["task"], d["scene"], d["trajectory"], d["stack"], d["digest"])


class DataStore:
    """``downsize`` = (width, height) shrinks PNG files whose names start with one of ``downsize_prefixes``."""

    def __init__(self, root: str | os.PathLike | None = None, downsize: tuple[int, int] | None = None,
                 downsize_prefixes: tuple[str, ...] = ("keyframe", "frame_")):
        root = root if root is not None else os.environ.get(STORE_ENV)
        if root is None:
            raise ValueError(f"no store root given and {STORE_ENV} is unset")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.downsize = downsize
        self.downsize_prefixes = downsize_prefixes

    def path(self, key: StoreKey) -> Path:
        return self.root.joinpath(*key.parts)

    def _shrink(self, name: str, data: bytes) -> bytes:
        if self.downsize is None or not name.endswith(".png") or not name.startswith(self.downsize_prefixes):
            return data
        img = Image.open(io.BytesIO(data))
        buf = io.BytesIO()
        img.resize(self.downsize, Image.BILINEAR).save(buf, format="PNG")
        return buf.getvalue()

    def put(self, key: StoreKey, files: Mapping[str, bytes]) -> Path:
        directory = self.path(key)
        directory.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            if not _SEGMENT.match(name):
                raise ValueError(f"invalid file name {name!r}")
            self._write_once(directory / name, self._shrink(name, data))
        return directory

    def _write_once(self, target: Path, data: bytes) -> None:
        if target.exists():
            if target.read_bytes() != data:
                raise StoreConflictError(f"{target} already holds different content")
            return
        tmp = target.with_name(f".{target.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(data)
        try:
            # link fails if another writer got there first, unlike rename which would overwrite
            os.link(tmp, target)
        except FileExistsError:
            if target.read_bytes() != data:
                raise StoreConflictError(f"{target} already holds different content") from None
        finally:
            tmp.unlink()

    def get(self, key: StoreKey, name: str | None = None):
        directory = self.path(key)
        if name is not None:
            return (directory / name).read_bytes()
        return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if not p.name.startswith(".")}

    def exists(self, key: StoreKey, name: str | None = None) -> bool:
        p = self.path(key)
        return (p / name).exists() if name is not None else p.is_dir()

    def keys(self) -> Iterator[StoreKey]:
        for d in sorted(self.root.glob("*/*/*/*/*")):
            if d.is_dir():
                yield StoreKey(*d.relative_to(self.root).parts)

    def files(self) -> Iterator[Path]:
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and not p.name.startswith("."):
                yield p

    def digest(self) -> str:
        """Hash of every stored path and its bytes; equal digests mean equal store content."""
        h = hashlib.sha256()
        for p in self.files():
            rel = p.relative_to(self.root).as_posix().encode()
            data = p.read_bytes()
            h.update(len(rel).to_bytes(8, "big") + rel + len(data).to_bytes(8, "big") + data)
        return h.hexdigest()
