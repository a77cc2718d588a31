"""File-backed entity registry: one directory per kind, one JSON document
per entity, weight blobs as sibling files named by result id.

Writes go through a temp file + fsync + atomic rename, so a reload after
any crash sees exactly the acknowledged writes. Ids are integers,
monotonically increasing, and never reused: a high-water mark persisted
in ids.json keeps them unique across restarts even when the newest
entity was deleted.
"""
from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Iterator, Optional

KINDS = ("models", "configurations", "deployments", "results", "inferences", "datastreams")


class UnknownEntity(KeyError):
    pass


class EntityRegistry:
    def __init__(self, data_dir: str | Path) -> None:
        self.root = Path(data_dir)
        self._lock = threading.RLock()
        self._next_id: dict[str, int] = {}
        self._ids_path = self.root / "ids.json"
        self.root.mkdir(parents=True, exist_ok=True)
        hwm: dict[str, int] = {}
        if self._ids_path.exists():
            hwm = json.loads(self._ids_path.read_text(encoding="utf-8"))
        for kind in KINDS:
            d = self.root / kind
            d.mkdir(parents=True, exist_ok=True)
            ids = [int(p.stem) for p in d.glob("*.json")]
            self._next_id[kind] = max(max(ids, default=0), hwm.get(kind, 0)) + 1

    def _path(self, kind: str, entity_id: int) -> Path:
        return self.root / kind / f"{entity_id}.json"

    def _write(self, path: Path, doc: dict[str, Any]) -> None:
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def create(self, kind: str, doc: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            entity_id = self._next_id[kind]
            self._next_id[kind] += 1
            self._write(self._ids_path, {k: n - 1 for k, n in self._next_id.items()})
            doc = dict(doc, id=entity_id)
            self._write(self._path(kind, entity_id), doc)
            return doc

    def get(self, kind: str, entity_id: int) -> dict[str, Any]:
        with self._lock:
            path = self._path(kind, entity_id)
            if not path.exists():
                raise UnknownEntity(f"{kind}/{entity_id}")
            return json.loads(path.read_text(encoding="utf-8"))

    def update(self, kind: str, entity_id: int, **fields: Any) -> dict[str, Any]:
        with self._lock:
            doc = self.get(kind, entity_id)
            doc.update(fields)
            self._write(self._path(kind, entity_id), doc)
            return doc

    def delete(self, kind: str, entity_id: int) -> None:
        with self._lock:
            path = self._path(kind, entity_id)
            if not path.exists():
                raise UnknownEntity(f"{kind}/{entity_id}")
            path.unlink()

    def list(self, kind: str) -> list[dict[str, Any]]:
        with self._lock:
            docs = [
                json.loads(p.read_text(encoding="utf-8"))
                for p in (self.root / kind).glob("*.json")
            ]
            return sorted(docs, key=lambda d: d["id"])

    def exists(self, kind: str, entity_id: int) -> bool:
        return self._path(kind, entity_id).exists()

    # -------------------------------------------------------------- weight blobs

    def blob_path(self, result_id: int) -> Path:
        return self.root / "results" / f"{result_id}.weights"

    def write_blob(self, result_id: int, blob: bytes) -> None:
        path = self.blob_path(result_id)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def read_blob(self, result_id: int) -> bytes:
        path = self.blob_path(result_id)
        if not path.exists():
            raise UnknownEntity(f"results/{result_id} blob")
        return path.read_bytes()
