"""File protocol: JSON request manifests in, JSON status + .npy/.png payloads out.

A request is ``<request_dir>/<id>.json`` with ``{"id", "kind", "items": [...]}``
and an optional ``"dim"`` the caller expects. Kinds:

  embed_crops  items: {"image_path", "x1", "y1", "x2", "y2"} (inclusive bounds)
  embed_text   items: {"text"}
  segment      items: {"image_path", "points": [[col, row], ...]}

The response ``<response_dir>/<id>.json`` carries ``status`` ("ok"/"error"),
for embeddings a ``payload`` .npy path whose rows align with the request item
order, and per-item status records (segmentation items add ``score`` and
``mask_path``). All files appear atomically via write-then-rename; a consumer
claims a request by renaming it, so each request is processed at most once.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

VALID_KINDS = ("embed_crops", "embed_text", "segment")

CLAIM_SUFFIX = ".claimed"


class ProtocolError(Exception):
    """Malformed request manifest."""


@dataclass
class BatchRequest:
    id: str
    kind: str
    items: list
    dim: int | None = None

    @classmethod
    def from_file(cls, path) -> "BatchRequest":
        with open(path) as f:
            raw = json.load(f)
        request_id = raw.get("id")
        if not request_id:
            raise ProtocolError(f"{path}: request lacks an id")
        kind = raw.get("kind")
        if kind not in VALID_KINDS:
            raise ProtocolError(f"{path}: unknown kind {kind!r}")
        items = raw.get("items")
        if not isinstance(items, list) or not items:
            raise ProtocolError(f"{path}: request needs a nonempty items list")
        return cls(id=request_id, kind=kind, items=items, dim=raw.get("dim"))


@dataclass
class ItemStatus:
    status: str = "ok"
    error: str | None = None
    score: float | None = None
    mask_path: str | None = None

    def to_dict(self) -> dict:
        out = {"status": self.status}
        if self.error is not None:
            out["error"] = self.error
        if self.score is not None:
            out["score"] = self.score
        if self.mask_path is not None:
            out["mask_path"] = self.mask_path
        return out


@dataclass
class BatchResponse:
    id: str
    status: str = "ok"
    payload: str | None = None
    error: str | None = None
    items: list[ItemStatus] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"id": self.id, "status": self.status,
               "items": [item.to_dict() for item in self.items]}
        if self.payload is not None:
            out["payload"] = self.payload
        if self.error is not None:
            out["error"] = self.error
        return out


def atomic_write_json(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def claim_request(path) -> Path | None:
    """Rename the request file to mark it ours; None if someone else won."""
    path = Path(path)
    claimed = path.with_name(path.name + CLAIM_SUFFIX)
    try:
        os.rename(path, claimed)
    except FileNotFoundError:
        return None
    return claimed


def pending_requests(request_dir) -> list[Path]:
    request_dir = Path(request_dir)
    if not request_dir.is_dir():
        return []
    return sorted(p for p in request_dir.iterdir()
                  if p.suffix == ".json" and p.is_file())
