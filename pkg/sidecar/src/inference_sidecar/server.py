"""Request-directory consumer: claim, dispatch to the backend, respond atomically."""

from __future__ import annotations

import io
import logging
import threading
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import ModelBackend
from .protocol import (BatchRequest, BatchResponse, ItemStatus, ProtocolError,
                       atomic_write_bytes, atomic_write_json, claim_request,
                       pending_requests)

logger = logging.getLogger(__name__)


class SidecarServer:
    """Single-consumer loop over a request directory.

    Payloads (embedding matrices, mask PNGs) land under
    ``<response_dir>/payloads/<request_id>/`` and the response JSON appears
    last, so a response file always references complete payloads.
    """

    def __init__(self, request_dir, response_dir, backend: ModelBackend):
        self.request_dir = Path(request_dir)
        self.response_dir = Path(response_dir)
        self.backend = backend
        self.response_dir.mkdir(parents=True, exist_ok=True)
        self.request_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------- dispatch

    def process_pending(self) -> int:
        """Handle every claimable request once; returns how many were served."""
        handled = 0
        for path in pending_requests(self.request_dir):
            claimed = claim_request(path)
            if claimed is None:
                continue  # raced with another consumer
            self._handle(claimed)
            handled += 1
        return handled

    def serve(self, poll_interval: float = 0.05,
              stop_event: threading.Event | None = None) -> None:
        logger.info("serving requests from %s -> %s", self.request_dir,
                    self.response_dir)
        while stop_event is None or not stop_event.is_set():
            if self.process_pending() == 0:
                time.sleep(poll_interval)

    def _handle(self, path: Path) -> None:
        try:
            request = BatchRequest.from_file(path)
        except (ProtocolError, OSError, ValueError) as exc:
            request_id = path.name.split(".")[0]
            logger.error("rejecting %s: %s", path, exc)
            self._respond(BatchResponse(id=request_id, status="error",
                                        error=str(exc)))
            return
        logger.info("request %s: %s with %d item(s)", request.id, request.kind,
                    len(request.items))
        if request.dim is not None and request.dim != self.backend.dim:
            self._respond(BatchResponse(
                id=request.id, status="error",
                error=f"requested dim {request.dim}, backend provides {self.backend.dim}"))
            return
        try:
            if request.kind == "segment":
                response = self._segment(request)
            else:
                response = self._embed(request)
        except Exception as exc:
            logger.exception("request %s failed", request.id)
            response = BatchResponse(id=request.id, status="error", error=str(exc))
        self._respond(response)

    def _respond(self, response: BatchResponse) -> None:
        atomic_write_json(self.response_dir / f"{response.id}.json",
                          response.to_dict())

    def _payload_dir(self, request_id: str) -> Path:
        path = self.response_dir / "payloads" / request_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    # ------------------------------------------------------------ embeddings

    def _embed(self, request: BatchRequest) -> BatchResponse:
        rows = np.zeros((len(request.items), self.backend.dim), dtype=np.float32)
        statuses = [ItemStatus() for _ in request.items]
        if request.kind == "embed_text":
            texts = [str(item.get("text", "")) for item in request.items]
            rows[:] = self.backend.embed_text(texts)
        else:
            crops: list[Image.Image] = []
            crop_slots: list[int] = []
            for i, item in enumerate(request.items):
                try:
                    crops.append(self._cut_crop(item))
                    crop_slots.append(i)
                except Exception as exc:
                    statuses[i] = ItemStatus(status="error", error=str(exc))
            if crops:
                embedded = self.backend.embed_images(crops)
                for slot, row in zip(crop_slots, embedded):
                    rows[slot] = row
        payload_path = self._payload_dir(request.id) / "embeddings.npy"
        buffer = io.BytesIO()
        np.save(buffer, rows)
        atomic_write_bytes(payload_path, buffer.getvalue())
        return BatchResponse(id=request.id, payload=str(payload_path),
                             items=statuses)

    def _cut_crop(self, item: dict) -> Image.Image:
        image_path = item["image_path"]
        x1, y1 = int(item["x1"]), int(item["y1"])
        x2, y2 = int(item["x2"]), int(item["y2"])
        with Image.open(image_path) as img:
            width, height = img.size
            if not (0 <= x1 < x2 <= width - 1 and 0 <= y1 < y2 <= height - 1):
                raise ValueError(
                    f"crop ({x1},{y1},{x2},{y2}) outside {width}x{height} image")
            # inclusive pixel bounds -> PIL's half-open box
            return img.crop((x1, y1, x2 + 1, y2 + 1)).copy()

    # ---------------------------------------------------------- segmentation

    def _segment(self, request: BatchRequest) -> BatchResponse:
        statuses = []
        payload_dir = self._payload_dir(request.id)
        for i, item in enumerate(request.items):
            try:
                points = np.asarray(item["points"], dtype=np.int64)
                with Image.open(item["image_path"]) as img:
                    mask, score = self.backend.segment(img.copy(), points)
                mask_path = payload_dir / f"mask_{i}.png"
                buffer = io.BytesIO()
                Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(
                    buffer, format="PNG")
                atomic_write_bytes(mask_path, buffer.getvalue())
                statuses.append(ItemStatus(score=float(score),
                                           mask_path=str(mask_path)))
            except Exception as exc:
                logger.warning("segment item %d failed: %s", i, exc)
                statuses.append(ItemStatus(status="error", error=str(exc)))
        return BatchResponse(id=request.id, items=statuses)
