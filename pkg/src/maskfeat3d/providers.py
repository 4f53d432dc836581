"""Embedding providers and segmenter adapters.

Three provider flavors stand behind one interface: a synthetic test provider
(one-hot vectors keyed by the instance-id image under each crop), a
precomputed-file provider, and a client for the file-based inference sidecar.
The primary pipeline never loads an encoder itself.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import uuid
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import ProviderError
from .mask2d import CropRecord, Mask2D

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 64


class EmbeddingProviderInterface(Protocol):
    """Maps image crops and text strings into a shared D-dimensional space."""

    @property
    def dim(self) -> int: ...

    def embed_crops(self, records: list[CropRecord]) -> np.ndarray:
        """Float32 matrix (len(records), D), rows aligned to the records."""
        ...

    def embed_text(self, texts: list[str]) -> np.ndarray:
        """Float32 matrix (len(texts), D), rows aligned to the texts."""
        ...


_INSTANCE_TEXT = re.compile(r"instance[_ ](\d+)$")


class SyntheticOneHotProvider:
    """Deterministic test provider over instance-id images.

    Frame "color" images are 8-bit label maps: 0 is background, instance k is
    stored as k+1. A crop embeds to the one-hot code of the dominant instance
    inside its box (ties to the smallest id); all-background crops embed to
    zero. Text queries of the form ``instance_k`` embed to the same codes.
    """

    def __init__(self, num_labels: int):
        self._dim = num_labels
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def _label_image(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("L"))
            self._cache[path] = arr
        return arr

    def _one_hot(self, label: int) -> np.ndarray:
        vec = np.zeros(self._dim, dtype=np.float32)
        vec[label] = 1.0
        return vec

    def embed_crops(self, records: list[CropRecord]) -> np.ndarray:
        out = np.zeros((len(records), self._dim), dtype=np.float32)
        for i, rec in enumerate(records):
            labels = self._label_image(rec.image_path)
            region = labels[rec.y1:rec.y2 + 1, rec.x1:rec.x2 + 1]
            ids, counts = np.unique(region[region > 0], return_counts=True)
            if ids.size == 0:
                continue
            dominant = int(ids[np.argmax(counts)]) - 1
            if dominant < self._dim:
                out[i] = self._one_hot(dominant)
        return out

    def embed_text(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self._dim), dtype=np.float32)
        for i, text in enumerate(texts):
            m = _INSTANCE_TEXT.search(text.strip())
            if m is None:
                raise ProviderError(f"synthetic provider cannot embed text {text!r}")
            label = int(m.group(1))
            if not 0 <= label < self._dim:
                raise ProviderError(f"label {label} outside 0..{self._dim - 1}")
            out[i] = self._one_hot(label)
        return out


class PrecomputedEmbeddingProvider:
    """Serves embeddings from .npy matrices computed offline.

    Crop rows are keyed by (mask_id, frame_index, level) through a JSON
    manifest; text rows are keyed by the exact query string.
    """

    def __init__(self, crops_npy=None, crops_manifest=None,
                 text_npy=None, text_manifest=None):
        self._crop_rows: dict[tuple[int, int, int], np.ndarray] = {}
        self._text_rows: dict[str, np.ndarray] = {}
        self._dim = None
        if crops_npy is not None:
            matrix = np.load(crops_npy).astype(np.float32)
            with open(crops_manifest) as f:
                manifest = json.load(f)
            items = manifest["items"]
            if len(items) != matrix.shape[0]:
                raise ProviderError(
                    f"crop manifest lists {len(items)} items, matrix has {matrix.shape[0]} rows")
            for row, item in zip(matrix, items):
                key = (int(item["mask_id"]), int(item["frame_index"]), int(item["level"]))
                self._crop_rows[key] = row
            self._dim = matrix.shape[1]
        if text_npy is not None:
            matrix = np.load(text_npy).astype(np.float32)
            with open(text_manifest) as f:
                manifest = json.load(f)
            texts = manifest["texts"]
            if len(texts) != matrix.shape[0]:
                raise ProviderError(
                    f"text manifest lists {len(texts)} texts, matrix has {matrix.shape[0]} rows")
            for row, text in zip(matrix, texts):
                self._text_rows[text] = row
            if self._dim is not None and matrix.shape[1] != self._dim:
                raise ProviderError("crop and text dimensionalities differ")
            self._dim = matrix.shape[1]
        if self._dim is None:
            raise ProviderError("precomputed provider needs at least one matrix")

    @property
    def dim(self) -> int:
        return self._dim

    def embed_crops(self, records: list[CropRecord]) -> np.ndarray:
        out = np.zeros((len(records), self._dim), dtype=np.float32)
        for i, rec in enumerate(records):
            key = (rec.mask_id, rec.frame_index, rec.level)
            row = self._crop_rows.get(key)
            if row is None:
                raise ProviderError(f"no precomputed embedding for crop {key}")
            out[i] = row
        return out

    def embed_text(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self._dim), dtype=np.float32)
        for i, text in enumerate(texts):
            row = self._text_rows.get(text)
            if row is None:
                raise ProviderError(f"no precomputed embedding for text {text!r}")
            out[i] = row
        return out


class SyntheticSegmenter:
    """Deterministic test segmenter over instance-id images.

    Prompts vote for the instance id under them (ties to the smallest id);
    the returned mask is that id's exact region and the score is the fraction
    of prompts that landed on it. All-background prompts yield an empty mask
    with score 0.
    """

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def _label_image(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("L"))
            self._cache[path] = arr
        return arr

    def segment(self, image_path, points: np.ndarray) -> Mask2D:
        if image_path is None:
            raise ProviderError("synthetic segmenter needs an instance-id image")
        labels = self._label_image(str(image_path))
        points = np.asarray(points)
        hits = labels[points[:, 1], points[:, 0]]
        ids, counts = np.unique(hits[hits > 0], return_counts=True)
        if ids.size == 0:
            return Mask2D(mask=np.zeros_like(labels, dtype=bool), score=0.0)
        dominant = int(ids[np.argmax(counts)])
        mask = labels == dominant
        score = float(np.mean(hits == dominant))
        return Mask2D(mask=mask, score=score)


def write_request(request_dir, payload: dict) -> Path:
    """Atomically place a request manifest (write temp, then rename)."""
    request_dir = Path(request_dir)
    request_dir.mkdir(parents=True, exist_ok=True)
    path = request_dir / f"{payload['id']}.json"
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)
    return path


def await_response(response_dir, request_id: str, timeout: float,
                   poll_interval: float) -> dict:
    response_path = Path(response_dir) / f"{request_id}.json"
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if response_path.is_file():
            with open(response_path) as f:
                return json.load(f)
        time.sleep(poll_interval)
    raise ProviderError(f"sidecar response timed out after {timeout}s: {request_id}")


class SidecarEmbeddingProvider:
    """Client for the file-based inference sidecar (embedding side).

    Requests are JSON manifests dropped into the request directory; the
    sidecar answers with a JSON status plus an .npy matrix whose rows match
    the request item order.
    """

    def __init__(self, request_dir, response_dir, dim: int = 768,
                 batch_size: int = DEFAULT_BATCH_SIZE,
                 timeout: float = 300.0, poll_interval: float = 0.05):
        self.request_dir = Path(request_dir)
        self.response_dir = Path(response_dir)
        self._dim = dim
        self.batch_size = batch_size
        self.timeout = timeout
        self.poll_interval = poll_interval

    @property
    def dim(self) -> int:
        return self._dim

    def _roundtrip(self, kind: str, items: list[dict]) -> np.ndarray:
        request_id = uuid.uuid4().hex
        write_request(self.request_dir, {
            "id": request_id, "kind": kind, "dim": self._dim, "items": items,
        })
        response = await_response(self.response_dir, request_id,
                                  self.timeout, self.poll_interval)
        if response.get("status") != "ok":
            raise ProviderError(f"sidecar request {request_id} failed: "
                                f"{response.get('error', 'unknown error')}")
        matrix = np.load(response["payload"]).astype(np.float32)
        if matrix.shape != (len(items), self._dim):
            raise ProviderError(
                f"sidecar returned {matrix.shape}, expected {(len(items), self._dim)}")
        for item in response.get("items", []):
            if item.get("status") == "error":
                logger.warning("sidecar item failed: %s", item.get("error"))
        return matrix

    def embed_crops(self, records: list[CropRecord]) -> np.ndarray:
        chunks = []
        for start in range(0, len(records), self.batch_size):
            batch = records[start:start + self.batch_size]
            items = [{"image_path": r.image_path, "x1": r.x1, "y1": r.y1,
                      "x2": r.x2, "y2": r.y2} for r in batch]
            chunks.append(self._roundtrip("embed_crops", items))
        if not chunks:
            return np.zeros((0, self._dim), dtype=np.float32)
        return np.vstack(chunks)

    def embed_text(self, texts: list[str]) -> np.ndarray:
        chunks = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start:start + self.batch_size]
            chunks.append(self._roundtrip("embed_text", [{"text": t} for t in batch]))
        if not chunks:
            return np.zeros((0, self._dim), dtype=np.float32)
        return np.vstack(chunks)


class SidecarSegmenter:
    """Client for the sidecar's point-prompted segmentation endpoint."""

    def __init__(self, request_dir, response_dir,
                 timeout: float = 300.0, poll_interval: float = 0.05):
        self.request_dir = Path(request_dir)
        self.response_dir = Path(response_dir)
        self.timeout = timeout
        self.poll_interval = poll_interval

    def segment(self, image_path, points: np.ndarray) -> Mask2D:
        if image_path is None:
            raise ProviderError("sidecar segmenter needs an image path")
        request_id = uuid.uuid4().hex
        write_request(self.request_dir, {
            "id": request_id, "kind": "segment",
            "items": [{"image_path": str(image_path),
                       "points": np.asarray(points).tolist()}],
        })
        response = await_response(self.response_dir, request_id,
                                  self.timeout, self.poll_interval)
        if response.get("status") != "ok":
            raise ProviderError(f"sidecar segmentation failed: "
                                f"{response.get('error', 'unknown error')}")
        item = response["items"][0]
        if item.get("status") == "error":
            raise ProviderError(f"sidecar segmentation item failed: {item.get('error')}")
        with Image.open(item["mask_path"]) as img:
            mask = np.asarray(img.convert("L")) > 0
        return Mask2D(mask=mask, score=float(item["score"]))
