"""Model backends behind one small interface.

``StubBackend`` is fully deterministic and dependency-free; it stands in for
the real encoders in tests and CI. ``ClipSamBackend`` wraps the published
ViT-L/14 (336 px) image/text encoder plus a point-promptable segmentation
model, imported lazily so the package works without the model stack.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
from PIL import Image

DEFAULT_DIM = 768


class ModelBackend(Protocol):
    @property
    def dim(self) -> int: ...

    def embed_images(self, images: list[Image.Image]) -> np.ndarray: ...

    def embed_text(self, texts: list[str]) -> np.ndarray: ...

    def segment(self, image: Image.Image, points: np.ndarray) -> tuple[np.ndarray, float]:
        """Returns (bool mask (H, W), confidence in [0, 1])."""
        ...


def _hash_to_unit_vector(data: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim).astype(np.float32)
    return vec / np.linalg.norm(vec)


class StubBackend:
    """Deterministic hash-based embeddings and intensity-region segmentation.

    Identical inputs always produce identical outputs: text embeds by content
    hash, images by the hash of a small grayscale thumbnail, and segmentation
    returns the connected intensity region voted for by the prompt points.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def embed_images(self, images: list[Image.Image]) -> np.ndarray:
        out = np.zeros((len(images), self._dim), dtype=np.float32)
        for i, image in enumerate(images):
            thumb = image.convert("L").resize((16, 16), Image.BILINEAR)
            out[i] = _hash_to_unit_vector(b"img:" + thumb.tobytes(), self._dim)
        return out

    def embed_text(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self._dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = _hash_to_unit_vector(b"txt:" + text.encode(), self._dim)
        return out

    def segment(self, image: Image.Image, points: np.ndarray) -> tuple[np.ndarray, float]:
        gray = np.asarray(image.convert("L"))
        points = np.asarray(points, dtype=np.int64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValueError("prompt points must be (K, 2) (col, row)")
        h, w = gray.shape
        cols, rows = points[:, 0], points[:, 1]
        if (cols < 0).any() or (cols >= w).any() or (rows < 0).any() or (rows >= h).any():
            raise ValueError("prompt point outside image bounds")
        values = gray[rows, cols]
        ids, counts = np.unique(values, return_counts=True)
        dominant = int(ids[np.argmax(counts)])
        mask = gray == dominant
        score = float(np.mean(values == dominant))
        return mask, score


class ClipSamBackend:
    """Published encoder pair: CLIP ViT-L/14 at 336 px and a SAM checkpoint.

    Requires the optional model stack (torch, transformers, segment-anything)
    plus downloaded weights; inference runs in no-grad eval mode so identical
    requests produce identical outputs.
    """

    def __init__(self, clip_model: str = "openai/clip-vit-large-patch14-336",
                 sam_checkpoint: str | None = None,
                 sam_model_type: str = "vit_h", device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise RuntimeError(
                "ClipSamBackend needs the optional [models] dependencies") from exc
        self._torch = torch
        self._device = device
        self._clip = CLIPModel.from_pretrained(clip_model).to(device).eval()
        self._processor = CLIPProcessor.from_pretrained(clip_model)
        self._dim = self._clip.config.projection_dim
        self._predictor = None
        if sam_checkpoint is not None:
            from segment_anything import SamPredictor, sam_model_registry
            sam = sam_model_registry[sam_model_type](checkpoint=sam_checkpoint)
            self._predictor = SamPredictor(sam.to(device))

    @property
    def dim(self) -> int:
        return self._dim

    def embed_images(self, images: list[Image.Image]) -> np.ndarray:
        inputs = self._processor(images=[im.convert("RGB") for im in images],
                                 return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            feats = self._clip.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)

    def embed_text(self, texts: list[str]) -> np.ndarray:
        inputs = self._processor(text=texts, return_tensors="pt",
                                 padding=True, truncation=True).to(self._device)
        with self._torch.no_grad():
            feats = self._clip.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)

    def segment(self, image: Image.Image, points: np.ndarray) -> tuple[np.ndarray, float]:
        if self._predictor is None:
            raise RuntimeError("no segmentation checkpoint configured")
        self._predictor.set_image(np.asarray(image.convert("RGB")))
        coords = np.asarray(points, dtype=np.float32)
        labels = np.ones(len(coords), dtype=np.int32)
        masks, scores, _ = self._predictor.predict(
            point_coords=coords, point_labels=labels, multimask_output=False)
        return masks[0].astype(bool), float(np.clip(scores[0], 0.0, 1.0))
