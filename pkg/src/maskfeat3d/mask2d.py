"""2D mask refinement and multi-scale crop boxes for a (mask, frame) pair.

The refined 2D mask comes from a point-prompted segmenter: several rounds each
sample a handful of the mask's projected pixels, prompt the segmenter, and the
highest-confidence mask wins (strict improvement, first maximum kept). The
winning mask's tight bounding box is expanded into L nested crops.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import FrameDegenerateError, ParameterError, SegmentationError
from .proposals import InstanceMask3D
from .scene import CameraIntrinsics, Frame
from .visibility import visible_point_mask, project_points, _round_half_up

logger = logging.getLogger(__name__)

DEFAULT_K_ROUNDS = 10
DEFAULT_K_SAMPLE = 5
DEFAULT_LEVELS = 3
DEFAULT_K_EXP = 0.2


@dataclass(frozen=True)
class Mask2D:
    """Binary 2D mask with the segmenter's confidence score."""

    mask: np.ndarray  # (H, W) bool
    score: float


@dataclass(frozen=True)
class CropBox:
    """Inclusive pixel bounds of one crop level."""

    x1: int
    y1: int
    x2: int
    y2: int
    level: int = 1

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x1 < self.x2 <= width - 1):
            raise ParameterError(f"invalid x bounds {self.x1}..{self.x2} for width {width}")
        if not (0 <= self.y1 < self.y2 <= height - 1):
            raise ParameterError(f"invalid y bounds {self.y1}..{self.y2} for height {height}")

    def contains(self, other: "CropBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)


class SegmenterInterface(Protocol):
    """Point-prompted 2D segmenter: image + prompt pixels -> mask and score."""

    def segment(self, image_path: Path | None, points: np.ndarray) -> Mask2D:
        """``points`` is (K, 2) integer (col, row) prompt pixels."""
        ...


class OracleSegmenter:
    """Deterministic test segmenter backed by a known ground-truth 2D mask.

    Always returns the configured mask; the score is the fraction of prompt
    points that fall inside it.
    """

    def __init__(self, gt_mask: np.ndarray):
        self.gt_mask = gt_mask.astype(bool)

    def segment(self, image_path, points: np.ndarray) -> Mask2D:
        cols, rows = points[:, 0], points[:, 1]
        inside = self.gt_mask[rows, cols]
        return Mask2D(mask=self.gt_mask, score=float(inside.mean()))


def derive_seed(master_seed: int, mask_id: int, frame_index: int) -> int:
    """Stable per-(mask, frame) seed from the pipeline master seed."""
    digest = hashlib.sha256(
        f"{master_seed}:{mask_id}:{frame_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def project_mask_pixels(mask: InstanceMask3D, frame: Frame, points: np.ndarray,
                        k_threshold: float,
                        depth: np.ndarray | None = None) -> np.ndarray:
    """Deduplicated (col, row) pixels of the mask's visible points in a frame.

    Returned pixels are in depth-image coordinates, sorted lexicographically.
    Raises FrameDegenerateError when nothing projects into this frame.
    """
    member = mask.point_indices
    pts = points[member]
    vis = visible_point_mask(pts, frame, k_threshold, depth)
    if not vis.any():
        raise FrameDegenerateError(
            f"mask {mask.mask_id} has no visible pixel in frame {frame.index}")
    uvw = project_points(pts[vis], frame.pose, frame.intrinsics)
    cols = _round_half_up(uvw[:, 0] / uvw[:, 2])
    rows = _round_half_up(uvw[:, 1] / uvw[:, 2])
    pixels = np.unique(np.stack([cols, rows], axis=1), axis=0)
    return pixels


def transfer_pixels(pixels: np.ndarray, source: CameraIntrinsics,
                    target: CameraIntrinsics) -> np.ndarray:
    """Map pixels between two intrinsics sharing the same camera center."""
    x_n = (pixels[:, 0] - source.cx) / source.fx
    y_n = (pixels[:, 1] - source.cy) / source.fy
    cols = _round_half_up(x_n * target.fx + target.cx)
    rows = _round_half_up(y_n * target.fy + target.cy)
    cols = np.clip(cols, 0, target.width - 1)
    rows = np.clip(rows, 0, target.height - 1)
    return np.unique(np.stack([cols, rows], axis=1), axis=0)


def select_2d_mask(pixels: np.ndarray, segmenter: SegmenterInterface,
                   k_rounds: int = DEFAULT_K_ROUNDS,
                   k_sample: int = DEFAULT_K_SAMPLE,
                   rng_seed: int = 0,
                   image_path: Path | None = None) -> Mask2D:
    """Multi-round prompt sampling; returns the first strictly-best mask.

    Each round samples min(k_sample, |pixels|) distinct pixels uniformly
    without replacement. A round's mask replaces the incumbent only when its
    score is strictly higher, so the first maximum wins ties.
    """
    if pixels.shape[0] == 0:
        raise FrameDegenerateError("empty pixel set")
    if k_rounds < 1 or k_sample < 1:
        raise ParameterError("k_rounds and k_sample must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = pixels.shape[0]
    sample_size = min(k_sample, n)
    best: Mask2D | None = None
    best_score = 0.0
    successes = 0
    shape = None
    for r in range(k_rounds):
        chosen = rng.choice(n, size=sample_size, replace=False)
        prompts = pixels[np.sort(chosen)]
        try:
            result = segmenter.segment(image_path, prompts)
        except Exception as exc:  # a failed round is skipped, not fatal
            logger.warning("segmentation round %d failed: %s", r, exc)
            continue
        successes += 1
        shape = result.mask.shape
        if result.score > best_score:
            best = result
            best_score = result.score
    if successes == 0:
        raise SegmentationError(f"all {k_rounds} segmentation rounds failed")
    if best is None:
        # every successful round scored 0: the incumbent empty mask stands
        return Mask2D(mask=np.zeros(shape, dtype=bool), score=0.0)
    return best


def tight_bbox(source, width: int, height: int) -> CropBox:
    """Minimal level-1 box around a Mask2D's set pixels or a (col, row) pixel set.

    A zero-extent axis is widened by one pixel (clamped to the image) so the
    box always has positive area.
    """
    if isinstance(source, Mask2D):
        rows, cols = np.nonzero(source.mask)
        if rows.size == 0:
            raise ParameterError("2D mask has no set pixel")
    else:
        pixels = np.asarray(source)
        if pixels.size == 0:
            raise ParameterError("empty pixel set")
        cols, rows = pixels[:, 0], pixels[:, 1]
    x1, x2 = int(cols.min()), int(cols.max())
    y1, y2 = int(rows.min()), int(rows.max())
    if x1 == x2:
        if x2 < width - 1:
            x2 += 1
        else:
            x1 -= 1
    if y1 == y2:
        if y2 < height - 1:
            y2 += 1
        else:
            y1 -= 1
    box = CropBox(x1=x1, y1=y1, x2=x2, y2=y2, level=1)
    box.validate(width, height)
    return box


def multiscale_crops(b1: CropBox, levels: int = DEFAULT_LEVELS,
                     k_exp: float = DEFAULT_K_EXP,
                     width: int = 0, height: int = 0) -> list[CropBox]:
    """Nested crop boxes: level 1 is the tight box, levels 2..L expand each
    side by (level-1 extent) * k_exp * level, clamped to the image."""
    if levels < 1:
        raise ParameterError("levels must be >= 1")
    if k_exp < 0:
        raise ParameterError("k_exp must be >= 0")
    b1.validate(width, height)
    boxes = [CropBox(b1.x1, b1.y1, b1.x2, b1.y2, level=1)]
    ex_unit = (b1.x2 - b1.x1) * k_exp
    ey_unit = (b1.y2 - b1.y1) * k_exp
    for level in range(2, levels + 1):
        ex = ex_unit * level
        ey = ey_unit * level
        boxes.append(CropBox(
            x1=max(0, math.floor(b1.x1 - ex)),
            y1=max(0, math.floor(b1.y1 - ey)),
            x2=min(math.ceil(b1.x2 + ex), width - 1),
            y2=min(math.ceil(b1.y2 + ey), height - 1),
            level=level,
        ))
    return boxes


@dataclass(frozen=True)
class CropRecord:
    """One crop manifest line handed to the feature stage."""

    mask_id: int
    frame_index: int
    level: int
    x1: int
    y1: int
    x2: int
    y2: int
    image_path: str

    @property
    def box(self) -> CropBox:
        return CropBox(self.x1, self.y1, self.x2, self.y2, self.level)


def write_crop_manifest(records: list[CropRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(asdict(rec)) + "\n")


def read_crop_manifest(path) -> list[CropRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(CropRecord(**json.loads(line)))
    return records
