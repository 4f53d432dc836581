"""Per-mask per-frame visibility: projection, FOV test, depth occlusion, top-k views.

A scene point is counted visible in a frame when it projects in front of the
camera, lands inside the image bounds, and its geometric depth does not exceed
the measured depth at its pixel by more than ``k_threshold`` meters. Counts are
normalized per mask by the best frame, giving scores in [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, StoreError
from .proposals import InstanceMask3D, InstanceMaskSet
from .scene import CameraIntrinsics, CameraPose, Frame, Scene

logger = logging.getLogger(__name__)

DEFAULT_K_THRESHOLD = 0.2
DEFAULT_K_VIEW = 5

TABLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Projection2D:
    """Homogeneous image coordinates; w is camera-space depth in meters."""

    u: float
    v: float
    w: float

    @property
    def pixel(self) -> tuple[float, float] | None:
        if self.w == 0:
            return None
        return (self.u / self.w, self.v / self.w)


def project_point(point, pose: CameraPose, intr: CameraIntrinsics) -> Projection2D:
    """(u, v, w) = K . [R|t] . (x, y, z, 1); pose must be world-to-camera."""
    uvw = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), pose, intr)[0]
    return Projection2D(u=float(uvw[0]), v=float(uvw[1]), w=float(uvw[2]))


def project_points(points: np.ndarray, pose: CameraPose,
                   intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (N, 3) world points to (N, 3) homogeneous (u, v, w)."""
    cam = points.astype(np.float64) @ pose.rotation.T + pose.translation
    return cam @ intr.matrix().T


def in_fov(p: Projection2D, width: int, height: int) -> bool:
    """True iff the point is in front of the camera and its pixel lies in bounds.

    The pixel intervals are closed: [0, W-1] x [0, H-1]. Points with w <= 0
    are never in view even though their algebraic pixel may land in bounds.
    """
    if p.w <= 0:
        return False
    u, v = p.u / p.w, p.v / p.w
    return 0.0 <= u <= width - 1 and 0.0 <= v <= height - 1


def _fov_mask(uvw: np.ndarray, width: int, height: int) -> np.ndarray:
    w = uvw[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = uvw[:, 0] / w
        v = uvw[:, 1] / w
    return (w > 0) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def is_unoccluded(p: Projection2D, depth: np.ndarray, k_threshold: float) -> bool:
    """Occlusion test at the nearest depth pixel; requires in_fov(p).

    A measured depth of 0 means "no measurement" and the point is treated as
    not visible. Otherwise the point is occluded iff w - d > k_threshold.
    """
    col = int(np.floor(p.u / p.w + 0.5))
    row = int(np.floor(p.v / p.w + 0.5))
    d = float(depth[row, col])
    if d <= 0:
        return False
    return not (p.w - d > k_threshold)


def visible_point_mask(points: np.ndarray, frame: Frame, k_threshold: float,
                       depth: np.ndarray | None = None) -> np.ndarray:
    """Boolean visibility per point for one frame (FOV + occlusion)."""
    if depth is None:
        depth = frame.load_depth()
    intr = frame.intrinsics
    uvw = project_points(points, frame.pose, intr)
    visible = _fov_mask(uvw, intr.width, intr.height)
    if not visible.any():
        return visible
    idx = np.flatnonzero(visible)
    w = uvw[idx, 2]
    cols = _round_half_up(uvw[idx, 0] / w)
    rows = _round_half_up(uvw[idx, 1] / w)
    d = depth[rows, cols].astype(np.float64)
    ok = (d > 0) & ~(w - d > k_threshold)
    visible[idx] = ok
    return visible


def count_visible(mask: InstanceMask3D, frame: Frame, points: np.ndarray,
                  k_threshold: float = DEFAULT_K_THRESHOLD,
                  depth: np.ndarray | None = None) -> int:
    """Number of the mask's member points visible in this frame."""
    member = mask.point_indices
    vis = visible_point_mask(points[member], frame, k_threshold, depth)
    return int(vis.sum())


@dataclass(frozen=True)
class VisibilityTable:
    """Visible-point counts and normalized scores, masks x frames."""

    counts: np.ndarray  # (M, F) uint32
    scores: np.ndarray  # (M, F) float32
    frame_indices: tuple[int, ...]
    flagged: np.ndarray  # (M,) bool; True when a mask is visible in no frame
    k_threshold: float
    scene_id: str = "scene"

    @property
    def mask_count(self) -> int:
        return self.counts.shape[0]

    @property
    def frame_count(self) -> int:
        return self.counts.shape[1]


def scores_from_counts(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row by its max; all-zero rows stay zero and get flagged."""
    counts = np.asarray(counts)
    row_max = counts.max(axis=1)
    flagged = row_max == 0
    denom = np.where(flagged, 1, row_max).astype(np.float64)
    scores = (counts.astype(np.float64) / denom[:, None]).astype(np.float32)
    return scores, flagged


def build_visibility_table(masks: InstanceMaskSet, scene: Scene,
                           k_threshold: float = DEFAULT_K_THRESHOLD) -> VisibilityTable:
    """Count visible member points for every (mask, frame) pair and normalize.

    Per-point visibility is computed once per frame and shared by all masks,
    so the result is independent of mask order and any scheduling.
    """
    points = scene.cloud.points
    m, f = len(masks), len(scene.frames)
    counts = np.zeros((m, f), dtype=np.uint32)
    member_indices = [mask.point_indices for mask in masks]
    for j, frame in enumerate(scene.frames):
        depth = frame.load_depth()
        visible = visible_point_mask(points, frame, k_threshold, depth)
        for i, member in enumerate(member_indices):
            counts[i, j] = np.count_nonzero(visible[member])
    scores, flagged = scores_from_counts(counts)
    if flagged.any():
        logger.warning("%d mask(s) visible in no frame (flagged featureless)",
                       int(flagged.sum()))
    return VisibilityTable(counts=counts, scores=scores,
                           frame_indices=tuple(fr.index for fr in scene.frames),
                           flagged=flagged, k_threshold=k_threshold,
                           scene_id=scene.scene_id)


@dataclass(frozen=True)
class ViewSelection:
    mask_id: int
    frame_indices: tuple[int, ...]  # scene frame indices, best score first


def select_topk_views(table: VisibilityTable, mask_id: int,
                      k_view: int | None = DEFAULT_K_VIEW) -> ViewSelection:
    """Top views by score, descending; ties broken by ascending frame index.

    Frames with score 0 are never selected. ``k_view=None`` keeps every frame
    with a nonzero score (the "all views" configuration).
    """
    if k_view is not None and k_view < 1:
        raise ParameterError("k_view must be >= 1")
    row = table.scores[mask_id]
    nonzero = np.flatnonzero(row > 0)
    order = nonzero[np.lexsort((nonzero, -row[nonzero]))]
    if k_view is not None:
        order = order[:k_view]
    return ViewSelection(mask_id=mask_id,
                         frame_indices=tuple(table.frame_indices[j] for j in order))


def save_visibility_table(table: VisibilityTable, stem) -> None:
    """Write <stem>.scores.npy, <stem>.counts.npy and <stem>.json."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.save(f"{stem}.scores.npy", table.scores.astype(np.float32))
    np.save(f"{stem}.counts.npy", table.counts.astype(np.uint32))
    manifest = {
        "version": TABLE_FORMAT_VERSION,
        "scene_id": table.scene_id,
        "mask_count": table.mask_count,
        "frame_indices": list(table.frame_indices),
        "k_threshold": table.k_threshold,
    }
    with open(f"{stem}.json", "w") as f:
        json.dump(manifest, f, indent=2)


def load_visibility_table(stem) -> VisibilityTable:
    stem = Path(stem)
    manifest_path = Path(f"{stem}.json")
    if not manifest_path.is_file():
        raise StoreError(f"visibility manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != TABLE_FORMAT_VERSION:
        raise StoreError(f"unsupported visibility table version {manifest.get('version')}")
    scores = np.load(f"{stem}.scores.npy")
    counts = np.load(f"{stem}.counts.npy")
    if scores.shape != counts.shape:
        raise StoreError("visibility table scores/counts shape mismatch")
    if scores.shape != (manifest["mask_count"], len(manifest["frame_indices"])):
        raise StoreError("visibility table shape disagrees with manifest")
    _, flagged = scores_from_counts(counts)
    return VisibilityTable(counts=counts, scores=scores,
                           frame_indices=tuple(manifest["frame_indices"]),
                           flagged=flagged, k_threshold=manifest["k_threshold"],
                           scene_id=manifest.get("scene_id", "scene"))
