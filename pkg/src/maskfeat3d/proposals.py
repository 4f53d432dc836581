"""Class-agnostic 3D instance mask proposals: ingestion and DBSCAN splitting.

Proposals arrive as an N x M uint8 matrix (points x masks) in .npy layout with
a JSON sidecar manifest. Masks are kept unranked and unfiltered; the only
post-processing is splitting each mask into spatially contiguous DBSCAN
clusters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ParameterError, ProposalFormatError
from .scene import PointCloud, Scene

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskProvenance:
    external_id: int
    cluster: int | None = None


@dataclass(frozen=True)
class InstanceMask3D:
    """Binary membership vector over the scene's points."""

    membership: np.ndarray  # (N,) bool
    mask_id: int
    provenance: MaskProvenance

    @property
    def point_indices(self) -> np.ndarray:
        return np.flatnonzero(self.membership)

    @property
    def size(self) -> int:
        return int(self.membership.sum())


@dataclass(frozen=True)
class InstanceMaskSet:
    masks: tuple[InstanceMask3D, ...]
    scene_id: str

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i) -> InstanceMask3D:
        return self.masks[i]

    @property
    def point_count(self) -> int:
        return self.masks[0].membership.shape[0] if self.masks else 0

    def validate(self) -> None:
        n = self.point_count
        for m in self.masks:
            if m.membership.shape != (n,):
                raise ProposalFormatError(
                    f"mask {m.mask_id} has length {m.membership.shape[0]}, expected {n}")
            if m.size == 0:
                raise ProposalFormatError(f"mask {m.mask_id} is empty")


def _mask_from_indices(n: int, indices: np.ndarray, mask_id: int,
                       provenance: MaskProvenance) -> InstanceMask3D:
    membership = np.zeros(n, dtype=bool)
    membership[indices] = True
    return InstanceMask3D(membership=membership, mask_id=mask_id, provenance=provenance)


def ingest_proposals(path, scene: Scene) -> InstanceMaskSet:
    """Read an N x M proposal matrix; keeps all non-empty masks, unranked.

    Empty columns are dropped with a warning. No confidence scores exist in
    this format and none are invented.
    """
    path = Path(path)
    if not path.is_file():
        raise ProposalFormatError(f"proposal file not found: {path}")
    matrix = np.load(path)
    if matrix.ndim != 2:
        raise ProposalFormatError(f"{path}: expected 2-D matrix, got shape {matrix.shape}")
    n_points = scene.cloud.count
    if matrix.shape[0] != n_points:
        raise ProposalFormatError(
            f"{path}: {matrix.shape[0]} rows but scene has {n_points} points")
    values = np.unique(matrix)
    if not np.isin(values, (0, 1)).all():
        raise ProposalFormatError(f"{path}: non-binary entries {values[:8]}")

    manifest_path = path.with_suffix(".json")
    if manifest_path.is_file():
        with open(manifest_path) as f:
            manifest = json.load(f)
        if manifest.get("N") not in (None, n_points):
            raise ProposalFormatError(
                f"{manifest_path}: manifest N={manifest['N']} != scene points {n_points}")
        if manifest.get("M") not in (None, matrix.shape[1]):
            raise ProposalFormatError(
                f"{manifest_path}: manifest M={manifest['M']} != columns {matrix.shape[1]}")
    else:
        logger.warning("proposal manifest missing: %s", manifest_path)

    masks = []
    dropped = 0
    for col in range(matrix.shape[1]):
        membership = matrix[:, col].astype(bool)
        if not membership.any():
            dropped += 1
            continue
        masks.append(InstanceMask3D(membership=membership, mask_id=len(masks),
                                    provenance=MaskProvenance(external_id=col)))
    if dropped:
        logger.warning("dropped %d empty proposal column(s) from %s", dropped, path)
    mask_set = InstanceMaskSet(masks=tuple(masks), scene_id=scene.scene_id)
    mask_set.validate()
    return mask_set


def save_proposals(mask_set: InstanceMaskSet, path) -> None:
    """Write masks as the N x M uint8 matrix plus its JSON manifest."""
    path = Path(path)
    n = mask_set.point_count
    matrix = np.zeros((n, len(mask_set)), dtype=np.uint8)
    for col, mask in enumerate(mask_set):
        matrix[:, col] = mask.membership
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, matrix)
    with open(path.with_suffix(".json"), "w") as f:
        json.dump({"scene_id": mask_set.scene_id, "N": n, "M": len(mask_set)}, f)


def dbscan_split(mask: InstanceMask3D, cloud: PointCloud, eps: float,
                 min_points: int = 1) -> list[InstanceMask3D]:
    """Split one mask into spatially contiguous clusters (Euclidean DBSCAN).

    Noise points are excluded from every output. Clusters come back ordered
    by descending size, ties by smallest member point index.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if min_points < 1:
        raise ParameterError("min_points must be >= 1")
    indices = mask.point_indices
    coords = cloud.points[indices].astype(np.float64)
    labels = DBSCAN(eps=eps, min_samples=min_points).fit(coords).labels_

    clusters = []
    for label in np.unique(labels):
        if label == -1:
            continue
        member = indices[labels == label]
        clusters.append(member)
    clusters.sort(key=lambda idx: (-idx.shape[0], int(idx[0])))

    external = mask.provenance.external_id
    n = mask.membership.shape[0]
    return [
        _mask_from_indices(n, member, ordinal,
                           MaskProvenance(external_id=external, cluster=ordinal))
        for ordinal, member in enumerate(clusters)
    ]


def split_all(mask_set: InstanceMaskSet, cloud: PointCloud, eps: float,
              min_points: int = 1) -> InstanceMaskSet:
    """DBSCAN-split every mask and re-index the concatenated result."""
    out = []
    noise_only = 0
    for mask in mask_set:
        parts = dbscan_split(mask, cloud, eps, min_points)
        if not parts:
            noise_only += 1
        for part in parts:
            out.append(InstanceMask3D(membership=part.membership, mask_id=len(out),
                                      provenance=part.provenance))
    if noise_only:
        logger.warning("%d proposal(s) were entirely noise and produced no mask", noise_only)
    logger.info("split %d proposal(s) into %d mask(s)", len(mask_set), len(out))
    return InstanceMaskSet(masks=tuple(out), scene_id=mask_set.scene_id)
