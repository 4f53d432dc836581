"""Per-mask feature computation: views -> 2D masks -> crops -> pooled embedding.

For each 3D mask the top-k visible frames are refined into 2D masks (or the
projected-point bounding box when no segmenter is configured), expanded into L
nested crops, embedded by the configured provider, and mean-pooled into a
single feature vector. Masks visible nowhere carry a zero vector and a
"featureless" flag so indices stay aligned with the proposal set.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (FrameDegenerateError, ParameterError, ProviderError,
                     SegmentationError, StoreError)
from .mask2d import (CropRecord, SegmenterInterface, derive_seed,
                     multiscale_crops, project_mask_pixels, select_2d_mask,
                     tight_bbox, transfer_pixels)
from .proposals import InstanceMask3D, InstanceMaskSet
from .providers import EmbeddingProviderInterface
from .scene import Scene
from .visibility import VisibilityTable, select_topk_views

logger = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1

FLAG_VALID = "valid"
FLAG_FEATURELESS = "featureless"


@dataclass(frozen=True)
class PipelineParams:
    """Knobs of the feature computation stage (defaults are the reference setting)."""

    k_view: int | None = 5  # None selects every frame with nonzero visibility
    k_threshold: float = 0.2
    k_rounds: int = 10
    k_sample: int = 5
    levels: int = 3
    k_exp: float = 0.2
    seed: int = 0
    normalize_crops: bool = False  # L2-normalize each crop embedding before pooling

    def validate(self) -> None:
        if self.k_view is not None and self.k_view < 1:
            raise ParameterError("k_view must be >= 1 or None for all views")
        if self.k_threshold < 0:
            raise ParameterError("k_threshold must be >= 0")
        if self.k_rounds < 1 or self.k_sample < 1:
            raise ParameterError("k_rounds and k_sample must be >= 1")
        if self.levels < 1:
            raise ParameterError("levels must be >= 1")
        if self.k_exp < 0:
            raise ParameterError("k_exp must be >= 0")

    def to_dict(self) -> dict:
        return {"k_view": self.k_view, "k_threshold": self.k_threshold,
                "k_rounds": self.k_rounds, "k_sample": self.k_sample,
                "levels": self.levels, "k_exp": self.k_exp, "seed": self.seed,
                "normalize_crops": self.normalize_crops}

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineParams":
        return cls(**raw)


@dataclass
class MaskFeatureStore:
    """One aggregated embedding per mask, plus flags and provenance."""

    features: np.ndarray  # (M, D) float32
    flags: list[str]  # FLAG_VALID | FLAG_FEATURELESS per mask
    provenance: list[dict]
    params: PipelineParams
    scene_id: str
    snapshot: dict = field(default_factory=dict)  # full run configuration

    @property
    def mask_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def valid_mask_ids(self) -> list[int]:
        return [i for i, flag in enumerate(self.flags) if flag == FLAG_VALID]


def aggregate_mask_feature(crop_embeddings: list[np.ndarray] | np.ndarray,
                           normalize: bool = False) -> np.ndarray:
    """Entrywise arithmetic mean over all crop embeddings (one flat mean).

    With ``normalize`` each embedding is L2-normalized first (zero vectors are
    left as-is); the default pools raw vectors.
    """
    matrix = np.asarray(crop_embeddings, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ParameterError("need a nonempty list of equal-length embeddings")
    if normalize:
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = matrix / np.where(norms == 0, 1.0, norms)
    return matrix.mean(axis=0)


def aggregate_pointfeatures_baseline(per_point_features: np.ndarray,
                                     mask: InstanceMask3D) -> np.ndarray:
    """Mean of member-point feature rows (per-point baseline adaptation)."""
    member = mask.point_indices
    if member.size == 0:
        raise ParameterError(f"mask {mask.mask_id} has no member points")
    if per_point_features.shape[0] != mask.membership.shape[0]:
        raise ParameterError(
            f"feature rows {per_point_features.shape[0]} != point count {mask.membership.shape[0]}")
    return per_point_features[member].astype(np.float32).mean(axis=0)


class _DepthCache:
    """Per-run cache so each frame's depth PNG decodes once across masks."""

    def __init__(self, scene: Scene):
        self._frames = {f.index: f for f in scene.frames}
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def frame(self, index: int):
        return self._frames[index]

    def depth(self, index: int) -> np.ndarray:
        with self._lock:
            arr = self._cache.get(index)
        if arr is None:
            arr = self._frames[index].load_depth()
            with self._lock:
                self._cache[index] = arr
        return arr


def _mask_crop_records(mask: InstanceMask3D, scene: Scene, table: VisibilityTable,
                       params: PipelineParams, segmenter: SegmenterInterface | None,
                       depths: _DepthCache) -> tuple[list[CropRecord], dict]:
    """Crop records and provenance for one mask; empty records mean featureless."""
    provenance: dict = {"mask_id": mask.mask_id, "selected_frames": [],
                        "crops": [], "segmenter_scores": {}, "skipped_frames": []}
    if table.flagged[mask.mask_id]:
        return [], provenance
    selection = select_topk_views(table, mask.mask_id, params.k_view)
    provenance["selected_frames"] = list(selection.frame_indices)
    records: list[CropRecord] = []
    for frame_index in selection.frame_indices:
        frame = depths.frame(frame_index)
        try:
            pixels = project_mask_pixels(mask, frame, scene.cloud.points,
                                         params.k_threshold, depths.depth(frame_index))
        except FrameDegenerateError:
            logger.warning("mask %d: no usable pixels in frame %d, skipping",
                           mask.mask_id, frame_index)
            provenance["skipped_frames"].append(frame_index)
            continue
        intr = frame.intrinsics
        if frame.color_intrinsics is not None:
            pixels = transfer_pixels(pixels, intr, frame.color_intrinsics)
            intr = frame.color_intrinsics
        box1 = None
        if segmenter is not None:
            seed = derive_seed(params.seed, mask.mask_id, frame_index)
            try:
                refined = select_2d_mask(pixels, segmenter, params.k_rounds,
                                         params.k_sample, seed,
                                         image_path=frame.color_path)
                provenance["segmenter_scores"][str(frame_index)] = refined.score
                if refined.mask.any():
                    box1 = tight_bbox(refined, intr.width, intr.height)
            except SegmentationError as exc:
                logger.warning("mask %d frame %d: %s; falling back to projected points",
                               mask.mask_id, frame_index, exc)
        if box1 is None:
            box1 = tight_bbox(pixels, intr.width, intr.height)
        image_path = str(frame.color_path) if frame.color_path else ""
        for box in multiscale_crops(box1, params.levels, params.k_exp,
                                    intr.width, intr.height):
            records.append(CropRecord(mask_id=mask.mask_id, frame_index=frame_index,
                                      level=box.level, x1=box.x1, y1=box.y1,
                                      x2=box.x2, y2=box.y2, image_path=image_path))
            provenance["crops"].append({"frame_index": frame_index, "level": box.level,
                                        "x1": box.x1, "y1": box.y1,
                                        "x2": box.x2, "y2": box.y2})
    return records, provenance


def compute_crop_records(scene: Scene, masks: InstanceMaskSet, table: VisibilityTable,
                         params: PipelineParams,
                         segmenter: SegmenterInterface | None,
                         workers: int = 1) -> tuple[list[CropRecord], list[dict]]:
    """Crop records for every mask, ordered by mask id regardless of workers."""
    params.validate()
    depths = _DepthCache(scene)
    if workers <= 1:
        results = [_mask_crop_records(m, scene, table, params, segmenter, depths)
                   for m in masks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda m: _mask_crop_records(m, scene, table, params, segmenter, depths),
                masks))
    records: list[CropRecord] = []
    provenance: list[dict] = []
    for recs, prov in results:
        records.extend(recs)
        provenance.append(prov)
    return records, provenance


def compute_mask_features(scene: Scene, masks: InstanceMaskSet, table: VisibilityTable,
                          params: PipelineParams,
                          segmenter: SegmenterInterface | None,
                          provider: EmbeddingProviderInterface,
                          workers: int = 1,
                          checkpoint_path=None,
                          crop_records: list[CropRecord] | None = None,
                          crop_provenance: list[dict] | None = None) -> MaskFeatureStore:
    """Run the whole per-mask feature stage and assemble the store.

    Precomputed crop records (e.g. served from a cache) can be passed in to
    skip the projection/segmentation work. A provider failure aborts but a
    partial store is checkpointed first when a path is given.
    """
    if crop_records is None or crop_provenance is None:
        crop_records, crop_provenance = compute_crop_records(
            scene, masks, table, params, segmenter, workers)

    by_mask: dict[int, list[CropRecord]] = {}
    for rec in crop_records:
        by_mask.setdefault(rec.mask_id, []).append(rec)

    features = np.zeros((len(masks), provider.dim), dtype=np.float32)
    flags = [FLAG_FEATURELESS] * len(masks)
    done = 0
    try:
        for mask in masks:
            recs = by_mask.get(mask.mask_id, [])
            if recs:
                embeddings = provider.embed_crops(recs)
                features[mask.mask_id] = aggregate_mask_feature(
                    embeddings, normalize=params.normalize_crops)
                flags[mask.mask_id] = FLAG_VALID
            done += 1
    except ProviderError:
        if checkpoint_path is not None:
            partial = MaskFeatureStore(features=features, flags=flags,
                                       provenance=crop_provenance, params=params,
                                       scene_id=scene.scene_id)
            save_store(partial, checkpoint_path, partial=True)
            logger.error("provider failed after %d/%d masks; checkpoint at %s",
                         done, len(masks), checkpoint_path)
        raise

    for prov, flag in zip(crop_provenance, flags):
        prov["status"] = flag
    featureless = flags.count(FLAG_FEATURELESS)
    if featureless:
        logger.warning("%d mask(s) ended featureless", featureless)
    return MaskFeatureStore(features=features, flags=flags,
                            provenance=crop_provenance, params=params,
                            scene_id=scene.scene_id)


def save_store(store: MaskFeatureStore, stem, partial: bool = False) -> None:
    """Write <stem>.npy (float32 M x D), <stem>.json and <stem>.provenance.json."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.save(f"{stem}.npy", store.features.astype(np.float32))
    provenance_name = stem.name + ".provenance.json"
    with open(stem.parent / provenance_name, "w") as f:
        json.dump(store.provenance, f)
    manifest = {
        "version": STORE_FORMAT_VERSION,
        "scene_id": store.scene_id,
        "dim": store.dim,
        "mask_count": store.mask_count,
        "flags": store.flags,
        "params": store.params.to_dict(),
        "snapshot": store.snapshot,
        "provenance_file": provenance_name,
    }
    if partial:
        manifest["partial"] = True
    with open(f"{stem}.json", "w") as f:
        json.dump(manifest, f, indent=2)


def load_store(stem, expected_params: PipelineParams | None = None) -> MaskFeatureStore:
    """Load a store; wrong version or shape errors, a foreign snapshot only warns."""
    stem = Path(stem)
    manifest_path = Path(f"{stem}.json")
    if not manifest_path.is_file():
        raise StoreError(f"store manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != STORE_FORMAT_VERSION:
        raise StoreError(f"unsupported store version {manifest.get('version')}")
    try:
        features = np.load(f"{stem}.npy")
    except Exception as exc:
        raise StoreError(f"cannot read feature matrix: {exc}") from exc
    if features.ndim != 2 or features.shape != (manifest["mask_count"], manifest["dim"]):
        raise StoreError(
            f"feature matrix is {features.shape}, manifest says "
            f"({manifest['mask_count']}, {manifest['dim']})")
    if len(manifest["flags"]) != features.shape[0]:
        raise StoreError("flag list length disagrees with feature matrix")
    provenance_path = stem.parent / manifest["provenance_file"]
    provenance = []
    if provenance_path.is_file():
        with open(provenance_path) as f:
            provenance = json.load(f)
    params = PipelineParams.from_dict(manifest["params"])
    if expected_params is not None and params != expected_params:
        logger.warning("store at %s was built with different parameters: %s",
                       stem, params.to_dict())
    if manifest.get("partial"):
        logger.warning("store at %s is a partial checkpoint", stem)
    return MaskFeatureStore(features=features.astype(np.float32),
                            flags=list(manifest["flags"]),
                            provenance=provenance, params=params,
                            scene_id=manifest["scene_id"],
                            snapshot=manifest.get("snapshot", {}))
