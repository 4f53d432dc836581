"""End-to-end orchestration: scene -> proposals -> visibility -> crops -> features.

One JSON config drives a run. Stages cache their outputs under a content hash
of their semantic inputs, so unchanged reruns are served from cache and
parameter sweeps only recompute what changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, StageError
from .features import (MaskFeatureStore, PipelineParams, compute_crop_records,
                       compute_mask_features, save_store)
from .mask2d import read_crop_manifest, write_crop_manifest
from .proposals import InstanceMaskSet, ingest_proposals, split_all
from .providers import (PrecomputedEmbeddingProvider, SidecarEmbeddingProvider,
                        SidecarSegmenter, SyntheticOneHotProvider,
                        SyntheticSegmenter)
from .scene import Scene, SceneLayoutConfig, load_scene, subsample_frames
from .visibility import (build_visibility_table, load_visibility_table,
                         save_visibility_table)

logger = logging.getLogger(__name__)

DEFAULT_DBSCAN_EPS = 0.95
DEFAULT_DBSCAN_MIN_POINTS = 1
DEFAULT_TARGET_FPS = 3.0

STAGE_EXIT_CODES = {
    "config": 2,
    "scene": 3,
    "proposals": 4,
    "visibility": 5,
    "mask2d": 6,
    "features": 7,
}


@dataclass
class PipelineConfig:
    """Everything one run needs; defaults are the reference hyperparameters."""

    scene_root: str = "."
    scene_layout: dict = field(default_factory=dict)
    proposals: str | None = None
    target_fps: float | None = DEFAULT_TARGET_FPS
    split_proposals: bool = True
    dbscan_eps: float = DEFAULT_DBSCAN_EPS
    dbscan_min_points: int = DEFAULT_DBSCAN_MIN_POINTS
    params: PipelineParams = field(default_factory=PipelineParams)
    use_2d_mask: bool = True
    use_multiscale: bool = True
    segmenter: str = "none"  # none | synthetic | sidecar
    segmenter_options: dict = field(default_factory=dict)
    provider: str = "synthetic"  # synthetic | precomputed | sidecar
    provider_options: dict = field(default_factory=dict)
    output_dir: str = "out"
    cache_dir: str | None = None
    workers: int = 1

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ParameterError(f"pipeline config not found: {path}")
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "PipelineConfig":
        raw = dict(raw)
        params = PipelineParams.from_dict(raw.pop("params", {}) or {})
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(params=params, **raw)
        if base_dir is not None:
            cfg.scene_root = str((base_dir / cfg.scene_root).resolve())
            if cfg.proposals:
                cfg.proposals = str((base_dir / cfg.proposals).resolve())
            cfg.output_dir = str((base_dir / cfg.output_dir).resolve())
            if cfg.cache_dir:
                cfg.cache_dir = str((base_dir / cfg.cache_dir).resolve())
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.params.validate()
        if self.segmenter not in ("none", "synthetic", "sidecar"):
            raise ParameterError(f"unknown segmenter kind '{self.segmenter}'")
        if self.provider not in ("synthetic", "precomputed", "sidecar"):
            raise ParameterError(f"unknown provider kind '{self.provider}'")
        if self.use_2d_mask and self.segmenter == "none":
            logger.info("2D-mask refinement requested but no segmenter configured; "
                        "projected-point boxes will be used")
        if self.dbscan_eps <= 0 or self.dbscan_min_points < 1:
            raise ParameterError("invalid DBSCAN parameters")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")

    def effective_params(self) -> PipelineParams:
        """Parameters after applying the ablation toggles."""
        params = self.params
        if not self.use_multiscale and params.levels != 1:
            params = PipelineParams(**{**params.to_dict(), "levels": 1})
        return params

    def layout(self) -> SceneLayoutConfig:
        return SceneLayoutConfig(**self.scene_layout) if self.scene_layout else SceneLayoutConfig()

    def snapshot(self) -> dict:
        """Configuration snapshot recorded next to the feature store."""
        return {
            "params": self.effective_params().to_dict(),
            "use_2d_mask": self.use_2d_mask,
            "use_multiscale": self.use_multiscale,
            "segmenter": self.segmenter if self.use_2d_mask else "none",
            "provider": self.provider,
            "target_fps": self.target_fps,
            "split_proposals": self.split_proposals,
            "dbscan_eps": self.dbscan_eps,
            "dbscan_min_points": self.dbscan_min_points,
        }


def build_provider(config: PipelineConfig):
    opts = dict(config.provider_options)
    if config.provider == "synthetic":
        return SyntheticOneHotProvider(num_labels=int(opts.get("num_labels", 16)))
    if config.provider == "precomputed":
        return PrecomputedEmbeddingProvider(**opts)
    return SidecarEmbeddingProvider(**opts)


def build_segmenter(config: PipelineConfig):
    if not config.use_2d_mask or config.segmenter == "none":
        return None
    opts = dict(config.segmenter_options)
    if config.segmenter == "synthetic":
        return SyntheticSegmenter()
    return SidecarSegmenter(**opts)


def _content_key(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _mask_set_digest(masks: InstanceMaskSet) -> str:
    h = hashlib.sha256()
    for mask in masks:
        h.update(np.packbits(mask.membership).tobytes())
    return h.hexdigest()[:16]


@dataclass
class PipelineResult:
    store: MaskFeatureStore
    store_stem: Path
    scene: Scene
    masks: InstanceMaskSet
    crop_manifest: Path
    stage_log: list[str]


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Execute every stage; raises StageError naming the failing stage."""
    config.validate()
    out_dir = Path(config.output_dir)
    cache_dir = Path(config.cache_dir) if config.cache_dir else out_dir / "cache"
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir.mkdir(parents=True, exist_ok=True)
    stage_log: list[str] = []
    params = config.effective_params()

    try:
        layout = config.layout()
        scene = load_scene(config.scene_root, layout)
        if config.target_fps is not None:
            scene = subsample_frames(scene, layout.source_fps, config.target_fps)
        stage_log.append(f"scene: {scene.cloud.count} points, {len(scene.frames)} frames")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("scene", exc) from exc

    try:
        if not config.proposals:
            raise ParameterError("config lacks a proposals path")
        masks = ingest_proposals(config.proposals, scene)
        if config.split_proposals:
            masks = split_all(masks, scene.cloud, config.dbscan_eps,
                              config.dbscan_min_points)
        stage_log.append(f"proposals: {len(masks)} mask(s)")
    except Exception as exc:
        raise StageError("proposals", exc) from exc

    try:
        mask_digest = _mask_set_digest(masks)
        vis_key = _content_key(scene.scene_id,
                               [f.index for f in scene.frames],
                               [str(f.depth_path) for f in scene.frames],
                               mask_digest, params.k_threshold)
        vis_stem = cache_dir / f"visibility-{vis_key}"
        if Path(f"{vis_stem}.json").is_file():
            table = load_visibility_table(vis_stem)
            stage_log.append(f"visibility: cache hit ({vis_key})")
            logger.info("visibility stage served from cache: %s", vis_stem)
        else:
            table = build_visibility_table(masks, scene, params.k_threshold)
            save_visibility_table(table, vis_stem)
            stage_log.append(f"visibility: computed ({vis_key})")
    except Exception as exc:
        raise StageError("visibility", exc) from exc

    try:
        segmenter = build_segmenter(config)
        crop_key = _content_key(vis_key, params.to_dict(), config.use_2d_mask,
                                config.segmenter if segmenter else "none")
        crops_path = cache_dir / f"crops-{crop_key}.jsonl"
        prov_path = cache_dir / f"crops-{crop_key}.provenance.json"
        if crops_path.is_file() and prov_path.is_file():
            records = read_crop_manifest(crops_path)
            with open(prov_path) as f:
                provenance = json.load(f)
            stage_log.append(f"mask2d: cache hit ({crop_key})")
            logger.info("crop stage served from cache: %s", crops_path)
        else:
            records, provenance = compute_crop_records(
                scene, masks, table, params, segmenter, config.workers)
            write_crop_manifest(records, crops_path)
            with open(prov_path, "w") as f:
                json.dump(provenance, f)
            stage_log.append(f"mask2d: {len(records)} crop(s) ({crop_key})")
        manifest_out = out_dir / "crops.jsonl"
        write_crop_manifest(records, manifest_out)
    except Exception as exc:
        raise StageError("mask2d", exc) from exc

    try:
        provider = build_provider(config)
        store_stem = out_dir / "features"
        store = compute_mask_features(
            scene, masks, table, params, segmenter, provider,
            workers=config.workers,
            checkpoint_path=out_dir / "features.checkpoint",
            crop_records=records, crop_provenance=provenance)
        store.snapshot = config.snapshot()
        save_store(store, store_stem)
        snapshot_path = out_dir / "run_config.json"
        with open(snapshot_path, "w") as f:
            json.dump(config.snapshot(), f, indent=2)
        stage_log.append(f"features: {store.mask_count} mask feature(s), dim {store.dim}")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("features", exc) from exc

    for line in stage_log:
        logger.info("stage %s", line)
    return PipelineResult(store=store, store_stem=store_stem, scene=scene,
                          masks=masks, crop_manifest=manifest_out,
                          stage_log=stage_log)
