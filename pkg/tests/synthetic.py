"""Synthetic scene fixtures: blob instances, orbiting cameras, rendered RGB-D.

Depth and instance-id images are rendered by the brute-force z-buffer oracle,
then written through the package's own file formats so tests exercise the real
loaders end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from maskfeat3d.proposals import (InstanceMask3D, InstanceMaskSet,
                                  MaskProvenance, save_proposals)
from maskfeat3d.scene import (Scene, SceneLayoutConfig, load_scene,
                              write_depth_png)
from maskfeat3d.ply import write_ply

from . import oracles


@dataclass
class SceneBundle:
    root: Path
    layout: SceneLayoutConfig
    scene: Scene
    gt_masks: InstanceMaskSet
    instance_ids: np.ndarray  # (N,) int
    n_instances: int
    proposals_path: Path
    gt_labels_path: Path
    poses: list  # per frame: (rotation rows, translation) as nested lists
    intrinsics: tuple  # (fx, fy, cx, cy, width, height)
    depth_scale: float
    depth_images: list  # per frame: (H, W) float64 metric depth as rendered


def _normalize(v):
    return v / np.linalg.norm(v)


def look_at(eye, target):
    """World-to-camera rotation/translation for +z forward, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = _normalize(target - eye)
    hint = np.array([0.0, 1.0, 0.0])
    if abs(forward @ hint) > 0.9:
        hint = np.array([1.0, 0.0, 0.0])
    right = _normalize(np.cross(hint, forward))
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return rotation, translation


def build_scene_bundle(root: Path, seed: int = 0, n_instances: int = 4,
                       points_per_instance: int = 120, n_frames: int = 8,
                       width: int = 64, height: int = 48,
                       pose_convention: str = "world_to_camera",
                       scene_id: str | None = None) -> SceneBundle:
    root = Path(root)
    rng = np.random.default_rng(seed)
    scene_id = scene_id or f"synth{seed}"

    angles = np.linspace(0, 2 * np.pi, n_instances, endpoint=False)
    centers = np.stack([1.3 * np.cos(angles),
                        0.25 * rng.standard_normal(n_instances),
                        1.3 * np.sin(angles)], axis=1)
    points = []
    instance_ids = []
    for k in range(n_instances):
        blob = centers[k] + rng.normal(0.0, 0.12, size=(points_per_instance, 3))
        points.append(blob)
        instance_ids.extend([k] * points_per_instance)
    points = np.vstack(points).astype(np.float32)
    instance_ids = np.array(instance_ids, dtype=np.int64)

    fx = fy = 1.3 * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    depth_scale = 1000.0

    eyes = []
    targets = []
    for j in range(n_frames):
        theta = 2 * np.pi * j / n_frames
        if j % 2 == 0:
            eyes.append([5.0 * np.cos(theta), -2.0, 5.0 * np.sin(theta)])
            targets.append([0.0, 0.0, 0.0])
        else:
            k = (j // 2) % n_instances
            direction = _normalize(centers[k])
            eyes.append(list(centers[k] + direction * 2.8 + [0.0, -1.0, 0.0]))
            targets.append(list(centers[k]))

    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "pose").mkdir(exist_ok=True)
    (root / "color").mkdir(exist_ok=True)

    write_ply(root / f"{scene_id}.ply", points)
    k_mat = np.array([[fx, 0, cx, 0], [0, fy, cy, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
                     dtype=np.float64)
    np.savetxt(root / "intrinsics.txt", k_mat, fmt="%.17g")

    poses = []
    depth_images = []
    for j in range(n_frames):
        rotation, translation = look_at(eyes[j], targets[j])
        poses.append((rotation.tolist(), translation.tolist()))
        depth, label_img = oracles.zbuffer_render(
            points.tolist(), instance_ids.tolist(),
            rotation.tolist(), translation.tolist(),
            fx, fy, cx, cy, width, height)
        depth = np.array(depth, dtype=np.float64)
        depth_images.append(depth)
        write_depth_png(root / "depth" / f"{j}.png", np.round(depth * depth_scale))
        Image.fromarray(np.array(label_img, dtype=np.uint8), mode="L").save(
            root / "color" / f"{j}.png")
        mat = np.eye(4)
        mat[:3, :3], mat[:3, 3] = rotation, translation
        if pose_convention == "camera_to_world":
            inv = np.eye(4)
            inv[:3, :3] = rotation.T
            inv[:3, 3] = -rotation.T @ translation
            mat = inv
        np.savetxt(root / "pose" / f"{j}.txt", mat, fmt="%.17g")

    layout = SceneLayoutConfig(point_cloud="{scene_id}.ply",
                               depth_pattern="depth/{index}.png",
                               pose_pattern="pose/{index}.txt",
                               color_pattern="color/{index}.png",
                               intrinsics_file="intrinsics.txt",
                               depth_scale=depth_scale, source_fps=30.0,
                               pose_convention=pose_convention,
                               scene_id=scene_id)
    layout.save(root / "layout.json")
    scene = load_scene(root, layout)

    gt = tuple(
        InstanceMask3D(membership=instance_ids == k, mask_id=k,
                       provenance=MaskProvenance(external_id=k))
        for k in range(n_instances))
    gt_masks = InstanceMaskSet(masks=gt, scene_id=scene_id)
    proposals_path = root / "proposals.npy"
    save_proposals(gt_masks, proposals_path)
    gt_labels_path = root / "gt_labels.json"
    with open(gt_labels_path, "w") as f:
        json.dump({"labels": [f"instance_{k}" for k in range(n_instances)]}, f)

    return SceneBundle(root=root, layout=layout, scene=scene, gt_masks=gt_masks,
                       instance_ids=instance_ids, n_instances=n_instances,
                       proposals_path=proposals_path,
                       gt_labels_path=gt_labels_path, poses=poses,
                       intrinsics=(fx, fy, cx, cy, width, height),
                       depth_scale=depth_scale, depth_images=depth_images)


def write_pipeline_config(bundle: SceneBundle, out_dir: Path, path: Path,
                          **overrides) -> Path:
    """Pipeline config JSON for CLI-level tests against a bundle."""
    config = {
        "scene_root": str(bundle.root),
        "scene_layout": bundle.layout.to_dict(),
        "proposals": str(bundle.proposals_path),
        "target_fps": None,
        "split_proposals": False,
        "params": {"k_view": 5, "k_threshold": 0.2, "k_rounds": 10,
                   "k_sample": 5, "levels": 3, "k_exp": 0.2, "seed": 0},
        "use_2d_mask": True,
        "use_multiscale": True,
        "segmenter": "synthetic",
        "provider": "synthetic",
        "provider_options": {"num_labels": bundle.n_instances},
        "output_dir": str(out_dir),
        "workers": 1,
    }
    config.update(overrides)
    with open(path, "w") as f:
        json.dump(config, f, indent=2)
    return path
