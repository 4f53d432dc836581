"""Scene loading: point cloud, posed RGB-D frames, intrinsics, frame subsampling.

A scene directory is described by a :class:`SceneLayoutConfig` (JSON on disk)
naming file patterns for depth/color/pose files, the depth scale, the source
frame rate and the pose convention. Loaded scenes are immutable; depth images
are decoded lazily per frame.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError, SceneLoadError, SceneValidationError
from .ply import read_ply, write_ply

logger = logging.getLogger(__name__)

WORLD_TO_CAMERA = "world_to_camera"
CAMERA_TO_WORLD = "camera_to_world"


@dataclass(frozen=True)
class PointCloud:
    """3D points in meters, optional 8-bit RGB per point."""

    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray | None = None  # (N, 3) uint8

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def validate(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SceneValidationError(f"points must be (N, 3), got {self.points.shape}")
        if self.count < 1:
            raise SceneValidationError("point cloud is empty")
        if not np.isfinite(self.points).all():
            raise SceneValidationError("point cloud contains non-finite coordinates")
        if self.colors is not None and self.colors.shape != self.points.shape:
            raise SceneValidationError("per-point colors must be (N, 3)")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise SceneValidationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise SceneValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera pose, stored in world-to-camera convention."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    convention: str = WORLD_TO_CAMERA

    def validate(self, tolerance: float = 1e-6) -> None:
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise SceneValidationError("pose must be a 3x3 rotation and 3-vector translation")
        if not (np.isfinite(r).all() and np.isfinite(self.translation).all()):
            raise SceneValidationError("pose contains non-finite values")
        err = np.abs(r @ r.T - np.eye(3)).max()
        det = float(np.linalg.det(r))
        if err > tolerance or abs(det - 1.0) > max(tolerance, 1e-6):
            raise SceneValidationError(
                f"rotation not orthonormal within tolerance (|RR^T - I|={err:.3g}, det={det:.6f})")

    def matrix(self) -> np.ndarray:
        """3x4 [R|t] world-to-camera matrix."""
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


def pose_from_matrix(mat: np.ndarray, convention: str,
                     tolerance: float = 1e-6) -> CameraPose:
    """Build a world-to-camera pose from a 4x4 (or 3x4) matrix in either convention."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape == (4, 4):
        mat = mat[:3, :]
    if mat.shape != (3, 4):
        raise SceneValidationError(f"pose matrix must be 4x4 or 3x4, got {mat.shape}")
    pose = CameraPose(rotation=mat[:, :3], translation=mat[:, 3])
    pose.validate(tolerance)
    if convention == CAMERA_TO_WORLD:
        r_wc = pose.rotation.T
        t_wc = -r_wc @ pose.translation
        pose = CameraPose(rotation=r_wc, translation=t_wc)
    elif convention != WORLD_TO_CAMERA:
        raise ParameterError(f"unknown pose convention '{convention}'")
    return pose


@dataclass(frozen=True)
class Frame:
    """One posed RGB-D frame. Depth decodes lazily via :meth:`load_depth`."""

    index: int
    depth_path: Path
    pose: CameraPose
    intrinsics: CameraIntrinsics
    depth_scale: float
    color_path: Path | None = None
    color_intrinsics: CameraIntrinsics | None = None

    def load_depth(self) -> np.ndarray:
        """Decode the depth PNG to metric depth, shape (H, W) float32 meters."""
        arr = read_depth_png(self.depth_path)
        if arr.shape != (self.intrinsics.height, self.intrinsics.width):
            raise SceneValidationError(
                f"{self.depth_path}: depth is {arr.shape[::-1]}, intrinsics say "
                f"{self.intrinsics.width}x{self.intrinsics.height}")
        return arr.astype(np.float32) / np.float32(self.depth_scale)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    cloud: PointCloud
    frames: tuple[Frame, ...]

    def validate(self) -> None:
        self.cloud.validate()
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise SceneValidationError("frame indices must be strictly increasing")


@dataclass
class SceneLayoutConfig:
    """Declarative description of a scene directory.

    Patterns are relative to the scene root and may contain ``{index}`` (frame
    index) and ``{scene_id}`` placeholders.
    """

    point_cloud: str = "{scene_id}.ply"
    depth_pattern: str = "depth/{index}.png"
    pose_pattern: str = "pose/{index}.txt"
    color_pattern: str | None = "color/{index}.png"
    intrinsics_file: str = "intrinsics.txt"
    color_intrinsics_file: str | None = None
    depth_scale: float = 1000.0
    source_fps: float = 30.0
    pose_convention: str = WORLD_TO_CAMERA
    rotation_tolerance: float = 1e-6
    scene_id: str = "scene"

    @classmethod
    def from_file(cls, path) -> "SceneLayoutConfig":
        path = Path(path)
        if not path.is_file():
            raise SceneLoadError(f"scene layout config not found: {path}")
        with open(path) as f:
            raw = json.load(f)
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown scene layout keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "point_cloud": self.point_cloud,
            "depth_pattern": self.depth_pattern,
            "pose_pattern": self.pose_pattern,
            "color_pattern": self.color_pattern,
            "intrinsics_file": self.intrinsics_file,
            "color_intrinsics_file": self.color_intrinsics_file,
            "depth_scale": self.depth_scale,
            "source_fps": self.source_fps,
            "pose_convention": self.pose_convention,
            "rotation_tolerance": self.rotation_tolerance,
            "scene_id": self.scene_id,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def validate(self) -> None:
        if self.depth_scale <= 0:
            raise ParameterError("depth_scale must be positive")
        if self.source_fps <= 0:
            raise ParameterError("source_fps must be positive")
        if self.pose_convention not in (WORLD_TO_CAMERA, CAMERA_TO_WORLD):
            raise ParameterError(f"unknown pose convention '{self.pose_convention}'")
        if "{index}" not in self.depth_pattern or "{index}" not in self.pose_pattern:
            raise ParameterError("depth_pattern and pose_pattern must contain '{index}'")


def read_depth_png(path) -> np.ndarray:
    """Read a 16-bit grayscale PNG as raw integer depth units, shape (H, W)."""
    path = Path(path)
    if not path.is_file():
        raise SceneLoadError(f"depth image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise SceneValidationError(f"{path}: depth image must be single-channel")
    if arr.min() < 0:
        raise SceneValidationError(f"{path}: negative depth values")
    return arr


def write_depth_png(path, raw: np.ndarray) -> None:
    """Write raw integer depth units as a 16-bit grayscale PNG."""
    raw = np.asarray(raw)
    if raw.min() < 0 or raw.max() > np.iinfo(np.uint16).max:
        raise SceneValidationError("depth units out of uint16 range")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def _read_matrix_file(path, what: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise SceneLoadError(f"{what} file not found: {path}")
    try:
        mat = np.loadtxt(path, dtype=np.float64)
    except ValueError as exc:
        raise SceneValidationError(f"{path}: cannot parse {what} matrix: {exc}") from exc
    return np.atleast_2d(mat)


def _intrinsics_from_file(path, width: int, height: int) -> CameraIntrinsics:
    mat = _read_matrix_file(path, "intrinsics")
    if mat.shape not in ((3, 3), (4, 4)):
        raise SceneValidationError(f"{path}: intrinsics must be 3x3 or 4x4, got {mat.shape}")
    k = mat[:3, :3]
    intr = CameraIntrinsics(fx=float(k[0, 0]), fy=float(k[1, 1]),
                            cx=float(k[0, 2]), cy=float(k[1, 2]),
                            width=width, height=height)
    intr.validate()
    return intr


def _discover_frame_indices(root: Path, pattern: str, scene_id: str) -> list[int]:
    rel = pattern.replace("{scene_id}", scene_id)
    directory = (root / rel).parent
    name_pattern = Path(rel).name
    if not directory.is_dir():
        raise SceneLoadError(f"frame directory not found: {directory}")
    regex = re.compile("^" + re.escape(name_pattern).replace(r"\{index\}", r"(\d+)") + "$")
    indices = []
    for entry in directory.iterdir():
        m = regex.match(entry.name)
        if m:
            indices.append(int(m.group(1)))
    if not indices:
        raise SceneLoadError(f"no frames matching '{name_pattern}' in {directory}")
    return sorted(set(indices))


def _image_size(path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size  # (W, H)


def load_scene(root_path, config: SceneLayoutConfig) -> Scene:
    """Load and validate a scene directory per the layout config."""
    root = Path(root_path)
    if not root.is_dir():
        raise SceneLoadError(f"scene root not found: {root}")
    config.validate()
    sid = config.scene_id

    cloud_path = root / config.point_cloud.replace("{scene_id}", sid)
    points, colors = read_ply(cloud_path)
    cloud = PointCloud(points=points, colors=colors)
    cloud.validate()

    indices = _discover_frame_indices(root, config.depth_pattern, sid)

    first_depth = root / config.depth_pattern.replace("{scene_id}", sid).format(index=indices[0])
    if not first_depth.is_file():
        raise SceneLoadError(f"depth image not found: {first_depth}")
    width, height = _image_size(first_depth)

    intr = _intrinsics_from_file(root / config.intrinsics_file.replace("{scene_id}", sid),
                                 width, height)
    color_intr = None
    if config.color_intrinsics_file:
        cpath = root / config.color_intrinsics_file.replace("{scene_id}", sid)
        cw, ch = width, height
        if config.color_pattern:
            first_color = root / config.color_pattern.replace("{scene_id}", sid).format(index=indices[0])
            if first_color.is_file():
                cw, ch = _image_size(first_color)
        color_intr = _intrinsics_from_file(cpath, cw, ch)

    frames = []
    for idx in indices:
        depth_path = root / config.depth_pattern.replace("{scene_id}", sid).format(index=idx)
        pose_path = root / config.pose_pattern.replace("{scene_id}", sid).format(index=idx)
        mat = _read_matrix_file(pose_path, "pose")
        try:
            pose = pose_from_matrix(mat, config.pose_convention, config.rotation_tolerance)
        except SceneValidationError as exc:
            raise SceneValidationError(f"{pose_path}: {exc}") from exc
        w, h = _image_size(depth_path)
        if (w, h) != (width, height):
            raise SceneValidationError(
                f"{depth_path}: depth is {w}x{h}, expected {width}x{height}")
        color_path = None
        if config.color_pattern:
            cp = root / config.color_pattern.replace("{scene_id}", sid).format(index=idx)
            color_path = cp if cp.is_file() else None
        frames.append(Frame(index=idx, depth_path=depth_path, pose=pose,
                            intrinsics=intr, depth_scale=config.depth_scale,
                            color_path=color_path, color_intrinsics=color_intr))

    scene = Scene(scene_id=sid, cloud=cloud, frames=tuple(frames))
    scene.validate()
    logger.info("loaded scene '%s': %d points, %d frames (%dx%d)",
                sid, cloud.count, len(frames), width, height)
    return scene


def save_scene(scene: Scene, root_path, config: SceneLayoutConfig) -> None:
    """Write a scene back to disk in the layout the config describes.

    Poses are written in the config's declared convention; depth goes back to
    integer units at the configured scale.
    """
    root = Path(root_path)
    sid = config.scene_id
    cloud_path = root / config.point_cloud.replace("{scene_id}", sid)
    cloud_path.parent.mkdir(parents=True, exist_ok=True)
    write_ply(cloud_path, scene.cloud.points, scene.cloud.colors)

    intr = scene.frames[0].intrinsics if scene.frames else None
    if intr is not None:
        ipath = root / config.intrinsics_file.replace("{scene_id}", sid)
        ipath.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(ipath, intr.matrix(), fmt="%.17g")

    for frame in scene.frames:
        depth_path = root / config.depth_pattern.replace("{scene_id}", sid).format(index=frame.index)
        pose_path = root / config.pose_pattern.replace("{scene_id}", sid).format(index=frame.index)
        depth_path.parent.mkdir(parents=True, exist_ok=True)
        pose_path.parent.mkdir(parents=True, exist_ok=True)
        raw = np.round(frame.load_depth() * config.depth_scale)
        write_depth_png(depth_path, raw)
        r, t = frame.pose.rotation, frame.pose.translation
        if config.pose_convention == CAMERA_TO_WORLD:
            r, t = r.T, -r.T @ t
        mat = np.eye(4)
        mat[:3, :3], mat[:3, 3] = r, t
        np.savetxt(pose_path, mat, fmt="%.17g")


def subsample_frames(scene: Scene, source_rate: float, target_rate: float) -> Scene:
    """Keep every round(source/target)-th frame, always including the first."""
    if target_rate <= 0:
        raise ParameterError("target_rate must be positive")
    if target_rate > source_rate:
        raise ParameterError(
            f"target_rate {target_rate} exceeds source_rate {source_rate}")
    stride = int(source_rate / target_rate + 0.5)
    kept = scene.frames[::stride]
    return replace(scene, frames=kept)
