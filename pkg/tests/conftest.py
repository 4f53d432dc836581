import pytest

from .synthetic import build_scene_bundle


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    """One standard synthetic scene shared by read-only tests."""
    root = tmp_path_factory.mktemp("scene-std")
    return build_scene_bundle(root, seed=0, n_instances=4,
                              points_per_instance=120, n_frames=8)


@pytest.fixture(scope="session")
def bundle_small(tmp_path_factory):
    """A second, smaller scene with a different seed and camera-to-world poses."""
    root = tmp_path_factory.mktemp("scene-c2w")
    return build_scene_bundle(root, seed=7, n_instances=3,
                              points_per_instance=60, n_frames=6,
                              pose_convention="camera_to_world")
