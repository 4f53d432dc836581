"""Full pipeline driven through the file-protocol sidecar (stub backend).

Runs only when the sidecar package is installed; the acceptance suite never
depends on it.
"""

import threading

import numpy as np
import pytest

inference_sidecar = pytest.importorskip("inference_sidecar")

from inference_sidecar.backends import StubBackend  # noqa: E402
from inference_sidecar.server import SidecarServer  # noqa: E402

from maskfeat3d.features import FLAG_VALID  # noqa: E402
from maskfeat3d.pipeline import PipelineConfig, run_pipeline  # noqa: E402

from .synthetic import write_pipeline_config  # noqa: E402


@pytest.fixture
def live_server(tmp_path):
    server = SidecarServer(tmp_path / "req", tmp_path / "res",
                           StubBackend(dim=768))
    stop = threading.Event()
    thread = threading.Thread(target=server.serve,
                              kwargs={"poll_interval": 0.01, "stop_event": stop})
    thread.start()
    yield server
    stop.set()
    thread.join(timeout=5.0)


def _sidecar_config(bundle, tmp_path, live_server, name):
    dirs = {"request_dir": str(live_server.request_dir),
            "response_dir": str(live_server.response_dir)}
    path = write_pipeline_config(
        bundle, tmp_path / name, tmp_path / f"{name}.json",
        provider="sidecar",
        provider_options={**dirs, "dim": 768, "timeout": 30.0,
                          "poll_interval": 0.002},
        segmenter="sidecar",
        segmenter_options={**dirs, "timeout": 30.0, "poll_interval": 0.002},
        params={"k_view": 3, "k_threshold": 0.2, "k_rounds": 3,
                "k_sample": 5, "levels": 3, "k_exp": 0.2, "seed": 0},
        workers=4)
    return PipelineConfig.from_file(path)


def test_pipeline_through_sidecar(bundle, tmp_path, live_server):
    result = run_pipeline(_sidecar_config(bundle, tmp_path, live_server, "run1"))
    store = result.store
    assert store.dim == 768
    assert store.flags == [FLAG_VALID] * bundle.n_instances
    assert np.isfinite(store.features).all()
    assert store.features.any(axis=1).all()

    again = run_pipeline(_sidecar_config(bundle, tmp_path, live_server, "run2"))
    assert np.array_equal(store.features, again.store.features)
    assert store.provenance == again.store.provenance
