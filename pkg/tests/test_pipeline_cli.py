import json
import logging

import numpy as np
import pytest

from maskfeat3d.cli import main
from maskfeat3d.errors import StageError
from maskfeat3d.pipeline import PipelineConfig, run_pipeline
from maskfeat3d.ply import read_ply

from .synthetic import write_pipeline_config


def _config(bundle, tmp_path, name="run", **overrides) -> PipelineConfig:
    out_dir = tmp_path / name
    path = write_pipeline_config(bundle, out_dir, tmp_path / f"{name}.json",
                                 **overrides)
    return PipelineConfig.from_file(path)


def test_run_pipeline_end_to_end(bundle, tmp_path):
    config = _config(bundle, tmp_path)
    result = run_pipeline(config)
    assert result.store.mask_count == bundle.n_instances
    assert result.store.dim == bundle.n_instances
    assert (tmp_path / "run" / "features.npy").is_file()
    assert (tmp_path / "run" / "features.json").is_file()
    assert result.crop_manifest.is_file()
    assert result.store.snapshot["use_2d_mask"] is True


def test_rerun_served_from_cache(bundle, tmp_path, caplog):
    config = _config(bundle, tmp_path)
    run_pipeline(config)
    with caplog.at_level(logging.INFO):
        result = run_pipeline(config)
    assert any("cache hit" in line for line in result.stage_log)
    assert any("served from cache" in r.message for r in caplog.records)


def test_identical_runs_bit_identical(bundle, tmp_path):
    a = run_pipeline(_config(bundle, tmp_path, name="a"))
    b = run_pipeline(_config(bundle, tmp_path, name="b"))
    assert np.array_equal(a.store.features, b.store.features)
    assert a.store.flags == b.store.flags


def test_worker_count_does_not_change_store(bundle, tmp_path):
    stores = []
    for name, workers in (("w1", 1), ("w4", 4), ("w16", 16)):
        result = run_pipeline(_config(bundle, tmp_path, name=name, workers=workers))
        stores.append(result.store)
    for other in stores[1:]:
        assert np.array_equal(stores[0].features, other.features)
        assert stores[0].provenance == other.provenance


def test_missing_proposals_is_proposal_stage_error(bundle, tmp_path):
    config = _config(bundle, tmp_path, proposals=str(tmp_path / "nope.npy"))
    with pytest.raises(StageError) as err:
        run_pipeline(config)
    assert err.value.stage == "proposals"


def test_subsampling_from_config(bundle, tmp_path):
    config = _config(bundle, tmp_path, target_fps=15.0)  # stride 2 over 8 frames
    result = run_pipeline(config)
    assert len(result.scene.frames) == 4
    assert [f.index for f in result.scene.frames] == [0, 2, 4, 6]


def test_store_records_ablation_snapshot(bundle, tmp_path):
    config = _config(bundle, tmp_path, use_2d_mask=False, use_multiscale=False,
                     segmenter="none")
    result = run_pipeline(config)
    snap = result.store.snapshot
    assert snap["use_2d_mask"] is False
    assert snap["use_multiscale"] is False
    assert snap["params"]["levels"] == 1
    # single level means k_view * 1 crops per mask
    for prov in result.store.provenance:
        assert len(prov["crops"]) == len(prov["selected_frames"])


# ---------------------------------------------------------------------- CLI

def test_cli_run_and_query(bundle, tmp_path, capsys):
    config_path = write_pipeline_config(bundle, tmp_path / "out",
                                        tmp_path / "cfg.json")
    assert main(["run", "--config", str(config_path)]) == 0
    out = capsys.readouterr().out
    assert "feature store" in out

    assert main(["query", "--config", str(config_path),
                 "--text", "instance_2", "--top-n", "3"]) == 0
    out = capsys.readouterr().out
    first = out.strip().splitlines()[0]
    assert "mask    2" in first


def test_cli_query_with_embedding_and_ply(bundle, tmp_path, capsys):
    config_path = write_pipeline_config(bundle, tmp_path / "out",
                                        tmp_path / "cfg.json")
    assert main(["run", "--config", str(config_path)]) == 0
    capsys.readouterr()
    vec = np.zeros(bundle.n_instances, dtype=np.float32)
    vec[1] = 1.0
    np.save(tmp_path / "query.npy", vec)
    ply_path = tmp_path / "heat.ply"
    assert main(["query", "--config", str(config_path),
                 "--text-embedding", str(tmp_path / "query.npy"),
                 "--export-ply", str(ply_path)]) == 0
    points, colors = read_ply(ply_path)
    assert points.shape[0] == bundle.scene.cloud.count
    assert colors is not None


def test_cli_export_heatmap(bundle, tmp_path, capsys):
    config_path = write_pipeline_config(bundle, tmp_path / "out",
                                        tmp_path / "cfg.json")
    assert main(["run", "--config", str(config_path)]) == 0
    capsys.readouterr()
    ply_path = tmp_path / "hm.ply"
    assert main(["export-heatmap", "--config", str(config_path),
                 "--text", "instance_0", "--output", str(ply_path)]) == 0
    assert ply_path.is_file()


def test_cli_run_missing_proposals_exit_code(bundle, tmp_path, capsys):
    config_path = write_pipeline_config(bundle, tmp_path / "out",
                                        tmp_path / "cfg.json",
                                        proposals=str(tmp_path / "missing.npy"))
    assert main(["run", "--config", str(config_path)]) == 4
    assert "proposals" in capsys.readouterr().err


def test_cli_evaluate(bundle, tmp_path, capsys):
    n = bundle.scene.cloud.count
    matrix = np.zeros((n, 2), dtype=np.uint8)
    matrix[:8, 0] = 1
    matrix[8:20, 1] = 1
    np.save(tmp_path / "gt.npy", matrix)
    np.save(tmp_path / "preds.npy", matrix)
    with open(tmp_path / "gt_labels.json", "w") as f:
        json.dump({"labels": ["chair", "table"]}, f)
    with open(tmp_path / "pred_labels.json", "w") as f:
        json.dump({"labels": ["chair", "table"], "confidences": [1.0, 1.0]}, f)
    with open(tmp_path / "subsets.json", "w") as f:
        json.dump({"chair": "head", "table": "tail"}, f)
    report_path = tmp_path / "report.json"
    code = main(["evaluate",
                 "--predictions", str(tmp_path / "preds.npy"),
                 "--prediction-labels", str(tmp_path / "pred_labels.json"),
                 "--ground-truth", str(tmp_path / "gt.npy"),
                 "--ground-truth-labels", str(tmp_path / "gt_labels.json"),
                 "--subset-map", str(tmp_path / "subsets.json"),
                 "--report", str(report_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "100.0" in out
    with open(report_path) as f:
        saved = json.load(f)
    assert saved["ap"] == 1.0
    assert saved["subsets"] == {"head": 1.0, "tail": 1.0}


def test_cli_split_proposals(bundle, tmp_path, capsys):
    config_path = write_pipeline_config(bundle, tmp_path / "out",
                                        tmp_path / "cfg.json",
                                        split_proposals=True)
    out_npy = tmp_path / "split.npy"
    assert main(["split-proposals", "--config", str(config_path),
                 "--output", str(out_npy)]) == 0
    assert out_npy.is_file()
    matrix = np.load(out_npy)
    assert matrix.shape[0] == bundle.scene.cloud.count
    assert matrix.shape[1] == bundle.n_instances  # blobs are already contiguous


def test_cli_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    with open(path, "w") as f:
        json.dump({"segmenter": "warp-drive"}, f)
    assert main(["run", "--config", str(path)]) == 2
