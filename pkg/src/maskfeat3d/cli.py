"""Command-line entry points.

Subcommands:
  run              execute the full pipeline from a JSON config
  query            rank masks in a feature store against a text query
  evaluate         AP evaluation of labeled predictions against ground truth
  export-heatmap   write a similarity-colored PLY for a query
  split-proposals  ingest proposals and write the DBSCAN-split mask set

``run`` exits 0 on success; stage failures map to distinct exit codes
(config 2, scene 3, proposals 4, visibility 5, mask2d 6, features 7).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import PipelineError, StageError
from .evaluation import (DEFAULT_THRESHOLDS, bundled_scannet200_subsets,
                         evaluate_ap, load_ground_truth, load_prediction_set,
                         load_subset_map, subset_breakdown)
from .features import load_store
from .pipeline import (STAGE_EXIT_CODES, PipelineConfig, build_provider,
                       run_pipeline)
from .proposals import ingest_proposals, save_proposals, split_all
from .query import export_similarity_ply, rank_instances
from .scene import load_scene, subsample_frames

def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        config.params = replace(config.params, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        config.workers = args.workers
    return config


def _load_masks_for_config(config: PipelineConfig):
    layout = config.layout()
    scene = load_scene(config.scene_root, layout)
    if config.target_fps is not None:
        scene = subsample_frames(scene, layout.source_fps, config.target_fps)
    masks = ingest_proposals(config.proposals, scene)
    if config.split_proposals:
        masks = split_all(masks, scene.cloud, config.dbscan_eps,
                          config.dbscan_min_points)
    return scene, masks


def _query_vector(args, config: PipelineConfig | None) -> np.ndarray:
    if args.text_embedding:
        vec = np.load(args.text_embedding)
        return vec.reshape(-1) if vec.ndim == 2 and vec.shape[0] == 1 else vec
    if not args.text:
        raise PipelineError("provide --text or --text-embedding")
    if config is None:
        raise PipelineError("embedding a text query needs --config for the provider")
    provider = build_provider(config)
    return provider.embed_text([args.text])[0]


def cmd_run(args) -> int:
    try:
        config = _load_config(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES["config"]
    try:
        result = run_pipeline(config)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(exc.stage, 1)
    for line in result.stage_log:
        print(line)
    print(f"feature store: {result.store_stem}")
    return 0


def cmd_query(args) -> int:
    config = PipelineConfig.from_file(args.config) if args.config else None
    store_stem = args.store or (Path(config.output_dir) / "features" if config else None)
    if store_stem is None:
        print("error: provide --store or --config", file=sys.stderr)
        return 2
    store = load_store(store_stem)
    query_vec = _query_vector(args, config)
    result = rank_instances(store, query_vec, top_n=args.top_n,
                            query_text=args.text or "")
    for rank, (mask_id, score) in enumerate(result.ranking, start=1):
        print(f"{rank:3d}  mask {mask_id:4d}  similarity {score:+.4f}")
    if args.export_ply:
        if config is None:
            print("error: --export-ply needs --config to load the scene",
                  file=sys.stderr)
            return 2
        scene, masks = _load_masks_for_config(config)
        export_similarity_ply(scene, masks, result, args.export_ply)
        print(f"heatmap written to {args.export_ply}")
    return 0


def cmd_evaluate(args) -> int:
    gt_matrix = np.load(args.ground_truth, mmap_mode="r")
    n_points = gt_matrix.shape[0]
    gts = load_ground_truth(args.ground_truth, args.ground_truth_labels, n_points)
    preds = load_prediction_set(args.predictions, args.prediction_labels, n_points)
    thresholds = DEFAULT_THRESHOLDS
    if args.thresholds:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    report = evaluate_ap(preds, gts, thresholds)
    if args.subset_map:
        if args.subset_map == "scannet200":
            subset_map = bundled_scannet200_subsets()
        else:
            subset_map = load_subset_map(args.subset_map)
        report.subsets = subset_breakdown(report, subset_map)
    print(report.format_table())
    if args.report:
        report.save_json(args.report)
        print(f"report written to {args.report}")
    return 0


def cmd_export_heatmap(args) -> int:
    args.export_ply = args.output
    return cmd_query(args)


def cmd_split_proposals(args) -> int:
    config = _load_config(args)
    scene, masks = _load_masks_for_config(config)
    save_proposals(masks, args.output)
    print(f"{len(masks)} mask(s) written to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskfeat3d",
        description="Per-mask open-vocabulary features for 3D instance masks")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--workers", type=int, help="override the worker count")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("query", help="rank masks against a text query")
    p.add_argument("--store", help="feature store stem (default: from config)")
    p.add_argument("--config", help="pipeline config (provider + scene source)")
    p.add_argument("--text", help="query text")
    p.add_argument("--text-embedding", help=".npy query vector instead of --text")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--export-ply", help="write a similarity heatmap PLY")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="AP evaluation against ground truth")
    p.add_argument("--predictions", required=True, help="prediction masks .npy")
    p.add_argument("--prediction-labels", required=True, help="label/confidence JSON")
    p.add_argument("--ground-truth", required=True, help="ground-truth masks .npy")
    p.add_argument("--ground-truth-labels", required=True, help="label JSON")
    p.add_argument("--subset-map",
                   help="label -> subset JSON, or 'scannet200' for the bundled map")
    p.add_argument("--thresholds", help="comma-separated IoU thresholds")
    p.add_argument("--report", help="write the report JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-heatmap", help="similarity heatmap PLY for a query")
    p.add_argument("--store", help="feature store stem (default: from config)")
    p.add_argument("--config", required=True)
    p.add_argument("--text")
    p.add_argument("--text-embedding")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("split-proposals", help="DBSCAN-split proposals to a new file")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True, help="output .npy path")
    p.set_defaults(func=cmd_split_proposals)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
