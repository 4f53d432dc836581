"""Open-vocabulary features for 3D instance masks.

Given a scene point cloud, posed RGB-D frames and class-agnostic 3D instance
mask proposals, this package selects the frames where each mask is most
visible, refines a 2D mask per view, embeds multi-scale crops through a
pluggable encoder, and mean-pools everything into one queryable feature
vector per mask. Text-query retrieval, closed-vocabulary class assignment
and AP evaluation sit on top.
"""

from .errors import (EvaluationError, FrameDegenerateError, ParameterError,
                     PipelineError, ProposalFormatError, ProviderError,
                     SceneLoadError, SceneValidationError, SegmentationError,
                     SimilarityError, StageError, StoreError)
from .evaluation import (APReport, GroundTruth, Prediction, PredictionSet,
                         evaluate_ap, mask_iou, oracle_mask_mode,
                         subset_breakdown)
from .features import (MaskFeatureStore, PipelineParams,
                       aggregate_mask_feature, aggregate_pointfeatures_baseline,
                       compute_mask_features, load_store, save_store)
from .mask2d import (CropBox, CropRecord, Mask2D, OracleSegmenter,
                     multiscale_crops, project_mask_pixels, select_2d_mask,
                     tight_bbox)
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .proposals import (InstanceMask3D, InstanceMaskSet, dbscan_split,
                        ingest_proposals, save_proposals, split_all)
from .providers import (PrecomputedEmbeddingProvider, SidecarEmbeddingProvider,
                        SidecarSegmenter, SyntheticOneHotProvider,
                        SyntheticSegmenter)
from .query import (LabelEmbeddingTable, QueryResult, assign_classes,
                    cosine_similarity, export_similarity_ply, rank_instances)
from .scene import (CameraIntrinsics, CameraPose, Frame, PointCloud, Scene,
                    SceneLayoutConfig, load_scene, save_scene, subsample_frames)
from .visibility import (Projection2D, ViewSelection, VisibilityTable,
                         build_visibility_table, count_visible, in_fov,
                         is_unoccluded, project_point, select_topk_views)

__version__ = "0.1.0"
