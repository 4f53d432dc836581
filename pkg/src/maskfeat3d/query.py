"""Text-query retrieval over the mask feature store.

Similarity is cosine, so rankings are invariant to positive rescaling of
either side. Closed-vocabulary class assignment embeds every category through
a prompt template and takes the argmax per mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, SimilarityError, StoreError
from .features import FLAG_VALID, MaskFeatureStore
from .ply import write_ply
from .proposals import InstanceMaskSet
from .providers import EmbeddingProviderInterface
from .scene import Scene

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_TEMPLATE = "a {} in a scene"
UNASSIGNED_LABEL = "unassigned"
NEUTRAL_COLOR = (128, 128, 128)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise SimilarityError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class QueryResult:
    query_text: str
    ranking: tuple[tuple[int, float], ...]  # (mask_id, similarity), best first

    def mask_ids(self) -> list[int]:
        return [mask_id for mask_id, _ in self.ranking]


def _valid_similarities(store: MaskFeatureStore, query_vec: np.ndarray) -> list[tuple[int, float]]:
    query_vec = np.asarray(query_vec, dtype=np.float64)
    qn = np.linalg.norm(query_vec)
    if qn == 0:
        raise SimilarityError("query vector has zero norm")
    if query_vec.shape != (store.dim,):
        raise ParameterError(f"query dim {query_vec.shape} != store dim {store.dim}")
    sims = []
    for mask_id in store.valid_mask_ids():
        feature = store.features[mask_id].astype(np.float64)
        fn = np.linalg.norm(feature)
        if fn == 0:
            logger.warning("valid mask %d has zero-norm feature, skipping", mask_id)
            continue
        sims.append((mask_id, float(np.dot(feature, query_vec) / (fn * qn))))
    return sims


def rank_instances(store: MaskFeatureStore, query_vec: np.ndarray,
                   top_n: int = 10, query_text: str = "") -> QueryResult:
    """Valid masks sorted by similarity descending, mask-id tiebreak, top-n kept."""
    if top_n < 1:
        raise ParameterError("top_n must be >= 1")
    sims = _valid_similarities(store, query_vec)
    sims.sort(key=lambda pair: (-pair[1], pair[0]))
    return QueryResult(query_text=query_text, ranking=tuple(sims[:top_n]))


@dataclass
class LabelEmbeddingTable:
    """Prompt-templated text embedding per category label."""

    labels: list[str]
    embeddings: np.ndarray  # (L, D)
    template: str = DEFAULT_PROMPT_TEMPLATE

    @classmethod
    def from_provider(cls, labels: list[str], provider: EmbeddingProviderInterface,
                      template: str = DEFAULT_PROMPT_TEMPLATE) -> "LabelEmbeddingTable":
        prompts = [template.format(label) for label in labels]
        return cls(labels=list(labels), embeddings=provider.embed_text(prompts),
                   template=template)

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.save(f"{stem}.npy", self.embeddings.astype(np.float32))
        with open(f"{stem}.json", "w") as f:
            json.dump({"labels": self.labels, "template": self.template}, f, indent=2)

    @classmethod
    def load(cls, stem) -> "LabelEmbeddingTable":
        stem = Path(stem)
        meta_path = Path(f"{stem}.json")
        if not meta_path.is_file():
            raise StoreError(f"label table metadata not found: {meta_path}")
        with open(meta_path) as f:
            meta = json.load(f)
        embeddings = np.load(f"{stem}.npy")
        if embeddings.shape[0] != len(meta["labels"]):
            raise StoreError("label table rows disagree with label list")
        return cls(labels=meta["labels"], embeddings=embeddings,
                   template=meta.get("template", DEFAULT_PROMPT_TEMPLATE))


def assign_classes(store: MaskFeatureStore, labels: LabelEmbeddingTable) -> list[str]:
    """Argmax-similarity label per mask; ties go to the earlier label in the list."""
    if not labels.labels:
        raise ParameterError("label table is empty")
    if labels.embeddings.shape[1] != store.dim:
        raise ParameterError(
            f"label dim {labels.embeddings.shape[1]} != store dim {store.dim}")
    lab = labels.embeddings.astype(np.float64)
    lab_norms = np.linalg.norm(lab, axis=1)
    if (lab_norms == 0).any():
        raise SimilarityError("label table contains a zero embedding")
    assignments = []
    for mask_id in range(store.mask_count):
        if store.flags[mask_id] != FLAG_VALID:
            assignments.append(UNASSIGNED_LABEL)
            continue
        feature = store.features[mask_id].astype(np.float64)
        fn = np.linalg.norm(feature)
        if fn == 0:
            assignments.append(UNASSIGNED_LABEL)
            continue
        sims = lab @ feature / (lab_norms * fn)
        assignments.append(labels.labels[int(np.argmax(sims))])
    return assignments


def similarity_colormap(t: float) -> tuple[int, int, int]:
    """Fixed blue-to-red ramp over t in [0, 1]."""
    t = min(max(t, 0.0), 1.0)
    return (int(round(255 * t)), 0, int(round(255 * (1.0 - t))))


def export_similarity_ply(scene: Scene, masks: InstanceMaskSet,
                          result: QueryResult, path) -> None:
    """Color each point by its best covering mask's similarity; others neutral gray.

    Scores are min-max normalized over the result (a single mask normalizes
    to 1). Points inside several returned masks take the highest similarity.
    """
    n = scene.cloud.count
    colors = np.tile(np.array(NEUTRAL_COLOR, dtype=np.uint8), (n, 1))
    if result.ranking:
        scores = np.array([s for _, s in result.ranking], dtype=np.float64)
        lo, hi = scores.min(), scores.max()
        best = np.full(n, -np.inf)
        best_t = np.zeros(n)
        covered = np.zeros(n, dtype=bool)
        for mask_id, score in result.ranking:
            t = 1.0 if hi == lo else (score - lo) / (hi - lo)
            member = masks[mask_id].point_indices
            take = score > best[member]
            idx = member[take]
            best[idx] = score
            best_t[idx] = t
            covered[idx] = True
        for i in np.flatnonzero(covered):
            colors[i] = similarity_colormap(best_t[i])
    write_ply(path, scene.cloud.points, colors)
