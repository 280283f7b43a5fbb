from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.errors import EmptyGallery, InvalidParameter, KExceedsGallery, ShapeMismatch
from app.models import GeometryReport
from app.services.numkernel import DenseMatrix, as_matrix, cosine_similarity_matrix, l2_normalize_rows, row_norms

QUERY_CHUNK = 512


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    gallery: DenseMatrix
    gallery_labels: np.ndarray
    metric: str = "cosine"

    @classmethod
    def build(cls, raw_gallery, gallery_labels) -> "RetrievalIndex":
        gallery = as_matrix(raw_gallery, "gallery")
        labels = np.asarray(gallery_labels).astype(np.int64)
        if labels.shape != (gallery.shape[0],):
            raise ShapeMismatch("gallery labels must align with gallery rows")
        if gallery.shape[0] == 0:
            return cls(gallery, labels)
        return cls(l2_normalize_rows(gallery), labels)

    def __len__(self) -> int:
        return int(self.gallery.shape[0])


def recall_at_k(queries, query_labels, index: RetrievalIndex, ks: list[int], exclude_self: bool = False) -> dict[int, float]:
    """Fraction of queries whose top-k cosine neighbours hold a same-label gallery item.

    Ties go to the lower gallery index. With `exclude_self` the queries are the
    gallery itself and each query's own row is skipped (leave-one-out).
    """
    if len(index) == 0:
        raise EmptyGallery("retrieval needs a non-empty gallery")
    if not ks or list(ks) != sorted(ks) or ks[0] < 1:
        raise InvalidParameter(f"ks must be positive and sorted ascending, got {ks}")
    query_matrix = l2_normalize_rows(queries)
    labels = np.asarray(query_labels).astype(np.int64)
    if labels.shape != (query_matrix.shape[0],):
        raise ShapeMismatch("query labels must align with query rows")
    if exclude_self and query_matrix.shape[0] != len(index):
        raise ShapeMismatch("leave-one-out retrieval needs the queries to be the gallery")
    available = len(index) - (1 if exclude_self else 0)
    if ks[-1] > available:
        raise KExceedsGallery(f"k={ks[-1]} exceeds the {available} retrievable gallery items")

    first_hit = np.empty(query_matrix.shape[0], dtype=np.int64)
    for start in range(0, query_matrix.shape[0], QUERY_CHUNK):
        stop = min(start + QUERY_CHUNK, query_matrix.shape[0])
        similarities = cosine_similarity_matrix(query_matrix[start:stop], index.gallery)
        if exclude_self:
            similarities[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        ranking = np.argsort(-similarities, axis=1, kind="stable")[:, : ks[-1]]
        hits = index.gallery_labels[ranking] == labels[start:stop, None]
        first_hit[start:stop] = np.where(hits.any(axis=1), hits.argmax(axis=1), ks[-1])
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def geometry_report(raw_embeddings, labels, centers=None) -> GeometryReport:
    """Angular cohesion on normalized embeddings and radial spread on raw embeddings.

    Without explicit centers the normalized mean direction of each class is used.
    """
    raw = as_matrix(raw_embeddings, "raw_embeddings")
    label_array = np.asarray(labels).astype(np.int64)
    if label_array.shape != (raw.shape[0],) or raw.shape[0] == 0:
        raise ShapeMismatch("labels must align with a non-empty embedding matrix")
    x = l2_normalize_rows(raw)
    classes = np.unique(label_array)

    if centers is None:
        center_rows = l2_normalize_rows(np.vstack([x[label_array == class_id].sum(axis=0) for class_id in classes]))
        lookup = {int(class_id): row for row, class_id in enumerate(classes)}
    else:
        center_matrix = as_matrix(centers, "centers")
        if center_matrix.shape[1] != raw.shape[1] or label_array.max() >= center_matrix.shape[0]:
            raise ShapeMismatch("centers do not match the embeddings or labels")
        center_rows = l2_normalize_rows(center_matrix)
        lookup = {int(class_id): int(class_id) for class_id in range(center_matrix.shape[0])}

    rows = np.array([lookup[int(label)] for label in label_array])
    cosines = np.clip(np.einsum("ij,ij->i", x, center_rows[rows]), -1.0, 1.0)
    per_class = {int(class_id): float(np.mean(cosines[label_array == class_id])) for class_id in classes}

    used_centers = center_rows[sorted({lookup[int(class_id)] for class_id in classes})]
    min_distance = None
    if used_centers.shape[0] >= 2:
        pairwise = used_centers @ used_centers.T
        upper = pairwise[np.triu_indices(used_centers.shape[0], k=1)]
        min_distance = float(np.clip(1.0 - upper.max(), 0.0, 2.0))

    radii = row_norms(raw)
    return GeometryReport(
        per_class_mean_cosine=per_class,
        global_mean_intra_class_cosine=float(np.clip(np.mean(cosines), -1.0, 1.0)),
        min_center_cosine_distance=min_distance,
        radius_mean=float(np.mean(radii)),
        radius_std=float(np.std(radii)),
    )
