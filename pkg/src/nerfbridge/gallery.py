"""Exact cosine top-k search over a gallery of embeddings."""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import BLOB_MAGIC, FORMAT_VERSION, HEADER_BYTES
from .errors import (
    DegenerateVector,
    DimensionMismatch,
    DuplicateId,
    EmptyInput,
    ParseError,
    ValidationError,
    VersionError,
)
from .tensor import NORM_EPS


@dataclass(frozen=True)
class Hit:
    id: str
    label: str
    score: float


@dataclass
class Gallery:
    ids: list
    labels: list
    embeddings: np.ndarray  # (rows, dim) float32, unit rows
    norms: np.ndarray  # original row norms, float64

    def __post_init__(self):
        # float64 copy so every search accumulates in 64-bit
        self._rows64 = self.embeddings.astype(np.float64)
        self._index = {i: k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def index_of(self, entry_id):
        return self._index.get(entry_id)

    def scores(self, query):
        """Cosine similarity of ``query`` against every row, in insertion order."""
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.size != self.dim:
            raise DimensionMismatch(f"query dim {q.size}, gallery dim {self.dim}")
        qn = float(np.sqrt(np.dot(q, q)))
        if not np.isfinite(qn) or qn <= NORM_EPS:
            raise DegenerateVector("query vector has (near) zero norm")
        return self._rows64 @ (q / qn)


def build_gallery(entries):
    """Build a gallery from ``(id, label, vector)`` triples."""
    entries = list(entries)
    if not entries:
        raise EmptyInput("gallery needs at least one entry")
    ids = [str(e[0]) for e in entries]
    labels = [str(e[1]) for e in entries]
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(f"duplicate gallery id {i!r}")
        seen.add(i)
    dim = np.asarray(entries[0][2]).size
    rows = np.empty((len(entries), dim), dtype=np.float64)
    for k, (eid, _, vec) in enumerate(entries):
        v = np.asarray(vec, dtype=np.float64).ravel()
        if v.size != dim:
            raise DimensionMismatch(f"entry {eid!r} has dim {v.size}, expected {dim}")
        rows[k] = v
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    bad = np.flatnonzero(~(norms > NORM_EPS) | ~np.isfinite(norms))
    if bad.size:
        raise DegenerateVector(f"entry {ids[bad[0]]!r} has (near) zero or non-finite norm")
    unit = (rows / norms[:, None]).astype(np.float32)
    return Gallery(ids, labels, unit, norms)


def topk(gallery, query, k, exclude_id=None):
    """The ``k`` best entries by cosine score, ties broken by insertion order."""
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = gallery.scores(query)
    order = np.lexsort((np.arange(len(scores)), -scores))
    if exclude_id is not None:
        skip = gallery.index_of(exclude_id)
        if skip is not None:
            order = order[order != skip]
    order = order[:k]
    return [Hit(gallery.ids[i], gallery.labels[i], float(scores[i])) for i in order]


def topk_brute_force(gallery, query, k, exclude_id=None):
    """Full Python sort by ``(-score, index)``; reference for :func:`topk`."""
    q = np.asarray(query, dtype=np.float64).ravel()
    qn = float(np.sqrt(sum(float(x) * float(x) for x in q)))
    scored = []
    for i, row in enumerate(gallery.embeddings):
        if gallery.ids[i] == exclude_id:
            continue
        s = float(np.dot(row.astype(np.float64), q)) / qn
        scored.append((-s, i))
    scored.sort()
    return [Hit(gallery.ids[i], gallery.labels[i], -neg) for neg, i in scored[:k]]


def multi_view_query(checkpoint, views, gallery, k, exclude_id=None):
    """Map each view with a clip2nerf checkpoint, average the outputs, search.

    The averaged prediction is not renormalised; cosine search ignores scale.
    """
    from .mapper import MapperDirection, infer

    if checkpoint.direction is not MapperDirection.CLIP2NERF:
        raise DimensionMismatch("multi-view queries need a clip2nerf checkpoint")
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 1:
        views = views[None, :]
    if views.shape[0] < 1:
        raise EmptyInput("at least one view required")
    predicted = infer(checkpoint, views)
    return topk(gallery, predicted.mean(axis=0), k, exclude_id)


def label_gallery_from_anchors(anchors):
    """One row per class; id and label are both the class name."""
    if not anchors:
        raise EmptyInput("anchor table is empty")
    return build_gallery((name, name, vec) for name, vec in anchors.items())


def gallery_from_records(records, field="nerf_embedding"):
    return build_gallery((r.id, r.class_label, getattr(r, field)) for r in records)


# --------------------------------------------------------------------------
# export / import in the dataset blob format


def save_gallery(gallery, manifest_path, blob_path):
    """Unit rows go to the blob, ids/labels/norms to the manifest."""
    manifest = {
        "format": "nerfbridge-gallery",
        "format_version": FORMAT_VERSION,
        "blob": Path(blob_path).name,
        "dim": gallery.dim,
        "rows_offset": HEADER_BYTES,
        "ids": list(gallery.ids),
        "labels": list(gallery.labels),
        "norms": [float(n) for n in gallery.norms],
    }
    with open(blob_path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(np.ascontiguousarray(gallery.embeddings, dtype="<f4").tobytes())
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_gallery(manifest_path, blob_path=None):
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != "nerfbridge-gallery":
        raise ParseError(f"{manifest_path}: not a gallery manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported gallery version {manifest.get('format_version')!r}")
    if blob_path is None:
        blob_path = Path(manifest_path).parent / manifest["blob"]
    data = Path(blob_path).read_bytes()
    if data[: len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise ParseError(f"{blob_path}: missing NFBRIDGE header")
    ids, labels, dim = manifest["ids"], manifest["labels"], int(manifest["dim"])
    offset = int(manifest["rows_offset"])
    count = len(ids) * dim
    if len(labels) != len(ids) or offset + 4 * count > len(data):
        raise ValidationError("gallery blob does not match manifest")
    rows = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)
    if not np.all(np.isfinite(rows)):
        raise ValidationError("non-finite gallery row")
    if len(set(ids)) != len(ids):
        raise DuplicateId("duplicate gallery id in manifest")
    return Gallery(list(ids), list(labels), rows.reshape(len(ids), dim),
                   np.array(manifest["norms"], dtype=np.float64))
