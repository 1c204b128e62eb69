"""Embedding datasets: records, on-disk format, synthetic generator, view policies.

On disk a dataset is two files:

``manifest.json``
    Metadata: format version, embedding dims, class vocabulary, split
    sizes, class-anchor offsets and one entry per record (id, label, split,
    per-view source tags, byte offsets into the blob).

``embeddings.bin``
    ``b"NFBRIDGE"``, a little-endian ``u32`` version, then packed
    little-endian float32 arrays at the offsets declared in the manifest:
    class anchors first, then for each record its NeRF embedding, its view
    matrix (row-major, ``num_views x clip_dim``) and its optional caption.

Any exporter that can write float32 arrays can produce this pair; see
``docs/format.md``.
"""

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientViews,
    ParseError,
    ValidationError,
    VersionError,
)
from .rng import Xoshiro256, XoshiroLanes, derive_seed

BLOB_MAGIC = b"NFBRIDGE"
FORMAT_VERSION = 1
HEADER_BYTES = len(BLOB_MAGIC) + 4
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "embeddings.bin"

NERF_DIM = 1024
CLIP_DIM = 512

_F32 = np.dtype("<f4")


class ViewSource(str, enum.Enum):
    GROUND_TRUTH = "gt"
    RENDERED = "rendered"
    GENERATED = "generated"


SYNTHETIC_SOURCES = frozenset({ViewSource.GROUND_TRUTH, ViewSource.RENDERED})


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class ObjectRecord:
    id: str
    class_label: str
    nerf_embedding: np.ndarray
    views: np.ndarray  # (num_views, clip_dim)
    view_sources: tuple
    caption_embedding: np.ndarray = None
    split: Split = Split.TRAIN

    def __post_init__(self):
        self.nerf_embedding = np.asarray(self.nerf_embedding, dtype=np.float32)
        self.views = np.asarray(self.views, dtype=np.float32)
        if self.views.ndim == 1:
            self.views = self.views[None, :]
        self.view_sources = tuple(ViewSource(s) for s in self.view_sources)
        if self.caption_embedding is not None:
            self.caption_embedding = np.asarray(self.caption_embedding, dtype=np.float32)
        self.split = Split(self.split)

    @property
    def num_views(self):
        return self.views.shape[0]

    @property
    def view_embeddings(self):
        return list(zip(self.views, self.view_sources))

    def equals(self, other):
        """Field-by-field equality with bit-exact float comparison."""
        if (self.id, self.class_label, self.split, self.view_sources) != (
            other.id, other.class_label, other.split, other.view_sources
        ):
            return False
        if (self.caption_embedding is None) != (other.caption_embedding is None):
            return False
        pairs = [(self.nerf_embedding, other.nerf_embedding), (self.views, other.views)]
        if self.caption_embedding is not None:
            pairs.append((self.caption_embedding, other.caption_embedding))
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


@dataclass
class Dataset:
    records: list
    anchors: dict = field(default_factory=dict)  # class label -> (clip_dim,) float32
    classes: list = None
    nerf_dim: int = NERF_DIM
    clip_dim: int = CLIP_DIM

    def __post_init__(self):
        self.anchors = {k: np.asarray(v, dtype=np.float32) for k, v in self.anchors.items()}
        if self.classes is None:
            seen = dict.fromkeys(self.anchors)
            seen.update(dict.fromkeys(r.class_label for r in self.records))
            self.classes = list(seen)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        name = Split(name)
        return [r for r in self.records if r.split == name]

    def by_id(self):
        return {r.id: r for r in self.records}

    def with_records(self, records):
        return Dataset(list(records), dict(self.anchors), list(self.classes),
                       self.nerf_dim, self.clip_dim)

    def equals(self, other):
        if (self.classes, self.nerf_dim, self.clip_dim) != (other.classes, other.nerf_dim, other.clip_dim):
            return False
        if list(self.anchors) != list(other.anchors):
            return False
        if any(self.anchors[k].tobytes() != other.anchors[k].tobytes() for k in self.anchors):
            return False
        return len(self.records) == len(other.records) and all(
            a.equals(b) for a, b in zip(self.records, other.records)
        )


def _check_vector(vec, dim, record_id, field_name):
    if vec.shape[-1] != dim:
        raise ValidationError(f"expected dim {dim}, got {vec.shape[-1]}", record_id, field_name)
    if not np.all(np.isfinite(vec)):
        raise ValidationError("non-finite value", record_id, field_name)


def validate_dataset(ds):
    """Raise :class:`ValidationError` on the first problem found."""
    seen = set()
    for rec in ds.records:
        if not rec.id:
            raise ValidationError("empty record id", rec.id, "id")
        if rec.id in seen:
            raise ValidationError("duplicate id", rec.id, "id")
        seen.add(rec.id)
        if rec.class_label not in ds.classes:
            raise ValidationError(f"label {rec.class_label!r} not in class vocabulary",
                                  rec.id, "class_label")
        if rec.nerf_embedding.shape != (ds.nerf_dim,):
            raise ValidationError(f"nerf embedding shape {rec.nerf_embedding.shape}",
                                  rec.id, "nerf_embedding")
        _check_vector(rec.nerf_embedding, ds.nerf_dim, rec.id, "nerf_embedding")
        if rec.num_views < 1:
            raise ValidationError("record has no views", rec.id, "views")
        if rec.views.ndim != 2:
            raise ValidationError(f"view matrix shape {rec.views.shape}", rec.id, "views")
        _check_vector(rec.views, ds.clip_dim, rec.id, "views")
        if len(rec.view_sources) != rec.num_views:
            raise ValidationError("one source tag per view required", rec.id, "view_sources")
        if rec.caption_embedding is not None:
            if rec.caption_embedding.shape != (ds.clip_dim,):
                raise ValidationError(f"caption shape {rec.caption_embedding.shape}",
                                      rec.id, "caption_embedding")
            _check_vector(rec.caption_embedding, ds.clip_dim, rec.id, "caption_embedding")
    for label, vec in ds.anchors.items():
        if vec.shape != (ds.clip_dim,):
            raise ValidationError(f"anchor shape {vec.shape}", None, f"anchors[{label}]")
        _check_vector(vec, ds.clip_dim, None, f"anchors[{label}]")
    return ds


# --------------------------------------------------------------------------
# serialization


def _layout(ds):
    """Manifest dict plus the ordered list of arrays to pack into the blob."""
    offset = HEADER_BYTES
    arrays = []
    anchors = []
    for label, vec in ds.anchors.items():
        anchors.append({"class": label, "offset": offset})
        arrays.append(vec)
        offset += vec.size * 4
    records = []
    for rec in ds.records:
        entry = {
            "id": rec.id,
            "label": rec.class_label,
            "split": rec.split.value,
            "num_views": rec.num_views,
            "view_sources": [s.value for s in rec.view_sources],
            "nerf_offset": offset,
        }
        arrays.append(rec.nerf_embedding)
        offset += rec.nerf_embedding.size * 4
        entry["views_offset"] = offset
        arrays.append(rec.views)
        offset += rec.views.size * 4
        if rec.caption_embedding is not None:
            entry["caption_offset"] = offset
            arrays.append(rec.caption_embedding)
            offset += rec.caption_embedding.size * 4
        else:
            entry["caption_offset"] = None
        records.append(entry)
    manifest = {
        "format": "nerfbridge-dataset",
        "format_version": FORMAT_VERSION,
        "nerf_dim": ds.nerf_dim,
        "clip_dim": ds.clip_dim,
        "classes": list(ds.classes),
        "splits": {s.value: sum(r.split == s for r in ds.records) for s in Split},
        "blob_bytes": offset,
        "anchors": anchors,
        "records": records,
    }
    return manifest, arrays


def save_dataset(ds, manifest_path, blob_path):
    validate_dataset(ds)
    manifest, arrays = _layout(ds)
    manifest["blob"] = Path(blob_path).name
    with open(blob_path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_F32).tobytes())
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def save_dataset_dir(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, directory / MANIFEST_NAME, directory / BLOB_NAME)
    return directory


def _read_manifest(manifest_path):
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise ParseError(f"{manifest_path}: manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset format version {version!r}")
    return manifest


def _read_blob(blob_path):
    data = Path(blob_path).read_bytes()
    if len(data) < HEADER_BYTES or data[: len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise ParseError(f"{blob_path}: missing NFBRIDGE header")
    (version,) = struct.unpack_from("<I", data, len(BLOB_MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported blob version {version}")
    return data


class _BlobReader:
    def __init__(self, data):
        self.data = data
        self.spans = []

    def read(self, offset, count, record_id, field_name):
        nbytes = count * 4
        if not isinstance(offset, int) or offset < HEADER_BYTES or offset + nbytes > len(self.data):
            raise ValidationError(
                f"offset {offset} + {nbytes} bytes outside blob of {len(self.data)} bytes",
                record_id, field_name,
            )
        self.spans.append((offset, offset + nbytes, record_id, field_name))
        return np.frombuffer(self.data, dtype=_F32, count=count, offset=offset).astype(np.float32)

    def check_overlap(self):
        ordered = sorted(self.spans)
        for (_, end, _, _), (start, _, rid, fname) in zip(ordered, ordered[1:]):
            if start < end:
                raise ValidationError("overlapping blob regions", rid, fname)


def load_dataset(manifest_path, blob_path=None):
    manifest = _read_manifest(manifest_path)
    if blob_path is None:
        blob_path = Path(manifest_path).parent / manifest.get("blob", BLOB_NAME)
    data = _read_blob(blob_path)
    try:
        nerf_dim = int(manifest["nerf_dim"])
        clip_dim = int(manifest["clip_dim"])
        classes = list(manifest["classes"])
        anchor_entries = manifest["anchors"]
        record_entries = manifest["records"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{manifest_path}: malformed manifest ({exc})") from exc

    reader = _BlobReader(data)
    anchors = {}
    for entry in anchor_entries:
        label = entry["class"]
        anchors[label] = reader.read(entry["offset"], clip_dim, None, f"anchors[{label}]")

    records = []
    seen = set()
    for entry in record_entries:
        try:
            rid = entry["id"]
            nviews = int(entry["num_views"])
            sources = tuple(ViewSource(s) for s in entry["view_sources"])
            split = Split(entry["split"])
            label = entry["label"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed record entry ({exc})", entry.get("id")) from exc
        if rid in seen:
            raise ValidationError("duplicate id", rid, "id")
        seen.add(rid)
        nerf = reader.read(entry["nerf_offset"], nerf_dim, rid, "nerf_embedding")
        views = reader.read(entry["views_offset"], nviews * clip_dim, rid, "views")
        caption = None
        if entry.get("caption_offset") is not None:
            caption = reader.read(entry["caption_offset"], clip_dim, rid, "caption_embedding")
        records.append(ObjectRecord(rid, label, nerf, views.reshape(nviews, clip_dim),
                                    sources, caption, split))
    reader.check_overlap()

    counts = manifest.get("splits")
    if counts is not None:
        actual = {s.value: sum(r.split == s for r in records) for s in Split}
        if sum(counts.values()) != len(records) or counts != actual:
            raise ValidationError(f"split sizes {counts} disagree with records {actual}")
    ds = Dataset(records, anchors, classes, nerf_dim, clip_dim)
    return validate_dataset(ds)


def load_dataset_dir(directory):
    directory = Path(directory)
    return load_dataset(directory / MANIFEST_NAME)


def blob_size(ds):
    """Bytes ``save_dataset`` will write for ``ds``."""
    return _layout(ds)[0]["blob_bytes"]


# --------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    objects_per_class: int = 50
    views_per_object: int = 8
    noise_sigma: float = 0.05
    seed: int = 0
    # view i is tagged view_sources[i % len(view_sources)]
    view_sources: tuple = (ViewSource.GROUND_TRUTH, ViewSource.RENDERED)
    captions: bool = True
    # Generated views are offset by this multiple of a shared unit "style" direction.
    generated_shift: float = 0.0
    nerf_dim: int = NERF_DIM
    clip_dim: int = CLIP_DIM

    def __post_init__(self):
        for name in ("num_classes", "objects_per_class", "views_per_object", "nerf_dim", "clip_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.view_sources:
            raise ValueError("view_sources must not be empty")


def class_name(index):
    return f"class_{index:03d}"


def _unit_rows(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _normals(seed, keys, dim):
    lanes = XoshiroLanes([derive_seed(seed, *k) for k in keys])
    return lanes.normal(dim)


def split_counts(n):
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def generate_synthetic(spec):
    """Class-clustered embeddings standing in for real CLIP / nf2vec exports.

    Each class gets a unit CLIP-side anchor and a unit NeRF-side anchor.
    Every object embedding is its class anchor plus isotropic Gaussian noise
    of scale ``noise_sigma``; views and captions get independent noise.
    """
    seed = int(spec.seed)
    nc, npc, nv = spec.num_classes, spec.objects_per_class, spec.views_per_object
    n_obj = nc * npc
    sources = tuple(ViewSource(s) for s in spec.view_sources)
    view_src = tuple(sources[i % len(sources)] for i in range(nv))

    clip_anchor = _unit_rows(_normals(seed, [("clip-anchor", c) for c in range(nc)], spec.clip_dim))
    nerf_anchor = _unit_rows(_normals(seed, [("nerf-anchor", c) for c in range(nc)], spec.nerf_dim))
    style = _unit_rows(_normals(seed, [("style",)], spec.clip_dim))[0]

    sigma = spec.noise_sigma
    nerf_noise = _normals(seed, [("nerf", i) for i in range(n_obj)], spec.nerf_dim)
    view_noise = _normals(seed, [("view", i, v) for i in range(n_obj) for v in range(nv)],
                          spec.clip_dim).reshape(n_obj, nv, spec.clip_dim)
    if spec.captions:
        cap_noise = _normals(seed, [("caption", i) for i in range(n_obj)], spec.clip_dim)

    order = Xoshiro256(derive_seed(seed, "split")).permutation(n_obj)
    n_train, n_val, _ = split_counts(n_obj)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = Split.TRAIN if rank < n_train else Split.VAL if rank < n_train + n_val else Split.TEST

    shift = np.array([spec.generated_shift if s == ViewSource.GENERATED else 0.0 for s in view_src])
    records = []
    for c in range(nc):
        for j in range(npc):
            i = c * npc + j
            nerf = nerf_anchor[c] + sigma * nerf_noise[i]
            views = clip_anchor[c][None, :] + sigma * view_noise[i] + shift[:, None] * style[None, :]
            caption = clip_anchor[c] + sigma * cap_noise[i] if spec.captions else None
            records.append(ObjectRecord(
                id=f"{class_name(c)}/obj_{j:05d}",
                class_label=class_name(c),
                nerf_embedding=nerf,
                views=views,
                view_sources=view_src,
                caption_embedding=caption,
                split=split_of[i],
            ))
    anchors = {class_name(c): clip_anchor[c] for c in range(nc)}
    return Dataset(records, anchors, [class_name(c) for c in range(nc)],
                   spec.nerf_dim, spec.clip_dim)


# --------------------------------------------------------------------------
# view policies


def _normalize_filter(source_filter):
    if source_filter is None:
        return frozenset(ViewSource)
    if isinstance(source_filter, (str, ViewSource)):
        source_filter = [source_filter]
    return frozenset(ViewSource(s) for s in source_filter)


def select_view_indices(record, n, source_filter, seed):
    """Indices of ``n`` distinct views whose source is in ``source_filter``.

    The choice is a prefix of one seeded permutation per (seed, record id),
    so the selection for ``n`` is contained in the selection for any larger
    ``n``. Indices come back in stored order.
    """
    allowed = _normalize_filter(source_filter)
    matching = [i for i, s in enumerate(record.view_sources) if s in allowed]
    if n < 1 or n > len(matching):
        raise InsufficientViews(
            f"record {record.id!r} has {len(matching)} views from "
            f"{sorted(s.value for s in allowed)}, {n} requested",
            record.id,
        )
    perm = Xoshiro256(derive_seed(seed, "views", record.id)).permutation(len(matching))
    return sorted(matching[p] for p in perm[:n])


def select_views(record, n, source_filter, seed):
    return record.views[select_view_indices(record, n, source_filter, seed)]


def compose_syn2real(records, n_synthetic, n_generated, seed):
    """Per object, ``n_synthetic`` GT/rendered views followed by ``n_generated`` generated ones."""
    out = []
    for rec in records:
        idx = []
        if n_synthetic:
            idx += select_view_indices(rec, n_synthetic, SYNTHETIC_SOURCES, seed)
        if n_generated:
            idx += select_view_indices(rec, n_generated, {ViewSource.GENERATED}, seed)
        if not idx:
            raise InsufficientViews("syn2real composition needs at least one view", rec.id)
        out.append(ObjectRecord(
            rec.id, rec.class_label, rec.nerf_embedding, rec.views[idx],
            tuple(rec.view_sources[i] for i in idx), rec.caption_embedding, rec.split,
        ))
    return out


__all__ = [
    "BLOB_MAGIC", "FORMAT_VERSION", "HEADER_BYTES", "NERF_DIM", "CLIP_DIM",
    "ViewSource", "Split", "ObjectRecord", "Dataset", "SynthSpec",
    "validate_dataset", "save_dataset", "save_dataset_dir", "load_dataset",
    "load_dataset_dir", "blob_size", "generate_synthetic", "select_view_indices",
    "select_views", "compose_syn2real", "split_counts", "class_name",
]
