"""Evaluation protocols: zero-shot classification and NeRF retrieval.

Every protocol returns an :class:`EvalReport` holding the metrics, the
per-query rankings they were computed from, and mean per-query timings.
Reports serialise to ``<name>.report.json`` (canonical) and
``<name>.table.csv`` (one row per report, published-table columns).
"""

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ViewSource, select_views
from .errors import EmptyInput, MissingAnchor, MissingCaption, ValidationError
from .gallery import gallery_from_records, topk
from .mapper import MapperDirection, infer

REPORT_SCHEMA = 1
RECALL_KS = (1, 5, 10)
ZERO_SHOT_COLUMNS = ["method", "views", "accuracy", "time_ms"]
RETRIEVAL_COLUMNS = ["method", "views", "recall@1", "recall@5", "recall@10", "time_ms"]

CLASSIFICATION = "classification"
RETRIEVAL = "retrieval"


def recall_at_k(per_query, k):
    """Fraction of queries with a same-label entry among their first ``k`` results.

    ``per_query`` holds ``(true_label, ranked_labels)`` pairs. A ranked list
    shorter than ``k`` (small gallery) counts all of its entries.
    """
    per_query = list(per_query)
    if not per_query:
        raise EmptyInput("recall@k of zero queries")
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = sum(1 for label, ranked in per_query if label in list(ranked)[:k])
    return hits / len(per_query)


def multiclass_accuracy(per_query):
    per_query = list(per_query)
    if not per_query:
        raise EmptyInput("accuracy of zero predictions")
    return sum(1 for t, p in per_query if t == p) / len(per_query)


@dataclass
class EvalReport:
    protocol: str
    method: str
    views: str
    kind: str
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    queries: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA

    def pairs(self):
        return [(q["true_label"], q["ranked_labels"]) for q in self.queries]

    def recompute_metrics(self):
        pairs = self.pairs()
        metrics = {}
        if self.kind == CLASSIFICATION:
            metrics["accuracy"] = multiclass_accuracy((t, r[0]) for t, r in pairs)
            metrics["recall@1"] = recall_at_k(pairs, 1)
        else:
            for k in RECALL_KS:
                metrics[f"recall@{k}"] = recall_at_k(pairs, k)
        return metrics

    def check_consistency(self):
        fresh = self.recompute_metrics()
        if fresh != self.metrics:
            raise ValidationError(f"stored metrics {self.metrics} != recomputed {fresh}")
        if self.kind == CLASSIFICATION and self.metrics["accuracy"] != self.metrics["recall@1"]:
            raise ValidationError("zero-shot accuracy differs from recall@1")
        return self

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "protocol": self.protocol,
            "method": self.method,
            "views": self.views,
            "kind": self.kind,
            "config": self.config,
            "metrics": self.metrics,
            "timing_ms": self.timing,
            "queries": self.queries,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA:
            raise ValidationError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["protocol"], d["method"], d["views"], d["kind"], d["config"],
                   d["metrics"], d["queries"], d["timing_ms"], d["schema_version"])

    def table_row(self):
        time_ms = self.timing.get("total_ms")
        row = {"method": self.method, "views": self.views}
        if self.kind == CLASSIFICATION:
            row["accuracy"] = _pct(self.metrics["accuracy"])
        else:
            for k in RECALL_KS:
                row[f"recall@{k}"] = _pct(self.metrics[f"recall@{k}"])
        row["time_ms"] = "" if time_ms is None else f"{time_ms:.3f}"
        return row


def _pct(x):
    return f"{100.0 * x:.1f}"


def _finish(protocol, method, views, kind, config, queries, t_infer, t_search):
    n = len(queries)
    timing = {
        "inference_ms": t_infer / n / 1e6,
        "search_ms": t_search / n / 1e6,
    }
    timing["total_ms"] = timing["inference_ms"] + timing["search_ms"]
    report = EvalReport(protocol, method, str(views), kind, config, {}, queries, timing)
    report.metrics = report.recompute_metrics()
    return report.check_consistency()


def _query_record(qid, label, hits):
    return {
        "query_id": qid,
        "true_label": label,
        "ranked_ids": [h.id for h in hits],
        "ranked_labels": [h.label for h in hits],
        "scores": [h.score for h in hits],
    }


def _require_anchors(records, anchor_gallery):
    known = set(anchor_gallery.labels)
    missing = sorted({r.class_label for r in records} - known)
    if missing:
        raise MissingAnchor(f"no anchor for test labels {missing}")


def _records_of(data):
    """Accept a Dataset (uses its test split) or a plain list of records."""
    if hasattr(data, "split"):
        return data.split("test")
    return list(data)


def eval_zero_shot(test_data, checkpoint, anchor_gallery, method="nerf2clip"):
    """nerf2clip(NeRF embedding) -> 1-NN class anchor -> predicted label."""
    records = _records_of(test_data)
    if not records:
        raise EmptyInput("no test records")
    if checkpoint.direction is not MapperDirection.NERF2CLIP:
        raise ValueError("zero-shot classification needs a nerf2clip checkpoint")
    _require_anchors(records, anchor_gallery)
    k = min(len(anchor_gallery), max(RECALL_KS))
    queries, t_inf, t_search = [], 0, 0
    for rec in records:
        t0 = time.perf_counter_ns()
        pred = infer(checkpoint, rec.nerf_embedding)
        t1 = time.perf_counter_ns()
        hits = topk(anchor_gallery, pred, k)
        t2 = time.perf_counter_ns()
        t_inf += t1 - t0
        t_search += t2 - t1
        queries.append(_query_record(rec.id, rec.class_label, hits))
    config = {"checkpoint": checkpoint.config.to_dict(), "stages": ["mapper", "search"]}
    return _finish("zeroshot", method, "-", CLASSIFICATION, config, queries, t_inf, t_search)


def eval_clip_baseline_zero_shot(test_data, anchor_gallery, n_views, seed,
                                 sources=(ViewSource.RENDERED,), method=None):
    """Mean of ``n_views`` view embeddings -> 1-NN class anchor.

    Timing covers the embedding mean and the search only; view rendering and
    image encoding happen upstream of the embedding files.
    """
    records = _records_of(test_data)
    if not records:
        raise EmptyInput("no test records")
    _require_anchors(records, anchor_gallery)
    k = min(len(anchor_gallery), max(RECALL_KS))
    queries, t_inf, t_search = [], 0, 0
    for rec in records:
        t0 = time.perf_counter_ns()
        q = select_views(rec, n_views, sources, seed).astype(np.float64).mean(axis=0)
        t1 = time.perf_counter_ns()
        hits = topk(anchor_gallery, q, k)
        t2 = time.perf_counter_ns()
        t_inf += t1 - t0
        t_search += t2 - t1
        queries.append(_query_record(rec.id, rec.class_label, hits))
    config = {"n_views": n_views, "seed": seed, "sources": sorted(ViewSource(s).value for s in sources),
              "stages": ["view-mean", "search"]}
    method = method or f"CLIP {n_views} view{'s' if n_views != 1 else ''}"
    return _finish("zeroshot-baseline", method, n_views, CLASSIFICATION, config,
                   queries, t_inf, t_search)


def _retrieval(protocol, method, views, config, gallery, items, checkpoint):
    """``items``: (query id, label, input rows, exclude id). Rows are mapped and averaged."""
    k = max(RECALL_KS)
    queries, t_inf, t_search = [], 0, 0
    for qid, label, rows, exclude in items:
        t0 = time.perf_counter_ns()
        pred = infer(checkpoint, rows).mean(axis=0)
        t1 = time.perf_counter_ns()
        hits = topk(gallery, pred, k, exclude_id=exclude)
        t2 = time.perf_counter_ns()
        t_inf += t1 - t0
        t_search += t2 - t1
        queries.append(_query_record(qid, label, hits))
    if not queries:
        raise EmptyInput("no queries")
    return _finish(protocol, method, views, RETRIEVAL, config, queries, t_inf, t_search)


def eval_retrieval_images(test_data, checkpoint, n_query_views=1, seed=0, query_data=None,
                          query_sources=(ViewSource.GROUND_TRUTH,), method="clip2nerf"):
    """Image -> NeRF retrieval against the test-split NeRF gallery.

    Each object's query is the mean clip2nerf output of ``n_query_views``
    seeded random views; the object itself is excluded from the gallery.
    ``query_data`` draws queries from another dataset (e.g. real photos)
    while the gallery stays the same.
    """
    records = _records_of(test_data)
    if not records:
        raise EmptyInput("no test records")
    if checkpoint.direction is not MapperDirection.CLIP2NERF:
        raise ValueError("image retrieval needs a clip2nerf checkpoint")
    gallery = gallery_from_records(records)
    query_records = records if query_data is None else _records_of(query_data)
    items = [
        (q.id, q.class_label, select_views(q, n_query_views, query_sources, seed), q.id)
        for q in query_records
    ]
    config = {
        "checkpoint": checkpoint.config.to_dict(),
        "n_query_views": n_query_views,
        "seed": seed,
        "query_sources": sorted(ViewSource(s).value for s in query_sources),
        "cross_dataset": query_data is not None,
        "exclude_self": True,
    }
    return _retrieval("retrieval-images", method, n_query_views, config, gallery, items, checkpoint)


def eval_retrieval_text(test_data, checkpoint, method="clip2nerf"):
    """Caption -> NeRF retrieval, same gallery and self-exclusion as the image protocol."""
    records = _records_of(test_data)
    if not records:
        raise EmptyInput("no test records")
    if checkpoint.direction is not MapperDirection.CLIP2NERF:
        raise ValueError("text retrieval needs a clip2nerf checkpoint")
    for r in records:
        if r.caption_embedding is None:
            raise MissingCaption(f"record {r.id!r} has no caption embedding", r.id)
    gallery = gallery_from_records(records)
    items = [(r.id, r.class_label, r.caption_embedding[None, :], r.id) for r in records]
    config = {"checkpoint": checkpoint.config.to_dict(), "exclude_self": True}
    return _retrieval("retrieval-text", method, "text", config, gallery, items, checkpoint)


# --------------------------------------------------------------------------
# sweeps


def zero_shot_baseline_sweep(test_data, anchor_gallery, n_values, seed,
                             sources=(ViewSource.RENDERED,)):
    return [eval_clip_baseline_zero_shot(test_data, anchor_gallery, n, seed, sources)
            for n in n_values]


def nerf2clip_view_ablation(dataset, base_config, n_values, anchor_gallery, label="nerf2clip"):
    """Train one nerf2clip per ``n_views`` and classify the test split with each."""
    from dataclasses import replace

    from .mapper import train_nerf2clip

    reports, checkpoints = [], []
    for n in n_values:
        cp, _ = train_nerf2clip(dataset, replace(base_config, n_views=n))
        rep = eval_zero_shot(dataset, cp, anchor_gallery, method=label)
        rep.views = str(n)
        reports.append(rep)
        checkpoints.append(cp)
    return reports, checkpoints


# --------------------------------------------------------------------------
# files


def write_reports(reports, out_dir, name):
    """Write ``<name>.report.json`` and ``<name>.table.csv``. Returns both paths."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise EmptyInput("no reports to write")
    kinds = {r.kind for r in reports}
    if len(kinds) != 1:
        raise ValueError("a table mixes classification and retrieval reports")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.report.json"
    csv_path = out_dir / f"{name}.table.csv"
    payload = {"schema_version": REPORT_SCHEMA, "reports": [r.to_dict() for r in reports]}
    json_path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    columns = ZERO_SHOT_COLUMNS if kinds == {CLASSIFICATION} else RETRIEVAL_COLUMNS
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.table_row())
    return json_path, csv_path


def load_reports(path):
    """Read a ``.report.json`` file and re-check every report's metrics."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema_version") != REPORT_SCHEMA:
        raise ValidationError(f"unsupported report schema {payload.get('schema_version')!r}")
    return [EvalReport.from_dict(d).check_consistency() for d in payload["reports"]]
