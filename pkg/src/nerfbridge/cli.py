"""``nerfbridge`` command line: synth, train, eval, query, inspect.

Settings resolve as flags > ``--config`` JSON file > built-in defaults, and
every command writes the resolved settings next to its outputs.

Exit codes: 0 success, 2 usage or validation error, 3 protocol/data error,
4 I/O error.
"""

import argparse
import csv
import json
import logging
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    BLOB_MAGIC,
    FORMAT_VERSION,
    MANIFEST_NAME,
    SynthSpec,
    ViewSource,
    compose_syn2real,
    generate_synthetic,
    load_dataset_dir,
    save_dataset_dir,
    select_views,
)
from .errors import (
    NerfBridgeError,
    ParseError,
    ValidationError,
    VersionError,
)
from .evalharness import (
    eval_clip_baseline_zero_shot,
    eval_retrieval_images,
    eval_retrieval_text,
    eval_zero_shot,
    write_reports,
)
from .gallery import (
    gallery_from_records,
    label_gallery_from_anchors,
    load_gallery,
    save_gallery,
    topk,
)
from .mapper import (
    CHECKPOINT_MAGIC,
    MapperConfig,
    MapperDirection,
    infer,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
)

log = logging.getLogger("nerfbridge")

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# settings resolution


SYNTH_DEFAULTS = {
    "classes": 10, "per_class": 50, "views": 8, "sigma": 0.05, "seed": 0,
    "sources": "gt,rendered", "captions": True, "generated_shift": 0.0, "out": None,
}

TRAIN_DEFAULTS = {
    "dataset": None, "direction": None, "out": None, "epochs": None, "lr": None,
    "wd": 1e-2, "batch": 64, "n_views": None, "sources": "gt", "multimodal": False,
    "caption_repeat": 1, "pct_start": 0.3, "div_factor": 25.0, "final_div_factor": 1e4,
    "seed": 0, "syn2real": None,
}

EVAL_DEFAULTS = {
    "protocol": None, "dataset": None, "ckpt": None, "query_views": 1, "query_dataset": None,
    "query_sources": "gt", "views": "1,2,4,8,16,all", "baseline_sources": "rendered",
    "seed": 0, "out_dir": "reports", "name": None, "method": None,
}

QUERY_DEFAULTS = {
    "ckpt": None, "gallery": None, "gallery_split": "test", "embedding": None, "record": None,
    "query_dataset": None, "views": 1, "view_sources": "gt", "k": 10, "exclude_self": False,
    "export_predicted": None, "save_gallery": None, "seed": 0,
}


def resolve(args, defaults):
    """Merge defaults, the optional config file and explicitly passed flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            overlay = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(overlay) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(overlay)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _sources(text):
    try:
        return tuple(ViewSource(s.strip()) for s in str(text).split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"unknown view source in {text!r}") from exc


def _need_dir(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not (p / MANIFEST_NAME).is_file():
        raise UsageError(f"{what} {p} does not contain {MANIFEST_NAME}")
    return p


def _need_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = resolve(args, SYNTH_DEFAULTS)
    if cfg["out"] is None:
        raise UsageError("-o/--out is required")
    for key in ("classes", "per_class", "views"):
        if int(cfg[key]) < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be positive")
    if float(cfg["sigma"]) < 0:
        raise UsageError("--sigma must be non-negative")
    spec = SynthSpec(int(cfg["classes"]), int(cfg["per_class"]), int(cfg["views"]),
                     float(cfg["sigma"]), int(cfg["seed"]), _sources(cfg["sources"]),
                     bool(cfg["captions"]), float(cfg["generated_shift"]))
    ds = generate_synthetic(spec)
    out = save_dataset_dir(ds, cfg["out"])
    _write_json(out / "synth.config.json", {"command": "synth", "config": cfg})
    print(json.dumps({"records": len(ds), "views": sum(r.num_views for r in ds.records),
                      "out": str(out)}))
    return EXIT_OK


def _mapper_config(cfg):
    if cfg["direction"] not in {d.value for d in MapperDirection}:
        raise UsageError("--direction must be clip2nerf or nerf2clip")
    return MapperConfig(
        direction=cfg["direction"], n_views=cfg["n_views"], view_sources=_sources(cfg["sources"]),
        multimodal=bool(cfg["multimodal"]), caption_repeat=int(cfg["caption_repeat"]),
        epochs=cfg["epochs"], max_lr=cfg["lr"], weight_decay=float(cfg["wd"]),
        batch_size=int(cfg["batch"]), pct_start=float(cfg["pct_start"]),
        div_factor=float(cfg["div_factor"]), final_div_factor=float(cfg["final_div_factor"]),
        seed=int(cfg["seed"]),
    )


def cmd_train(args):
    cfg = resolve(args, TRAIN_DEFAULTS)
    data_dir = _need_dir(cfg["dataset"], "dataset")
    if cfg["out"] is None:
        raise UsageError("-o/--out is required")
    config = _mapper_config(cfg)
    cfg["epochs"], cfg["lr"] = config.epochs, config.max_lr
    ds = load_dataset_dir(data_dir)
    if cfg["syn2real"]:
        try:
            n_syn, n_gen = (int(x) for x in str(cfg["syn2real"]).split(","))
        except ValueError as exc:
            raise UsageError("--syn2real takes N_SYNTHETIC,N_GENERATED") from exc
        ds = ds.with_records(compose_syn2real(ds.records, n_syn, n_gen, config.seed))
        config = replace(config, view_sources=tuple(ViewSource), n_views=None)

    cp, trace = train(ds, config)
    cp.metadata["cli_config"] = cfg
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cp, out)
    _write_json(out.with_name(out.name + ".config.json"), {"command": "train", "config": cfg})
    with open(out.with_name(out.name + ".loss.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in trace:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
    for e in trace:
        print(f"epoch {e.epoch:4d}  train {e.train_loss:.6f}  val {e.val_loss:.6f}  lr {e.lr:.3e}")
    return EXIT_OK


def _n_list(text):
    out = []
    for tok in str(text).split(","):
        tok = tok.strip().lower()
        if tok in ("all", "n"):
            out.append(None)
        elif tok:
            out.append(int(tok))
    return out


def cmd_eval(args):
    cfg = resolve(args, EVAL_DEFAULTS)
    protocol = cfg["protocol"]
    data_dir = _need_dir(cfg["dataset"], "dataset")
    ds = load_dataset_dir(data_dir)
    seed = int(cfg["seed"])
    name = cfg["name"] or protocol
    if protocol == "zeroshot-baseline":
        gallery = label_gallery_from_anchors(ds.anchors)
        sources = _sources(cfg["baseline_sources"])
        test = ds.split("test")
        reports = []
        for n in _n_list(cfg["views"]):
            n_eff = n if n is not None else min(sum(s in sources for s in r.view_sources) for r in test)
            rep = eval_clip_baseline_zero_shot(test, gallery, n_eff, seed, sources)
            if n is None:
                rep.method, rep.views = "CLIP N views", f"N={n_eff}"
            reports.append(rep)
    else:
        cp = load_checkpoint(_need_file(cfg["ckpt"], "ckpt"))
        method = cfg["method"] or cp.direction.value
        if protocol == "zeroshot":
            reports = [eval_zero_shot(ds, cp, label_gallery_from_anchors(ds.anchors), method)]
        elif protocol == "retrieval-images":
            query = None
            if cfg["query_dataset"]:
                query = load_dataset_dir(_need_dir(cfg["query_dataset"], "query-dataset"))
            reports = [eval_retrieval_images(ds, cp, int(cfg["query_views"]), seed, query,
                                             _sources(cfg["query_sources"]), method)]
        elif protocol == "retrieval-text":
            reports = [eval_retrieval_text(ds, cp, method)]
        else:
            raise UsageError(f"unknown protocol {protocol!r}")
    for rep in reports:
        rep.config["cli_config"] = cfg
    json_path, csv_path = write_reports(reports, cfg["out_dir"], name)
    for rep in reports:
        print(json.dumps({"method": rep.method, "views": rep.views, **rep.metrics,
                          "time_ms": rep.timing["total_ms"]}))
    print(json.dumps({"report": str(json_path), "table": str(csv_path)}))
    return EXIT_OK


def _read_embedding(path):
    """A query vector from a ``.json`` list or an NFBRIDGE blob holding one vector."""
    p = _need_file(path, "embedding")
    if p.suffix == ".json":
        return np.asarray(json.loads(p.read_text(encoding="utf-8")), dtype=np.float64)
    data = p.read_bytes()
    if data[: len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise ParseError(f"{p}: missing NFBRIDGE header")
    (version,) = struct.unpack_from("<I", data, len(BLOB_MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported blob version {version}")
    vec = np.frombuffer(data, dtype="<f4", offset=len(BLOB_MAGIC) + 4).astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValidationError("non-finite value in query embedding")
    return vec


def write_vector_blob(path, vec):
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(np.asarray(vec, dtype="<f4").tobytes())


def cmd_query(args):
    cfg = resolve(args, QUERY_DEFAULTS)
    cp = load_checkpoint(_need_file(cfg["ckpt"], "ckpt"))
    if cfg["gallery"] is None:
        raise UsageError("--gallery is required")
    gpath = Path(cfg["gallery"])
    gallery_ds = None
    if gpath.is_dir():
        gallery_ds = load_dataset_dir(_need_dir(gpath, "gallery"))
        if cp.direction is MapperDirection.CLIP2NERF:
            gallery = gallery_from_records(gallery_ds.split(cfg["gallery_split"]))
        else:
            gallery = label_gallery_from_anchors(gallery_ds.anchors)
    elif gpath.is_file():
        gallery = load_gallery(gpath)
    else:
        raise UsageError(f"gallery not found: {gpath}")

    query_id = None
    if cfg["embedding"] is not None:
        inputs = _read_embedding(cfg["embedding"])[None, :]
    elif cfg["record"] is not None:
        if cfg["query_dataset"]:
            qds = load_dataset_dir(_need_dir(cfg["query_dataset"], "query-dataset"))
        elif gallery_ds is not None:
            qds = gallery_ds
        else:
            raise UsageError("--record needs --query-dataset when --gallery is a gallery file")
        rec = qds.by_id().get(cfg["record"])
        if rec is None:
            raise UsageError(f"record {cfg['record']!r} not in dataset")
        query_id = rec.id
        if cp.direction is MapperDirection.CLIP2NERF:
            inputs = select_views(rec, int(cfg["views"]), _sources(cfg["view_sources"]),
                                  int(cfg["seed"]))
        else:
            inputs = rec.nerf_embedding[None, :]
    else:
        raise UsageError("one of --embedding or --record is required")

    predicted = infer(cp, inputs).mean(axis=0)
    exclude = query_id if cfg["exclude_self"] else None
    hits = topk(gallery, predicted, int(cfg["k"]), exclude_id=exclude)
    log.info(json.dumps({"command": "query", "config": cfg}, sort_keys=True))
    for rank, h in enumerate(hits, start=1):
        print(json.dumps({"rank": rank, "id": h.id, "label": h.label, "score": h.score}))
    if cfg["export_predicted"]:
        out = Path(cfg["export_predicted"])
        write_vector_blob(out, predicted)
        _write_json(out.with_name(out.name + ".json"),
                    {"command": "query", "config": cfg, "dim": int(predicted.size),
                     "direction": cp.direction.value})
    if cfg["save_gallery"]:
        prefix = Path(cfg["save_gallery"])
        prefix.parent.mkdir(parents=True, exist_ok=True)
        save_gallery(gallery, prefix.with_suffix(".json"), prefix.with_suffix(".bin"))
    return EXIT_OK


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise UsageError(f"nothing to inspect at {args.path}")
    head = path.read_bytes()[:16]
    if head.startswith(CHECKPOINT_MAGIC):
        header, _ = read_checkpoint_header(path.read_bytes())
        header["metadata"].pop("trace", None)
        print(json.dumps(header, indent=1, sort_keys=True))
        return EXIT_OK
    if head.startswith(BLOB_MAGIC):
        (version,) = struct.unpack_from("<I", head, len(BLOB_MAGIC))
        print(json.dumps({"blob": str(path), "version": version,
                          "payload_bytes": path.stat().st_size - len(BLOB_MAGIC) - 4}))
        return EXIT_OK
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unrecognised file") from exc
    if doc.get("format") == "nerfbridge-dataset":
        summary = {k: doc[k] for k in ("format_version", "nerf_dim", "clip_dim", "classes",
                                       "splits", "blob_bytes")}
        summary["records"] = len(doc["records"])
        summary["anchors"] = len(doc["anchors"])
        print(json.dumps(summary, indent=1))
    elif doc.get("format") == "nerfbridge-gallery":
        print(json.dumps({"entries": len(doc["ids"]), "dim": doc["dim"]}))
    elif "reports" in doc:
        for rep in doc["reports"]:
            print(json.dumps({"protocol": rep["protocol"], "method": rep["method"],
                              "views": rep["views"], **rep["metrics"]}))
    else:
        print(json.dumps(doc, indent=1))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="nerfbridge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sources", help="comma list cycled over views (default gt,rendered)")
    p.add_argument("--no-captions", dest="captions", action="store_const", const=False)
    p.add_argument("--generated-shift", dest="generated_shift", type=float)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train clip2nerf or nerf2clip")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--direction", choices=[d.value for d in MapperDirection])
    p.add_argument("-o", "--out", help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="one-cycle peak learning rate")
    p.add_argument("--wd", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-views", dest="n_views", type=int)
    p.add_argument("--sources", help="view sources used for training, e.g. gt or gt,rendered")
    p.add_argument("--multimodal", action="store_const", const=True)
    p.add_argument("--caption-repeat", dest="caption_repeat", type=int)
    p.add_argument("--pct-start", dest="pct_start", type=float)
    p.add_argument("--div-factor", dest="div_factor", type=float)
    p.add_argument("--final-div-factor", dest="final_div_factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--syn2real", help="N_SYNTHETIC,N_GENERATED views per object, e.g. 7,7")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("protocol", choices=["zeroshot", "zeroshot-baseline",
                                        "retrieval-images", "retrieval-text"])
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--ckpt")
    p.add_argument("--query-views", dest="query_views", type=int)
    p.add_argument("--query-dataset", dest="query_dataset")
    p.add_argument("--query-sources", dest="query_sources")
    p.add_argument("--views", help="baseline view counts, e.g. 1,2,4,8,16,all")
    p.add_argument("--baseline-sources", dest="baseline_sources")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--name")
    p.add_argument("--method")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="ad-hoc top-k query, JSON lines on stdout")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--gallery", help="dataset directory or gallery manifest")
    p.add_argument("--gallery-split", dest="gallery_split")
    p.add_argument("--embedding", help=".json list or NFBRIDGE blob with one vector")
    p.add_argument("--record")
    p.add_argument("--query-dataset", dest="query_dataset")
    p.add_argument("--views", type=int)
    p.add_argument("--view-sources", dest="view_sources")
    p.add_argument("-k", type=int)
    p.add_argument("--exclude-self", dest="exclude_self", action="store_const", const=True)
    p.add_argument("--export-predicted", dest="export_predicted")
    p.add_argument("--save-gallery", dest="save_gallery", help="path prefix for .json/.bin")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("inspect", help="print manifest, checkpoint or report headers")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _limit_threads(n):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limiter = _limit_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nerfbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ParseError, VersionError) as exc:
        print(f"nerfbridge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NerfBridgeError as exc:
        print(f"nerfbridge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ValueError, KeyError) as exc:
        print(f"nerfbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"nerfbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
