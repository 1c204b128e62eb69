# %% [markdown]
# # Retrieval and zero-shot classification
#
# Zero-shot: map a NeRF embedding into CLIP space and take the nearest class
# anchor. Retrieval: map image views into NeRF space and search the test
# NeRF gallery, leaving the query object itself out.

# %%
import tempfile
from pathlib import Path

from nerfbridge import (
    MapperConfig,
    SynthSpec,
    build_gallery,
    generate_synthetic,
    label_gallery_from_anchors,
    topk,
    train_clip2nerf,
    train_nerf2clip,
)
from nerfbridge.evalharness import (
    eval_retrieval_images,
    eval_retrieval_text,
    eval_zero_shot,
    write_reports,
    zero_shot_baseline_sweep,
)

# %% [markdown]
# Search itself is plain cosine top-k. Ties go to the earlier entry.

# %%
g = build_gallery([("a", "A", [1.0, 0.0]), ("b", "B", [0.0, 1.0]), ("c", "A", [2.0, 0.0])])
print([(h.id, round(h.score, 3)) for h in topk(g, [1.0, 0.1], 3)])
print([h.id for h in topk(g, [1.0, 0.1], 3, exclude_id="a")])

# %%
ds = generate_synthetic(SynthSpec(6, 30, 8, 0.08, seed=4))
n2c, _ = train_nerf2clip(ds, MapperConfig("nerf2clip", epochs=20, n_views=4))
c2n, _ = train_clip2nerf(ds, MapperConfig("clip2nerf", epochs=8, max_lr=1e-3))
anchors = label_gallery_from_anchors(ds.anchors)

# %%
zs = eval_zero_shot(ds, n2c, anchors)
base = zero_shot_baseline_sweep(ds, anchors, [1, 2, 4], seed=0)
for rep in [zs] + base:
    print(f"{rep.method:14s} views={rep.views:2s} acc={rep.metrics['accuracy']:.3f} "
          f"({rep.timing['total_ms']:.3f} ms/query)")

# %%
reports = [eval_retrieval_images(ds, c2n, n, seed=0) for n in (1, 4)]
reports.append(eval_retrieval_text(ds, c2n))
for rep in reports:
    m = rep.metrics
    print(f"views={rep.views:4s} r@1={m['recall@1']:.3f} r@5={m['recall@5']:.3f} r@10={m['recall@10']:.3f}")

# %% [markdown]
# Each report keeps its per-query rankings so the metrics can be recomputed later.

# %%
q = reports[0].queries[0]
print(q["query_id"], q["true_label"], q["ranked_labels"][:5])

out = Path(tempfile.mkdtemp())
json_path, csv_path = write_reports(reports, out, "retrieval")
print(csv_path.read_text())
