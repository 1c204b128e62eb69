# %% [markdown]
# # Synthetic data and training
#
# Real CLIP and NeRF embeddings are not needed to exercise the pipeline.
# The generator draws one anchor per class on each side and scatters
# objects around them. Both mappers then train on the result.

# %%
import tempfile
from pathlib import Path

import numpy as np

from nerfbridge import (
    MapperConfig,
    SynthSpec,
    generate_synthetic,
    infer,
    load_checkpoint,
    load_dataset_dir,
    save_checkpoint,
    save_dataset_dir,
    train_clip2nerf,
    train_nerf2clip,
)
from nerfbridge.tensor import cosine_similarity

ds = generate_synthetic(SynthSpec(num_classes=5, objects_per_class=20, views_per_object=8,
                                  noise_sigma=0.05, seed=1))
print(len(ds), "objects,", {s: len(ds.split(s)) for s in ("train", "val", "test")})
rec = ds.records[0]
print(rec.id, rec.class_label, rec.views.shape, [s.value for s in rec.view_sources])

# %% [markdown]
# Saving and reloading gives back bit-identical records.

# %%
work = Path(tempfile.mkdtemp())
save_dataset_dir(ds, work / "data")
print(sorted(p.name for p in (work / "data").iterdir()))
print("round trip equal:", load_dataset_dir(work / "data").equals(ds))

# %% [markdown]
# ## nerf2clip
#
# One sample per object. The target is the mean of n views chosen once per run.

# %%
n2c, trace = train_nerf2clip(ds, MapperConfig("nerf2clip", epochs=15, n_views=4))
for e in trace[::5] + trace[-1:]:
    print(f"epoch {e.epoch:3d}  train {e.train_loss:.4f}  val {e.val_loss:.4f}")

# %% [markdown]
# ## clip2nerf
#
# One sample per view. A higher peak rate than the default keeps this short run quick.

# %%
c2n, trace = train_clip2nerf(ds, MapperConfig("clip2nerf", epochs=10, max_lr=1e-3))
print("final val loss", round(trace[-1].val_loss, 4), "best epoch", c2n.metadata["best_epoch"])

test = ds.split("test")[0]
pred = infer(c2n, test.views[0])
print("cos(predicted, true NeRF embedding) =", round(cosine_similarity(pred, test.nerf_embedding), 3))

# %% [markdown]
# Checkpoints carry the config and a CRC, and reload exactly.

# %%
save_checkpoint(c2n, work / "c2n.ckpt")
again = load_checkpoint(work / "c2n.ckpt")
print(np.array_equal(infer(again, test.views[0]), pred), (work / "c2n.ckpt").stat().st_size, "bytes")
