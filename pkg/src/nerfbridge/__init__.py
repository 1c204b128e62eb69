"""Feature mapping between NeRF weight-space embeddings and CLIP embeddings.

Works on precomputed embedding files; ``nerfbridge.dataset.generate_synthetic``
provides a class-clustered stand-in so every experiment runs without models.
"""

__version__ = "0.1.0"

from .dataset import (
    Dataset,
    ObjectRecord,
    Split,
    SynthSpec,
    ViewSource,
    compose_syn2real,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    save_dataset,
    save_dataset_dir,
    select_views,
)
from .evalharness import (
    EvalReport,
    eval_clip_baseline_zero_shot,
    eval_retrieval_images,
    eval_retrieval_text,
    eval_zero_shot,
    multiclass_accuracy,
    recall_at_k,
    write_reports,
)
from .gallery import Gallery, build_gallery, label_gallery_from_anchors, multi_view_query, topk
from .mapper import (
    Checkpoint,
    MapperConfig,
    MapperDirection,
    infer,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
    train_clip2nerf,
    train_nerf2clip,
)
