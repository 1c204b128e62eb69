import numpy as np
import pytest

from nerfbridge.dataset import ObjectRecord, SynthSpec, ViewSource, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    """3 classes x 10 objects x 4 views (2 GT + 2 rendered), sigma 0.05."""
    return generate_synthetic(SynthSpec(num_classes=3, objects_per_class=10, views_per_object=4,
                                        noise_sigma=0.05, seed=3))


def make_record(rid, n_views=3, label="a", sources=None, caption=True, split="train", seed=0):
    rng = np.random.default_rng(seed)
    sources = sources or [ViewSource.GROUND_TRUTH] * n_views
    return ObjectRecord(
        id=rid,
        class_label=label,
        nerf_embedding=rng.normal(size=1024),
        views=rng.normal(size=(len(sources), 512)),
        view_sources=sources,
        caption_embedding=rng.normal(size=512) if caption else None,
        split=split,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
