import numpy as np
import pytest

from dtpn.io_formats import Corpus, GroundTruthSegment, PyramidFeature, VideoMeta


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pyramid(rng, scales=3, base=4, dim=6):
    return PyramidFeature(
        [
            rng.standard_normal((base << s, dim)).astype(np.float32)
            for s in range(scales)
        ]
    )


@pytest.fixture
def two_label_corpus():
    meta = VideoMeta(id="vid0", duration_s=100.0, fps=10.0, num_frames=1000)
    gts = [
        GroundTruthSegment(label_index=1, start=0.25, end=0.75),
        GroundTruthSegment(label_index=0, start=0.05, end=0.15),
    ]
    return Corpus(labels=["a", "b"], videos=[(meta, gts)])
