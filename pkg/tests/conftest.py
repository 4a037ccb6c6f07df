import numpy as np
import pytest

from wstta.detector import DetectorArch, build_model
from wstta.scenes import CATEGORIES, StreamConfig, render_frame

MICRO_ARCH = DetectorArch(
    image_size=8,
    conv_channels=(4, 6),
    pool_after=(True, True),
    anchor_sizes=(4.0, 7.0),
    top_k=8,
    proposal_nms_iou=1.0,   # 2x2 grid, 8 anchors: selection keeps all of them
    roi_size=2,
    roi_hidden=12,
)


@pytest.fixture()
def micro_model():
    return build_model(7, list(CATEGORIES), MICRO_ARCH)


@pytest.fixture()
def full_model():
    return build_model(3, list(CATEGORIES))


@pytest.fixture()
def frame():
    return render_frame(StreamConfig(seed=11), 0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
