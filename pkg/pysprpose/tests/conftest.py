import os

import numpy as np
import pytest

from pysprpose.representation import Pose, Scene
from pysprpose.skeleton import default_mpii16, default_panoptic15_3d, default_toy6


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SPR_POSE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow acceptance run, set SPR_POSE_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy6():
    return default_toy6()


@pytest.fixture
def mpii16():
    return default_mpii16()


@pytest.fixture
def panoptic():
    return default_panoptic15_3d()


@pytest.fixture
def toy_pose():
    # neck, head_top, l_shoulder, l_elbow, r_shoulder, r_elbow
    return Pose.from_coords([[20.0, 20.0], [20.0, 12.0], [26.0, 22.0], [30.0, 30.0],
                             [14.0, 22.0], [10.0, 30.0]])


@pytest.fixture
def two_person_scene(toy_pose):
    other = toy_pose.translated([40.0, 16.0])
    return Scene(image_height=64, image_width=80, persons=(toy_pose, other), image_id="two")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
