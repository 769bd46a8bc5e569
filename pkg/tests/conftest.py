import numpy as np
import pytest

from plvo.config import default_config
from plvo.geometry import CameraIntrinsics, DepthMap, PointMap, backproject


@pytest.fixture
def intr():
    return CameraIntrinsics(f_u=700.0, f_v=680.0, c_u=60.5, c_v=40.25,
                            baseline=0.54, cam_height=1.7)


def random_depth(rng, size, z_range=(2.0, 25.0), invalid_frac=0.1) -> DepthMap:
    H, W = size
    z = rng.uniform(*z_range, size=(H, W))
    valid = rng.uniform(size=(H, W)) >= invalid_frac
    return DepthMap(np.where(valid, z, 0.0), valid)


def random_pointmap(rng, size, intr, **kw) -> PointMap:
    return backproject(random_depth(rng, size, **kw), intr)


def tiny_config(fusion=True, random_8192=False, seed=0):
    """Small widths so finite-difference checks stay fast."""
    cfg = default_config()
    cfg["seed"] = seed
    cfg["arch"].update({
        "point_channels": [6, 8, 12, 16],
        "image_channels": [4, 6, 8, 10],
        "fusion_hidden": [3, 4, 4, 4],
        "embed_channels": 10,
        "group_k": 6,
        "cost_k": 4,
        "upconv_k": 4,
        "kernels": [[5, 5], [5, 5], [3, 3], [3, 3]],
        "cost_kernels": [[5, 5], [5, 5], [3, 3], [3, 3]],
        "fusion": fusion,
        "random_8192": random_8192,
    })
    if random_8192:
        cfg["arch"]["fusion"] = False
    return cfg
