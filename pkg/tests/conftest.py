import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the fd/oracle helpers

from msfanet.data import CrowdSample, HeadAnnotations, normalize_image


def make_sample(points, height=64, width=64, seed=0, roi=None):
    """Small sample with a reproducible random image."""
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    ann = HeadAnnotations(np.array(points, dtype=np.float64).reshape(-1, 2),
                          image_width=width, image_height=height)
    return CrowdSample(normalize_image(rgb), ann, roi=roi, sample_id=f"s{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
