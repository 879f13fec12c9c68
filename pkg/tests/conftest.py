import numpy as np
import pytest

from cicmap import SlideDescriptorSet
from cicmap.features import DESCRIPTOR_DIM


def axis_descriptor(axis: int, value: float = 255.0) -> np.ndarray:
    """Descriptor with a single nonzero component; two different axes at
    value 255 are ~360.6 apart, beyond the default match threshold."""
    d = np.zeros(DESCRIPTOR_DIM)
    d[axis] = value
    return d


def block_descriptor(block: int, value: float, width: int = 4) -> np.ndarray:
    """Descriptor with `width` equal components on a disjoint block."""
    d = np.zeros(DESCRIPTOR_DIM)
    d[block * width:(block + 1) * width] = value
    return d


def make_slide(patches, patch_size=512, slide_id="test", cols=None, rows=None):
    """Build a slide from {(X, Y): (n, 128) descriptor block}; keypoints sit
    at each patch's center pixel."""
    xs, ys, blocks = [], [], []
    half = patch_size // 2
    max_x = max_y = 0
    for (px, py), block in sorted(patches.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        if block.shape[1] != DESCRIPTOR_DIM:
            raise AssertionError(f"bad block shape {block.shape}")
        xs.extend([px * patch_size + half] * len(block))
        ys.extend([py * patch_size + half] * len(block))
        blocks.append(block)
        max_x = max(max_x, px)
        max_y = max(max_y, py)
    cols = (max_x + 1) if cols is None else cols
    rows = (max_y + 1) if rows is None else rows
    desc = np.vstack(blocks) if blocks else np.empty((0, DESCRIPTOR_DIM))
    return SlideDescriptorSet.build(
        slide_id, cols * patch_size, rows * patch_size,
        np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
        desc, patch_size_px=patch_size,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
