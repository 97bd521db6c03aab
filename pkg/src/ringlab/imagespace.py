"""Mapping between model space ([-1, 1] nominal) and unit image space ([0, 1])."""

import numpy as np


def to_unit(x):
    """Model-space grid to a displayable image, clamped to [0, 1]."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def from_unit(u):
    return 2.0 * np.asarray(u, dtype=np.float64) - 1.0
