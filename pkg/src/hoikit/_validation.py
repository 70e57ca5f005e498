"""Input checks shared by the estimators."""

import numpy as np


def check_depth(depth, name="depth"):
    d = np.asarray(depth, dtype=float)
    if d.ndim != 2:
        raise ValueError("%s must be a 2-D array, got shape %s" % (name, d.shape))
    return d


def check_mask(mask, shape=None, name="mask"):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("%s must be a 2-D array, got shape %s" % (name, m.shape))
    if shape is not None and m.shape != tuple(shape):
        raise ValueError("%s shape %s does not match %s" % (name, m.shape, tuple(shape)))
    return m.astype(bool)


def check_points(points, name="points", nonempty=False):
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        p = p.reshape(0, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("%s must have shape (n, 3), got %s" % (name, p.shape))
    if not np.all(np.isfinite(p)):
        raise ValueError("%s contain non-finite coordinates" % name)
    if nonempty and len(p) == 0:
        raise ValueError("%s is empty" % name)
    return p


def check_intrinsics_shape(intr, *arrays):
    for a in arrays:
        if a is not None and np.shape(a) != intr.shape:
            raise ValueError("array shape %s does not match intrinsics %s" % (np.shape(a), intr.shape))
