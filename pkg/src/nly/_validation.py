"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_features(X):
    return check_array(X, dtype=np.float64, ensure_min_samples=1)


def check_groups(groups, n_instances):
    """Return ``groups`` as a tuple of int arrays, rejecting empty or out-of-range groups."""
    if groups is None:
        raise ValueError("groups is required")
    out = []
    for i, g in enumerate(groups):
        g = np.asarray(g, dtype=np.int64).reshape(-1)
        if g.size == 0:
            raise ValueError(f"group {i} is empty")
        if g.min() < 0 or g.max() >= n_instances:
            raise ValueError(f"group {i} references instances outside [0, {n_instances})")
        out.append(g)
    return tuple(out)


def check_noisy_dists(S, n_groups, n_classes=None):
    S = check_array(S, dtype=np.float64, ensure_min_samples=0)
    if S.shape[0] != n_groups:
        raise ValueError(f"expected {n_groups} noisy distributions, got {S.shape[0]}")
    if n_classes is not None and S.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} classes, got {S.shape[1]}")
    return S
