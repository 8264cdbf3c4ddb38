"""Input checks shared by the estimator and the runner."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .signal_data import DataValidationError


def check_signals(X, y=None, architecture="mlp"):
    """Return ``(X, y)`` as float arrays; variable-length recordings stay a list."""
    if architecture == "masked_cnn":
        if isinstance(X, (list, tuple)):
            X = [check_array(x, dtype=np.float64) for x in X]
            leads = {x.shape[0] for x in X}
            if len(leads) > 1:
                raise DataValidationError(f"recordings have differing lead counts {sorted(leads)}")
        else:
            X = check_array(X, dtype=np.float64, allow_nd=True)
            if X.ndim != 3:
                raise DataValidationError(f"masked_cnn expects (n, leads, T) input, got {X.shape}")
        if y is not None:
            y = check_array(y, ensure_2d=False, dtype=None)
            if len(y) != len(X):
                raise DataValidationError(f"{len(X)} recordings but {len(y)} labels")
        return X, y
    if y is None:
        return check_array(X, dtype=np.float64), None
    return check_X_y(X, y, dtype=np.float64)


def check_mask(mask, X):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (X.shape[0], 1, X.shape[-1]):
        raise DataValidationError(f"mask shape {mask.shape} does not match signals {X.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise DataValidationError("mask entries must be 0 or 1")
    return mask
