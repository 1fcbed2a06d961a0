"""Input validation helpers for array-facing entry points."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ValidationError


def check_embeddings(X, expected_dim: int | None = None) -> np.ndarray:
    """Validate a (n_samples, embed_dim) float matrix; rows need not be unit."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, force_all_finite=True)
    if X.shape[0] < 1:
        raise ValidationError("need at least one sample")
    if expected_dim is not None and X.shape[1] != expected_dim:
        raise ValidationError(
            f"embedding width {X.shape[1]} does not match the fitted width {expected_dim}"
        )
    return X


def check_pair_labels(y, num_states: int | None = None,
                      num_objects: int | None = None) -> np.ndarray:
    """Validate (n_samples, 2) integer (state_id, object_id) labels."""
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValidationError(f"labels must have shape (n, 2), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(y)
        if not np.allclose(y, rounded):
            raise ValidationError("labels must be integer (state_id, object_id) pairs")
        y = rounded
    y = y.astype(np.int64)
    if (y < 0).any():
        raise ValidationError("label ids must be non-negative")
    if num_states is not None and int(y[:, 0].max()) >= num_states:
        raise ValidationError(f"state id {int(y[:, 0].max())} outside vocabulary of {num_states}")
    if num_objects is not None and int(y[:, 1].max()) >= num_objects:
        raise ValidationError(f"object id {int(y[:, 1].max())} outside vocabulary of {num_objects}")
    return y
