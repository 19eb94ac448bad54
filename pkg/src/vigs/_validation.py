"""Input validation helpers on top of scikit-learn's ``check_array``."""
import numpy as np
from sklearn.utils.validation import check_array

from .errors import InvalidArgumentError


def check_points(x, name="points") -> np.ndarray:
    """Finite float array of shape (N, 3); N may be zero."""
    a = np.asarray(x, dtype=float)
    if a.size == 0:
        return a.reshape(0, 3)
    try:
        a = check_array(a.reshape(-1, 3) if a.ndim == 1 else a, dtype=np.float64,
                        ensure_2d=True, ensure_min_samples=0)
    except ValueError as exc:
        raise InvalidArgumentError(f"{name}: {exc}") from exc
    if a.shape[1] != 3:
        raise InvalidArgumentError(f"{name} must have 3 columns, got {a.shape[1]}")
    return a


def check_image(img, name="image", channels=None) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if channels is None and a.ndim not in (2, 3):
        raise InvalidArgumentError(f"{name} must be HxW or HxWxC, got shape {a.shape}")
    if channels is not None and (a.ndim != 3 or a.shape[2] != channels):
        raise InvalidArgumentError(f"{name} must be HxWx{channels}, got shape {a.shape}")
    return a


def check_same_shape(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise InvalidArgumentError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
