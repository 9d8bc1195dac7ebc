"""Input checks shared by the estimator and the command line."""
import numpy as np

from .data import ContentTable, InteractionSequence


def check_sequences(X, n_items=None, min_length=1):
    """Return ``X`` as a list of int64 arrays, validating indices and lengths."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    out = []
    for r, s in enumerate(X):
        if isinstance(s, InteractionSequence):
            s = s.items
        arr = np.asarray(s)
        if arr.ndim != 1:
            raise ValueError(f"sequence {r} is not one-dimensional")
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"sequence {r} contains non-integer item indices")
        arr = arr.astype(np.int64)
        if arr.size < min_length:
            raise ValueError(f"sequence {r} has {arr.size} items, need at least {min_length}")
        if arr.size and (arr.min() < 0 or (n_items is not None and arr.max() >= n_items)):
            raise ValueError(f"sequence {r} has item indices outside [0, {n_items})")
        out.append(arr)
    return out


def check_content(content, n_items):
    """Coerce an array or ContentTable into a ContentTable with a zero PAD row."""
    if content is None:
        return None
    if isinstance(content, ContentTable):
        vectors = np.asarray(content.vectors, dtype=np.float64)
    else:
        vectors = np.asarray(content, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("content must be a 2-D array (items x features)")
        if vectors.shape[0] == n_items:
            vectors = np.vstack([vectors, np.zeros((1, vectors.shape[1]))])
    if vectors.shape[0] != n_items + 1:
        raise ValueError(f"content has {vectors.shape[0]} rows, expected {n_items} items (+ PAD)")
    if not np.isfinite(vectors).all():
        raise ValueError("content vectors contain NaN or Inf")
    if np.any(vectors[-1] != 0):
        raise ValueError("the PAD content row must be zero")
    return ContentTable(vectors.shape[1], vectors)
