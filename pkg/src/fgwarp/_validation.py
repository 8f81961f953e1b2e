"""Input validation helpers shared by the numerical kernels and the estimator."""

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def check_tensor4(x, name="input", channels=None, finite=True):
    """Return ``x`` as a C-contiguous float64 array of rank 4.

    Parameters
    ----------
    x : array-like
        Candidate tensor laid out as (batch, channel, height, width).
    name : str
        Used in error messages.
    channels : int, optional
        Required channel count.
    finite : bool
        Reject NaN/Inf entries when True.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {arr.shape[1]}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_flow(flow, name="flow"):
    return check_tensor4(flow, name=name, channels=2)


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")


def check_same_spatial(a, b, names=("a", "b")):
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"{names[0]} spatial size {a.shape[2:]} != {names[1]} spatial size {b.shape[2:]}"
        )


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
