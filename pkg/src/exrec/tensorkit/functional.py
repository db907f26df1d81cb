import numpy as np
from scipy.special import expit, log_expit

from ..errors import NumericError

sigmoid = expit
log_sigmoid = log_expit


def softplus(x):
    return np.logaddexp(0.0, x)


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def activation_grad(kind: str, pre, out, dout):
    """Backward through an elementwise activation given pre- and post-activation values."""
    if kind == "identity":
        return dout
    if kind == "sigmoid":
        return dout * out * (1.0 - out)
    if kind == "softplus":
        return dout * expit(pre)
    if kind == "relu":
        return dout * (pre > 0)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    raise ValueError(f"unknown activation {kind!r}")


def apply_activation(kind: str, x):
    if kind == "identity":
        return x
    if kind == "sigmoid":
        return expit(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return arr
