import numpy as np

from ..errors import UsageError


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise UsageError(f"logits must be (N, C), got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"labels must have shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise UsageError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.astype(np.float64), axis=1)
    loss = float(-logp[np.arange(n), labels].sum() / n)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
