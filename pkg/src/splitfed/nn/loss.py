import numpy as np


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    # the max entry contributes exactly 1; log1p of the rest keeps tiny losses resolvable
    rest = exp.copy()
    rest[rows, shifted.argmax(axis=1)] = 0
    log_total = np.log1p(rest.sum(axis=1))
    loss = float(np.mean(log_total - shifted[rows, labels]))
    grad = exp / total
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
