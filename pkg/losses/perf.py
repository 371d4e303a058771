import numpy as np

from zooscout.errors import UsageError


def loss_perf(pred, target):
    """Mean squared error between predicted and estimated performance."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.size == 0:
        raise UsageError("loss_perf: empty batch")
    if pred.shape != target.shape:
        raise UsageError(f"loss_perf: {pred.shape} predictions vs {target.shape} targets")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
