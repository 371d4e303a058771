import numpy as np

from zooscout.errors import UsageError


def loss_fid(dataset_embs, fid_matrix, sigma):
    """FID-weighted embedding attraction:
    mean over ordered pairs i != j of exp(-FID_ij / sigma) * |E_i - E_j|^2.

    Returns ``(value, d dataset_embs)``.
    """
    if sigma <= 0:
        raise UsageError(f"loss_fid: sigma must be > 0, got {sigma}")
    fid_matrix = np.asarray(fid_matrix, dtype=np.float64)
    n = dataset_embs.shape[0]
    if fid_matrix.shape != (n, n):
        raise UsageError(f"loss_fid: FID matrix {fid_matrix.shape} for {n} datasets")
    if not np.allclose(fid_matrix, fid_matrix.T) or fid_matrix.min() < 0 or np.any(np.diag(fid_matrix) != 0):
        raise UsageError("loss_fid: FID matrix must be symmetric, non-negative, zero on the diagonal")
    if n < 2:
        return 0.0, np.zeros_like(dataset_embs)

    weights = np.exp(-fid_matrix / sigma)
    np.fill_diagonal(weights, 0.0)
    weights = weights.astype(dataset_embs.dtype)
    diff = dataset_embs[:, None, :] - dataset_embs[None, :, :]
    pairs = n * (n - 1)
    value = float((weights * (diff ** 2).sum(axis=-1)).sum() / pairs)
    grad = 2.0 * ((weights + weights.T)[:, :, None] * diff).sum(axis=1) / pairs
    return value, grad
