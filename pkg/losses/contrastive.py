import math

import numpy as np

from zooscout.errors import UsageError


def top_quantile(perfs, q=0.2):
    """Indices of the best ceil(q * n) models (at least one); ties keep lower index."""
    perfs = np.asarray(perfs)
    count = max(1, math.ceil(q * len(perfs)))
    return np.lexsort((np.arange(len(perfs)), -perfs))[:count]


def _logsumexp(v):
    top = v.max()
    return top + np.log(np.exp(v - top).sum())


def loss_contrastive(d_emb, model_embs, positives, temperature=0.1):
    """-log(sum_pos exp(d.e_p / t) / sum_all exp(d.e_m / t)).

    Returns ``(value, d d_emb, d model_embs)``.
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.size == 0:
        raise UsageError("loss_contrastive: no positives")
    if temperature <= 0:
        raise UsageError("loss_contrastive: temperature must be > 0")
    logits = model_embs @ d_emb / temperature
    value = float(_logsumexp(logits) - _logsumexp(logits[positives]))

    p_all = np.exp(logits - logits.max())
    p_all /= p_all.sum()
    p_pos = np.exp(logits[positives] - logits[positives].max())
    p_pos /= p_pos.sum()
    dlogits = p_all
    np.subtract.at(dlogits, positives, p_pos)
    d_d = model_embs.T @ dlogits / temperature
    d_models = dlogits[:, None] * d_emb[None, :] / temperature
    return value, d_d, d_models
