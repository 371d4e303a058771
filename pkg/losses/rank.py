import numpy as np

from zooscout.errors import UsageError
from zooscout.numerics import log_sigmoid, sigmoid

UNIT_TOL = 1e-4


def check_unit(name, emb):
    norms = np.linalg.norm(np.atleast_2d(emb), axis=1)
    if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
        raise UsageError(f"{name} must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def loss_rank(d_emb, model_embs, pairs, beta):
    """Logistic pairwise loss: mean of -log sigmoid(beta * (d.e_j - d.e_k)) over
    pairs (j, k) where model j outperforms model k.

    Returns ``(value, d d_emb, d model_embs)``.
    """
    check_unit("dataset embedding", d_emb)
    check_unit("model embeddings", model_embs)
    d_d = np.zeros_like(d_emb)
    d_models = np.zeros_like(model_embs)
    if len(pairs) == 0:
        return 0.0, d_d, d_models

    j, k = np.asarray(pairs).T
    sims = model_embs @ d_emb
    z = beta * (sims[j] - sims[k])
    value = float(np.mean(-log_sigmoid(z)))

    dgap = -beta * sigmoid(-z) / len(j)
    d_d = (dgap[:, None] * (model_embs[j] - model_embs[k])).sum(axis=0)
    np.add.at(d_models, j, dgap[:, None] * d_emb)
    np.add.at(d_models, k, -dgap[:, None] * d_emb)
    return value, d_d, d_models
