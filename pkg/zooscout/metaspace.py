"""Joint model/dataset meta-space.

E_m and E_d are MLPs whose outputs are L2-normalized; the predictor phi reads
the concatenated embeddings and ends in a sigmoid. Training minimizes the
weighted sum of the selected losses from the ``losses`` package with Adam.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import toml

from losses.contrastive import top_quantile
from losses.dispatcher import get_loss, parse_loss_set
from zooscout.errors import DataError, FormatError, NumericalError, UsageError
from zooscout.numerics import (
    Layer,
    adam_init,
    adam_step,
    check_finite,
    init_mlp,
    l2_normalize,
    l2_normalize_backward,
    load_tensors,
    make_rng,
    mlp_backward,
    mlp_forward_cached,
    mlp_gates,
    save_tensors,
    sigmoid,
)
from zooscout.statistics import fid_matrix

logger = logging.getLogger(__name__)

ENCODERS = ("em", "ed", "phi")


@dataclass
class MetaSpaceParams:
    layers: dict  # "em" / "ed" / "phi" -> list[Layer]
    norm: dict  # "em" / "ed" -> (shift vector, scale scalar)
    beta: float = 10.0
    sigma_fid: float | None = None
    sigma_rule: str = "nearest"
    lam_perf: float = 1.0
    lam_rank: float = 1.0
    lam_fid: float = 1.0
    lam_contrastive: float = 1.0
    temperature: float = 0.1
    contrastive_q: float = 0.2

    @property
    def embed_dim(self):
        return self.layers["em"][-1].weight.shape[1]

    def tensors(self):
        """Trainable arrays by name; the arrays are shared with ``layers``."""
        out = {}
        for enc in ENCODERS:
            for i, layer in enumerate(self.layers[enc]):
                out[f"{enc}.{i}.w"] = layer.weight
                out[f"{enc}.{i}.b"] = layer.bias
        return out

    def with_tensors(self, tensors):
        layers = {
            enc: [Layer(tensors[f"{enc}.{i}.w"], tensors[f"{enc}.{i}.b"], layer.activation)
                  for i, layer in enumerate(self.layers[enc])]
            for enc in ENCODERS
        }
        return MetaSpaceParams(layers, self.norm, **self.hyper())

    def hyper(self):
        return {
            "beta": self.beta,
            "sigma_fid": self.sigma_fid,
            "sigma_rule": self.sigma_rule,
            "lam_perf": self.lam_perf,
            "lam_rank": self.lam_rank,
            "lam_fid": self.lam_fid,
            "lam_contrastive": self.lam_contrastive,
            "temperature": self.temperature,
            "contrastive_q": self.contrastive_q,
        }


def init_metaspace(model_dim, dataset_dim, embed_dim=64, hidden=(128,), seed=0, **hyper):
    rng = make_rng(seed, "weights")
    layers = {
        "em": init_mlp([model_dim, *hidden, embed_dim], rng),
        "ed": init_mlp([dataset_dim, *hidden, embed_dim], rng),
        "phi": init_mlp([2 * embed_dim, *hidden, 1], rng),
    }
    norm = {
        "em": (np.zeros(model_dim, dtype=np.float32), 1.0),
        "ed": (np.zeros(dataset_dim, dtype=np.float32), 1.0),
    }
    return MetaSpaceParams(layers, norm, **hyper)


def fit_input_norm(x):
    """Center by the column mean, divide by one global RMS scale.

    A single row is only scaled: centering it would feed the encoder zeros.
    """
    shift = x.mean(axis=0).astype(np.float32) if len(x) > 1 else np.zeros(x.shape[1], dtype=np.float32)
    scale = float(np.sqrt(np.mean((x - shift) ** 2))) + 1e-6
    return shift, scale


def _encode(params, enc, x, gates=None):
    shift, scale = params.norm[enc]
    raw, cache = mlp_forward_cached(((x - shift) / scale).astype(x.dtype), params.layers[enc], gates)
    unit, norms = l2_normalize(raw)
    return unit, (cache, unit, norms)


def embed_models(params, x):
    return _encode(params, "em", np.atleast_2d(x))[0]


def embed_datasets(params, x):
    return _encode(params, "ed", np.atleast_2d(x))[0]


def predict_performance(params, model_embs, dataset_embs):
    logits, _ = mlp_forward_cached(np.concatenate([model_embs, dataset_embs], axis=1), params.layers["phi"])
    return sigmoid(logits[:, 0])


# -------------------------------
# Batches
# -------------------------------
@dataclass
class TrainBatch:
    dataset_ids: list
    dataset_inputs: np.ndarray  # (n_d, d_f)
    model_inputs: np.ndarray  # (n_m, d_m)
    model_dataset: np.ndarray  # (n_m,) row of the model's dataset
    targets: np.ndarray  # (n_m,) P-hat
    groups: list  # per dataset: model row indices
    rank_pairs: list  # per dataset: (j, k) local indices, P-hat_j - P-hat_k > min_gap
    positives: list  # per dataset: local indices of the top-q models
    fid: np.ndarray  # (n_d, n_d)


def rank_pairs(perfs, rng, max_pairs=64, min_gap=1e-4):
    """Up to ``max_pairs`` (j, k) with perfs[j] - perfs[k] > min_gap, sorted."""
    perfs = np.asarray(perfs, dtype=np.float64)
    j, k = np.nonzero(perfs[:, None] - perfs[None, :] > min_gap)
    if len(j) > max_pairs:
        pick = np.sort(rng.choice(len(j), size=max_pairs, replace=False))
        j, k = j[pick], k[pick]
    return np.stack([j, k], axis=1) if len(j) else np.zeros((0, 2), dtype=np.int64)


def make_batch(groups_by_dataset, dataset_inputs, fids, rng, max_pairs=64, min_gap=1e-4,
               models_per_dataset=None, q=0.2):
    """``groups_by_dataset``: list of (dataset_id, model_inputs, targets)."""
    model_rows, owners, targets, groups, pairs, positives = [], [], [], [], [], []
    start = 0
    for d, (_, x_m, perf) in enumerate(groups_by_dataset):
        idx = np.arange(len(perf))
        if models_per_dataset is not None and len(idx) > models_per_dataset:
            idx = np.sort(rng.choice(len(idx), size=models_per_dataset, replace=False))
        model_rows.append(x_m[idx])
        targets.append(perf[idx])
        owners.append(np.full(len(idx), d))
        groups.append(np.arange(start, start + len(idx)))
        pairs.append(rank_pairs(perf[idx], rng, max_pairs, min_gap))
        positives.append(top_quantile(perf[idx], q))
        start += len(idx)
    return TrainBatch(
        dataset_ids=[g[0] for g in groups_by_dataset],
        dataset_inputs=dataset_inputs,
        model_inputs=np.concatenate(model_rows),
        model_dataset=np.concatenate(owners),
        targets=np.concatenate(targets).astype(dataset_inputs.dtype),
        groups=groups,
        rank_pairs=pairs,
        positives=positives,
        fid=fids,
    )


# -------------------------------
# Composite loss
# -------------------------------
def composite_loss(params, batch, loss_set=("perf", "rank", "fid"), gates=None):
    """Weighted loss, per-term values, gradients by tensor name, and the ReLU gates used."""
    gates = gates or {}
    e, (cache_m, unit_m, norms_m) = _encode(params, "em", batch.model_inputs, gates.get("em"))
    d, (cache_d, unit_d, norms_d) = _encode(params, "ed", batch.dataset_inputs, gates.get("ed"))
    pair_in = np.concatenate([e, d[batch.model_dataset]], axis=1)
    logits, cache_p = mlp_forward_cached(pair_in, params.layers["phi"], gates.get("phi"))
    y_hat = sigmoid(logits[:, 0])

    terms = {}
    de = np.zeros_like(e)
    dd = np.zeros_like(d)

    terms["perf"], dy = get_loss("perf")(y_hat, batch.targets)
    dlogits = (params.lam_perf * dy * y_hat * (1 - y_hat))[:, None]
    total = params.lam_perf * terms["perf"]

    if "rank" in loss_set:
        active = [g for g, p in enumerate(batch.rank_pairs) if len(p)]
        value = 0.0
        for g in active:
            rows = batch.groups[g]
            v, g_d, g_e = get_loss("rank")(d[g], e[rows], batch.rank_pairs[g], params.beta)
            scale = params.lam_rank / len(active)
            value += v / len(active)
            dd[g] += scale * g_d
            de[rows] += scale * g_e
        terms["rank"] = value
        total += params.lam_rank * value

    if "fid" in loss_set and len(batch.dataset_ids) >= 2:
        terms["fid"], g_d = get_loss("fid")(d, batch.fid, params.sigma_fid)
        dd += params.lam_fid * g_d
        total += params.lam_fid * terms["fid"]

    if "contrastive" in loss_set:
        value = 0.0
        n_groups = len(batch.groups)
        for g, rows in enumerate(batch.groups):
            v, g_d, g_e = get_loss("contrastive")(d[g], e[rows], batch.positives[g], params.temperature)
            value += v / n_groups
            dd[g] += params.lam_contrastive * g_d / n_groups
            de[rows] += params.lam_contrastive * g_e / n_groups
        terms["contrastive"] = value
        total += params.lam_contrastive * value

    grads = {}
    d_pair, phi_grads = mlp_backward(params.layers["phi"], cache_p, dlogits)
    de += d_pair[:, :e.shape[1]]
    np.add.at(dd, batch.model_dataset, d_pair[:, e.shape[1]:])
    for enc, cache, dy_unit, unit, norms in (("em", cache_m, de, unit_m, norms_m),
                                             ("ed", cache_d, dd, unit_d, norms_d)):
        _, layer_grads = mlp_backward(params.layers[enc], cache, l2_normalize_backward(dy_unit, unit, norms))
        for i, (gw, gb) in enumerate(layer_grads):
            grads[f"{enc}.{i}.w"], grads[f"{enc}.{i}.b"] = gw, gb
    for i, (gw, gb) in enumerate(phi_grads):
        grads[f"phi.{i}.w"], grads[f"phi.{i}.b"] = gw, gb

    used = {"em": mlp_gates(cache_m), "ed": mlp_gates(cache_d), "phi": mlp_gates(cache_p)}
    return float(total), terms, grads, used


# -------------------------------
# Training
# -------------------------------
@dataclass
class TrainedMetaSpace:
    params: MetaSpaceParams
    dataset_ids: list
    loss_set: tuple
    curves: dict = field(default_factory=dict)
    dataset_embeddings: np.ndarray = None
    optimizer_steps: int = 0


def median_fid(fids):
    upper = fids[np.triu_indices(len(fids), k=1)]
    value = float(np.median(upper)) if upper.size else 0.0
    return value if value > 0 else 1.0


def nearest_fid(fids):
    """Median over datasets of the FID to the nearest other dataset.

    Only close neighbours get a sizable attraction weight under this bandwidth.
    """
    if len(fids) < 2:
        return 1.0
    off = np.where(np.eye(len(fids), dtype=bool), np.inf, fids)
    value = float(np.median(off.min(axis=1)))
    return value if value > 0 else 1.0


SIGMA_RULES = {"nearest": nearest_fid, "median": median_fid}


def curve_trend(curve, window=10):
    """Mean of the last ``window`` values minus the mean of the first ``window``."""
    curve = np.asarray(curve, dtype=np.float64)
    window = max(1, min(window, len(curve) // 2 or 1))
    return float(curve[-window:].mean() - curve[:window].mean())


def _training_groups(manifest, cache):
    """Per dataset: its own subnets, then the foreign subnets measured on it, in key order."""
    ids = manifest.datasets()
    if not ids:
        raise DataError("degenerate zoo: no entries")
    by_key = {e.key(): e for e in manifest.entries}
    transfers = manifest.transfers()
    groups = []
    for dataset_id in ids:
        entries = [e for _, e in manifest.by_dataset(dataset_id)]
        if len(entries) < 2:
            raise DataError(f"degenerate zoo: dataset '{dataset_id}' has {len(entries)} model(s), need >= 2")
        measured = transfers.get(dataset_id, {})
        foreign = sorted(k for k in measured if k in by_key)
        x_m = cache.model_matrix(entries + [by_key[k] for k in foreign]).astype(np.float32)
        perf = np.array([e.estimated_perf for e in entries] + [measured[k] for k in foreign], dtype=np.float32)
        groups.append((dataset_id, x_m, perf))
    if transfers:
        logger.info("meta-space: %d transfer pairs across %d datasets",
                    sum(len(g[2]) for g in groups) - len(manifest.entries), len(ids))
    return ids, groups


def train_metaspace(manifest, cache, params, epochs=200, lr=1e-2, seed=0, loss_set=("perf", "rank", "fid"),
                    max_pairs=64, min_gap=1e-4, models_per_dataset=None):
    """Fit E_m, E_d and phi on the zoo; returns a ``TrainedMetaSpace``."""
    loss_set = parse_loss_set(loss_set)
    ids, groups = _training_groups(manifest, cache)
    dataset_inputs = np.stack([cache.datasets[d].mean for d in ids]).astype(np.float32)
    fids = fid_matrix([cache.datasets[d].stats for d in ids])
    if params.sigma_fid is None:
        if params.sigma_rule not in SIGMA_RULES:
            raise UsageError(f"unknown sigma rule '{params.sigma_rule}' (choose from {', '.join(SIGMA_RULES)})")
        params.sigma_fid = SIGMA_RULES[params.sigma_rule](fids)
        logger.debug("FID bandwidth %.4g from the %s rule", params.sigma_fid, params.sigma_rule)
    if "fid" in loss_set and len(ids) < 2:
        logger.warning("only one dataset in the zoo; skipping the FID loss")
    params.norm["em"] = fit_input_norm(np.concatenate([g[1] for g in groups]))
    params.norm["ed"] = fit_input_norm(dataset_inputs)

    rng = make_rng(seed, "pairs")
    tensors = params.tensors()
    state = adam_init(tensors, lr=lr)
    curves = {name: [] for name in ("total", *loss_set)}
    for epoch in range(epochs):
        batch = make_batch(groups, dataset_inputs, fids, rng, max_pairs, min_gap, models_per_dataset,
                           params.contrastive_q)
        total, terms, grads, _ = composite_loss(params, batch, loss_set)
        if not np.isfinite(total):
            raise NumericalError(f"meta-space loss became non-finite at epoch {epoch}: {terms}")
        adam_step(tensors, grads, state)
        curves["total"].append(total)
        for name in loss_set:
            curves[name].append(terms.get(name, 0.0))
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.info("meta-space epoch %d/%d: %s", epoch + 1, epochs,
                        " ".join(f"{k}={v:.4f}" for k, v in terms.items()))

    for arr in tensors.values():
        check_finite("meta-space parameters", arr)
    return TrainedMetaSpace(params, ids, loss_set, curves, embed_datasets(params, dataset_inputs), state.step)


# -------------------------------
# Checkpoints
# -------------------------------
def save_metaspace(path, trained, extra=None):
    path = Path(path)
    params = trained.params
    tensors = params.tensors()
    names = list(tensors)
    arrays = [tensors[n] for n in names]
    arrays += [params.norm["em"][0], params.norm["ed"][0], trained.dataset_embeddings]
    save_tensors(path, arrays)
    header = {
        "tensors": names,
        "activations": {enc: [layer.activation for layer in params.layers[enc]] for enc in ENCODERS},
        "norm_scale": {"em": params.norm["em"][1], "ed": params.norm["ed"][1]},
        "embed_dim": params.embed_dim,
        "dataset_ids": list(trained.dataset_ids),
        "losses": list(trained.loss_set),
        "optimizer_steps": trained.optimizer_steps,
        **{k: v for k, v in params.hyper().items() if v is not None},
        **(extra or {}),
    }
    path.with_name(path.name + ".toml").write_text(toml.dumps(header))
    logger.info("saved meta-space checkpoint %s", path)


def load_metaspace(path):
    """Return (TrainedMetaSpace, header dict)."""
    path = Path(path)
    side = path.with_name(path.name + ".toml")
    if not path.is_file() or not side.is_file():
        raise DataError(f"{path}: missing meta-space checkpoint or header {side.name}")
    header = toml.loads(side.read_text())
    arrays = load_tensors(path)
    names = header["tensors"]
    if len(arrays) != len(names) + 3:
        raise FormatError(f"{path}: tensor count does not match its header")
    tensors = dict(zip(names, arrays))
    layers = {
        enc: [Layer(tensors[f"{enc}.{i}.w"].copy(), tensors[f"{enc}.{i}.b"].copy(), act)
              for i, act in enumerate(header["activations"][enc])]
        for enc in ENCODERS
    }
    norm = {"em": (arrays[-3], header["norm_scale"]["em"]), "ed": (arrays[-2], header["norm_scale"]["ed"])}
    hyper = {k: header[k] for k in MetaSpaceParams(layers, norm).hyper() if k in header}
    params = MetaSpaceParams(layers, norm, **hyper)
    trained = TrainedMetaSpace(params, header["dataset_ids"], tuple(header["losses"]),
                               dataset_embeddings=arrays[-1], optimizer_steps=header.get("optimizer_steps", 0))
    return trained, header
