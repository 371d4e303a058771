"""ResNet-like weight-sharing supernetwork.

The network is a 3x3 stem, then per stage a stride-2 transition conv and up
to ``max_depth`` residual blocks ``y = x + W2 * relu(W1 * x)``. Nothing has a
bias except the classifier head, and there is no normalization, so a block
whose weights are masked to zero is exactly the identity.

Parameter names::

    stem            (C0, in, 3, 3)
    s{s}.down       (C_s, C_{s-1}, 3, 3)
    s{s}.b{b}.w1    (H_s, C_s, 3, 3)
    s{s}.b{b}.w2    (C_s, H_s, 3, 3)
    head.w          (C_last, classes)
    head.b          (classes,)

The same forward/backward code runs on the full supernet (with masked
weights) and on compact extracted subnets; the structure is read from the
parameter names and shapes.
"""

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import toml

from zooscout.errors import DataError, FormatError, NumericalError, UsageError
from zooscout.numerics import (
    adam_init,
    adam_step,
    conv3x3,
    conv3x3_backward,
    load_tensors,
    make_rng,
    matmul,
    relu,
    relu_backward,
    save_tensors,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

DIMENSIONS = ("depth", "width", "expansion")


def active_channels(fraction, channels):
    """Leading channel count kept by a width/expansion fraction."""
    return max(1, math.ceil(round(fraction * channels, 9)))


# -------------------------------
# Search space and architectures
# -------------------------------
@dataclass(frozen=True)
class StageChoice:
    depth: int
    width: float
    expansion: float


@dataclass(frozen=True)
class ArchitectureConfig:
    stages: tuple

    def key(self):
        return "|".join(f"{c.depth}-{c.width:g}-{c.expansion:g}" for c in self.stages)

    def to_list(self):
        return [[c.depth, c.width, c.expansion] for c in self.stages]

    @classmethod
    def from_list(cls, rows):
        return cls(tuple(StageChoice(int(d), float(w), float(e)) for d, w, e in rows))

    def __str__(self):
        return self.key()


@dataclass(frozen=True)
class SearchSpace:
    stages: int = 3
    depth_options: tuple = (1, 2)
    width_options: tuple = (0.5, 1.0)
    expansion_options: tuple = (0.5, 1.0)
    base_channels: int = 8
    input_shape: tuple = (1, 16, 16)
    num_classes: int = 4

    def validate(self):
        if self.stages < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise UsageError("space: stages, base_channels must be >= 1 and num_classes >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise UsageError(f"space: bad input_shape {self.input_shape}")
        for dim in DIMENSIONS:
            opts = self.options(dim)
            if not opts:
                raise UsageError(f"space: {dim}_options is empty")
            if len(set(opts)) != len(opts):
                raise UsageError(f"space: {dim}_options has duplicates")
        if any(int(d) != d or d < 1 for d in self.depth_options):
            raise UsageError("space: depth options must be positive integers")
        for dim in ("width", "expansion"):
            if any(not 0 < f <= 1 for f in self.options(dim)):
                raise UsageError(f"space: {dim} fractions must lie in (0, 1]")
            for s in range(self.stages):
                counts = {active_channels(f, self.stage_channels(s)) for f in self.options(dim)}
                if len(counts) != len(self.options(dim)):
                    raise UsageError(f"space: {dim} options collide on stage {s} channel counts")
        return self

    def options(self, dim):
        return {"depth": self.depth_options, "width": self.width_options,
                "expansion": self.expansion_options}[dim]

    @property
    def max_depth(self):
        return max(self.depth_options)

    def stage_channels(self, s):
        return self.base_channels * 2 ** s

    def hidden_channels(self, s):
        return self.stage_channels(s)

    def size(self):
        per_stage = len(self.depth_options) * len(self.width_options) * len(self.expansion_options)
        return per_stage ** self.stages

    def configs(self):
        """Every valid configuration, in a fixed lexicographic order."""
        choices = [StageChoice(d, w, e) for d, w, e in
                   itertools.product(self.depth_options, self.width_options, self.expansion_options)]
        for combo in itertools.product(choices, repeat=self.stages):
            yield ArchitectureConfig(combo)

    def maximal(self):
        best = StageChoice(self.max_depth, max(self.width_options), max(self.expansion_options))
        return ArchitectureConfig((best,) * self.stages)

    def contains(self, cfg):
        return len(cfg.stages) == self.stages and all(
            c.depth in self.depth_options and c.width in self.width_options
            and c.expansion in self.expansion_options for c in cfg.stages)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}).validate()

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def param_layout(space):
    shapes = {"stem": (space.base_channels, space.input_shape[0], 3, 3)}
    prev = space.base_channels
    for s in range(space.stages):
        c, h = space.stage_channels(s), space.hidden_channels(s)
        shapes[f"s{s}.down"] = (c, prev, 3, 3)
        for b in range(space.max_depth):
            shapes[f"s{s}.b{b}.w1"] = (h, c, 3, 3)
            shapes[f"s{s}.b{b}.w2"] = (c, h, 3, 3)
        prev = c
    shapes["head.w"] = (prev, space.num_classes)
    shapes["head.b"] = (space.num_classes,)
    return shapes


def init_supernet(space, rng):
    """He-normal conv weights; residual output convs start at half scale."""
    params = {}
    for name, shape in param_layout(space).items():
        if name == "head.b":
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = shape[0] if name == "head.w" else int(np.prod(shape[1:]))
        std = math.sqrt((1.0 if name == "head.w" else 2.0) / fan_in)
        if name.endswith(".w2"):
            std *= 0.5
        params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return params


# -------------------------------
# Masks
# -------------------------------
def _stage_counts(space, cfg):
    widths = [active_channels(c.width, space.stage_channels(s)) for s, c in enumerate(cfg.stages)]
    hidden = [active_channels(c.expansion, space.hidden_channels(s)) for s, c in enumerate(cfg.stages)]
    return widths, hidden


def config_to_mask(space, cfg):
    """Binary mask for ``cfg``: trailing blocks zeroed, channel prefixes kept."""
    if not space.contains(cfg):
        raise UsageError(f"architecture {cfg} is not in the search space")
    widths, hidden = _stage_counts(space, cfg)
    mask = {name: np.zeros(shape, dtype=np.float32) for name, shape in param_layout(space).items()}
    mask["stem"][:] = 1
    prev = space.base_channels
    for s, choice in enumerate(cfg.stages):
        a, h = widths[s], hidden[s]
        mask[f"s{s}.down"][:a, :prev] = 1
        for b in range(choice.depth):
            mask[f"s{s}.b{b}.w1"][:h, :a] = 1
            mask[f"s{s}.b{b}.w2"][:a, :h] = 1
        prev = a
    mask["head.w"][:prev] = 1
    mask["head.b"][:] = 1
    return mask


def _option_for(space, dim, count, channels):
    for opt in space.options(dim):
        if active_channels(opt, channels) == count:
            return opt
    raise UsageError(f"mask has {count} active {dim} channels, which matches no option")


def mask_to_config(space, mask):
    """Decode a mask produced by ``config_to_mask`` back into its configuration."""
    stages = []
    for s in range(space.stages):
        depth = sum(1 for b in range(space.max_depth) if mask[f"s{s}.b{b}.w1"].any())
        if depth not in space.depth_options:
            raise UsageError(f"stage {s}: {depth} active blocks matches no depth option")
        width_rows = int(mask[f"s{s}.down"].reshape(space.stage_channels(s), -1).any(axis=1).sum())
        hidden_rows = int(mask[f"s{s}.b0.w1"].reshape(space.hidden_channels(s), -1).any(axis=1).sum())
        stages.append(StageChoice(
            depth,
            _option_for(space, "width", width_rows, space.stage_channels(s)),
            _option_for(space, "expansion", hidden_rows, space.hidden_channels(s)),
        ))
    return ArchitectureConfig(tuple(stages))


def apply_mask(params, mask):
    if set(params) != set(mask):
        raise UsageError("mask is not aligned with the supernet parameters")
    for name, p in params.items():
        if p.shape != mask[name].shape:
            raise UsageError(f"mask shape {mask[name].shape} does not match '{name}' {p.shape}")
    return {name: p * mask[name] for name, p in params.items()}


def extract_subnet(params, space, cfg):
    """Materialize the compact standalone network of ``cfg`` (copied weights)."""
    if not space.contains(cfg):
        raise UsageError(f"architecture {cfg} is not in the search space")
    widths, hidden = _stage_counts(space, cfg)
    out = {"stem": params["stem"].copy()}
    prev = space.base_channels
    for s, choice in enumerate(cfg.stages):
        a, h = widths[s], hidden[s]
        out[f"s{s}.down"] = params[f"s{s}.down"][:a, :prev].copy()
        for b in range(choice.depth):
            out[f"s{s}.b{b}.w1"] = params[f"s{s}.b{b}.w1"][:h, :a].copy()
            out[f"s{s}.b{b}.w2"] = params[f"s{s}.b{b}.w2"][:a, :h].copy()
        prev = a
    out["head.w"] = params["head.w"][:prev].copy()
    out["head.b"] = params["head.b"].copy()
    return out


# -------------------------------
# Forward / backward
# -------------------------------
def _structure(params):
    stages = []
    s = 0
    while f"s{s}.down" in params:
        b = 0
        while f"s{s}.b{b}.w1" in params:
            b += 1
        stages.append(b)
        s += 1
    return stages


def trunk_forward(params, x, gates=None):
    """Penultimate (post-pooling) features and the layer cache."""
    gates = gates or {}
    cache = {"gates": {}}

    def act(name, h):
        h, gate = relu(h, gates.get(name))
        cache["gates"][name] = gate
        return h

    h, cache["stem"] = conv3x3(x, params["stem"], 1)
    h = act("stem", h)
    for s, depth in enumerate(_structure(params)):
        h, cache[f"s{s}.down"] = conv3x3(h, params[f"s{s}.down"], 2)
        h = act(f"s{s}.down", h)
        for b in range(depth):
            name = f"s{s}.b{b}"
            t, cache[f"{name}.w1"] = conv3x3(h, params[f"{name}.w1"], 1)
            t = act(f"{name}.w1", t)
            u, cache[f"{name}.w2"] = conv3x3(t, params[f"{name}.w2"], 1)
            h = h + u
    cache["pool_shape"] = h.shape
    feat = h.mean(axis=(2, 3))
    cache["feat"] = feat
    return feat, cache


def forward(params, x, gates=None):
    feat, cache = trunk_forward(params, x, gates)
    return matmul(feat, params["head.w"]) + params["head.b"], cache


def backward(params, cache, dlogits):
    grads = {
        "head.w": matmul(cache["feat"].T, dlogits),
        "head.b": dlogits.sum(axis=0),
    }
    n, c, hh, ww = cache["pool_shape"]
    dfeat = matmul(dlogits, params["head.w"].T)
    dh = np.broadcast_to((dfeat / (hh * ww))[:, :, None, None], (n, c, hh, ww)).copy()
    gates = cache["gates"]
    for s, depth in reversed(list(enumerate(_structure(params)))):
        for b in reversed(range(depth)):
            name = f"s{s}.b{b}"
            dt, grads[f"{name}.w2"] = conv3x3_backward(dh, params[f"{name}.w2"], cache[f"{name}.w2"])
            dt = relu_backward(dt, gates[f"{name}.w1"])
            dx, grads[f"{name}.w1"] = conv3x3_backward(dt, params[f"{name}.w1"], cache[f"{name}.w1"])
            dh = dh + dx
        dh = relu_backward(dh, gates[f"s{s}.down"])
        dh, grads[f"s{s}.down"] = conv3x3_backward(dh, params[f"s{s}.down"], cache[f"s{s}.down"])
    dh = relu_backward(dh, gates["stem"])
    _, grads["stem"] = conv3x3_backward(dh, params["stem"], cache["stem"])
    return grads


def _check_input(space, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(space.input_shape):
        raise UsageError(f"input shape {x.shape[1:]} does not match {tuple(space.input_shape)}")


def subnet_forward(params, mask, x, space=None):
    """Logits of s(x; m * Theta)."""
    if space is not None:
        _check_input(space, x)
    return forward(apply_mask(params, mask), x)[0]


def loss_and_grads(params, x, y, mask=None, gates=None):
    """Cross-entropy of the (optionally masked) network and its gradient w.r.t. ``params``.

    Masked entries get exactly zero gradient.
    """
    effective = params if mask is None else apply_mask(params, mask)
    logits, cache = forward(effective, x, gates)
    loss, dlogits = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss (logit range {logits.min():.3g}..{logits.max():.3g})")
    grads = backward(effective, cache, dlogits)
    if mask is not None:
        grads = {name: g * mask[name] for name, g in grads.items()}
    correct = int((logits.argmax(axis=1) == y).sum())
    return loss, grads, correct, cache


def predict(params, x, batch_size=256):
    out = [forward(params, x[i:i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params, x, y):
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty split")
    return float(np.mean(predict(params, x) == y))


def estimate_performance(params, mask, split):
    """Top-1 accuracy of the subnet with inherited weights on ``split = (x, y)``."""
    x, y = split
    return accuracy(apply_mask(params, mask), x, y)


# -------------------------------
# Strict-fairness sampling
# -------------------------------
class FairnessSampler:
    """Per (stage, dimension) permutation pools; a slot with k options emits
    each option exactly once in every k consecutive draws."""

    def __init__(self, space, rng):
        self.space = space
        self.rng = rng
        self.pools = {(s, dim): [] for s in range(space.stages) for dim in DIMENSIONS}
        self.refills = 0

    def _next(self, slot):
        pool = self.pools[slot]
        if not pool:
            options = list(self.space.options(slot[1]))
            pool.extend(options[i] for i in self.rng.permutation(len(options)))
            self.refills += 1
        return pool.pop(0)

    def sample_fair(self, n):
        if n < 1:
            raise UsageError("sample_fair needs n >= 1")
        out = []
        for _ in range(n):
            stages = tuple(
                StageChoice(*(self._next((s, dim)) for dim in DIMENSIONS))
                for s in range(self.space.stages)
            )
            out.append(ArchitectureConfig(stages))
        return out


# -------------------------------
# Training
# -------------------------------
@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 4
    stage2_epochs: int = 6
    subnets_per_batch: int = 4
    batch_size: int = 32
    lr: float = 5e-3

    def validate(self):
        if self.stage1_epochs < 1:
            raise UsageError("schedule: stage1_epochs must be >= 1")
        if self.stage2_epochs < 0 or self.subnets_per_batch < 1 or self.batch_size < 1:
            raise UsageError("schedule: stage2_epochs >= 0, subnets_per_batch >= 1, batch_size >= 1")
        return self

    @classmethod
    def from_total(cls, epochs, stage1_fraction=0.4, **kwargs):
        stage1 = max(1, int(round(epochs * stage1_fraction)))
        return cls(stage1_epochs=stage1, stage2_epochs=max(0, epochs - stage1), **kwargs).validate()


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    optimizer: object = None


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_supernet(params, space, dataset, schedule, rng):
    """Two-stage training: the maximal net alone, then the mean loss of
    ``subnets_per_batch`` fairly sampled subnets per batch."""
    schedule.validate()
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    if len(y_train) == 0:
        raise DataError(f"{dataset.id}: empty training split")
    _check_input(space, x_train)

    state = adam_init(params, lr=schedule.lr)
    sampler = FairnessSampler(space, rng)
    full_mask = config_to_mask(space, space.maximal())
    masks = {}
    log = []
    total = schedule.stage1_epochs + schedule.stage2_epochs
    for epoch in range(total):
        stage = 1 if epoch < schedule.stage1_epochs else 2
        losses, correct, seen = [], 0, 0
        for idx in _batches(rng, len(y_train), schedule.batch_size):
            xb, yb = x_train[idx], y_train[idx]
            if stage == 1:
                loss, grads, hits, _ = loss_and_grads(params, xb, yb, full_mask)
                seen += len(idx)
            else:
                cfgs = sampler.sample_fair(schedule.subnets_per_batch)
                grads, loss, hits = None, 0.0, 0
                for cfg in cfgs:
                    if cfg.key() not in masks:
                        masks[cfg.key()] = config_to_mask(space, cfg)
                    l_i, g_i, h_i, _ = loss_and_grads(params, xb, yb, masks[cfg.key()])
                    loss += l_i / len(cfgs)
                    hits += h_i
                    grads = g_i if grads is None else {k: grads[k] + g_i[k] for k in grads}
                grads = {k: g / len(cfgs) for k, g in grads.items()}
                seen += len(idx) * len(cfgs)
            adam_step(params, grads, state)
            losses.append(loss)
            correct += hits
        record = EpochRecord(epoch, stage, float(np.mean(losses)), correct / seen,
                             accuracy(params, x_val, y_val))
        log.append(record)
        logger.info("%s epoch %d/%d (stage %d): loss %.4f train %.3f val %.3f",
                    dataset.id, epoch + 1, total, stage, record.train_loss, record.train_acc, record.val_acc)
    return TrainResult(params, log, state)


def train_network(params, train, val, epochs, rng, batch_size=32, lr=5e-3, dataset_id="network", state=None):
    """Plain training of a standalone (compact) network; pass ``state`` to resume an optimizer."""
    x_train, y_train = train
    x_val, y_val = val
    if len(y_train) == 0:
        raise DataError(f"{dataset_id}: empty training split")
    state = state or adam_init(params, lr=lr)
    log = []
    for epoch in range(epochs):
        losses, correct = [], 0
        for idx in _batches(rng, len(y_train), batch_size):
            loss, grads, hits, _ = loss_and_grads(params, x_train[idx], y_train[idx])
            adam_step(params, grads, state)
            losses.append(loss)
            correct += hits
        log.append(EpochRecord(epoch, 0, float(np.mean(losses)), correct / len(y_train),
                               accuracy(params, x_val, y_val)))
        logger.debug("%s epoch %d/%d: loss %.4f val %.3f", dataset_id, epoch + 1, epochs,
                     log[-1].train_loss, log[-1].val_acc)
    return TrainResult(params, log, state)


def scratch_train(space, cfg, dataset, epochs, seed, batch_size=32, lr=5e-3):
    """Train ``cfg`` from a fresh initialization; returns its validation accuracy."""
    params = extract_subnet(init_supernet(space, _seeded(seed, "weights", cfg)), space, cfg)
    result = train_network(params, dataset.split("train"), dataset.split("val"), epochs,
                           _seeded(seed, "sampling", cfg), batch_size, lr, dataset.id)
    return result.log[-1].val_acc if result.log else accuracy(params, *dataset.split("val"))


def _seeded(seed, stream, cfg):
    digest = int(hashlib.sha256(cfg.key().encode()).hexdigest()[:8], 16)
    return make_rng(seed, stream, digest)


# -------------------------------
# Checkpoints
# -------------------------------
@dataclass
class SupernetCheckpoint:
    params: dict
    space: SearchSpace
    meta: dict
    path: Path = None

    @property
    def dataset_id(self):
        return self.meta["dataset_id"]


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".toml")


def save_supernet(path, params, space, meta):
    names = list(param_layout(space))
    save_tensors(path, [params[n] for n in names])
    doc = {"space": space.to_dict(), "tensors": names, **meta}
    sidecar_path(path).write_text(toml.dumps(doc))
    logger.info("saved supernet checkpoint %s", path)


def load_supernet(path):
    path = Path(path)
    side = sidecar_path(path)
    if not path.is_file() or not side.is_file():
        raise DataError(f"{path}: missing checkpoint or its sidecar {side.name}")
    doc = toml.loads(side.read_text())
    space = SearchSpace.from_dict(doc.pop("space"))
    names = doc.pop("tensors")
    tensors = load_tensors(path)
    if len(tensors) != len(names):
        raise FormatError(f"{path}: {len(tensors)} tensors but sidecar lists {len(names)}")
    params = dict(zip(names, tensors))
    for name, shape in param_layout(space).items():
        if params.get(name) is None or params[name].shape != shape:
            raise FormatError(f"{path}: tensor '{name}' does not match the search space")
    return SupernetCheckpoint({k: v.copy() for k, v in params.items()}, space, doc, path)


def log_to_records(log):
    return [asdict(r) for r in log]
