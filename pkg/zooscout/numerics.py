"""Dense tensor core: layer primitives with hand-derived gradients, Adam,
a finite-difference checker and the MNNSW001 tensor container.

Tensors are plain numpy arrays. Storage and training use float32; every op
keeps the dtype of its inputs so ``grad_check`` can run in float64.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from zooscout.errors import FormatError, NumericalError, TruncationError

logger = logging.getLogger(__name__)

WEIGHT_MAGIC = b"MNNSW001"

# One independent PCG64 stream per purpose, so adding draws in one place
# never shifts the numbers drawn in another.
STREAMS = {
    "weights": 0,
    "probe": 1,
    "sampling": 2,
    "data": 3,
    "split": 4,
    "pairs": 5,
    "finetune": 6,
    "extractor": 7,
    "train": 8,
    "benchmark": 9,
}


def make_rng(seed, stream, *extra):
    """Return a numpy Generator (PCG64) for ``seed`` on a named stream."""
    if stream not in STREAMS:
        raise ValueError(f"unknown rng stream '{stream}'")
    key = (STREAMS[stream],) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")
    return arr


def matmul(a, b):
    """Matrix product with float64 accumulation, result in the inputs' dtype."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.result_type(a.dtype, b.dtype))


# -------------------------------
# Activations
# -------------------------------
def relu(x, gate=None):
    """ReLU; a frozen ``gate`` replaces the sign test (used by grad checks)."""
    if gate is None:
        gate = x > 0
    return x * gate, gate


def relu_backward(dy, gate):
    return dy * gate


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow for large |x|."""
    return np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))


def l2_normalize(x):
    """Row-normalize ``x``; returns (unit rows, row norms)."""
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=-1, keepdims=True)).astype(x.dtype)
    if np.any(norms == 0):
        raise NumericalError("cannot normalize a zero vector")
    return x / norms, norms


def l2_normalize_backward(dy, y, norms):
    # d(x/|x|) = (I - y y^T) / |x|
    return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / norms


# -------------------------------
# Affine layers and MLPs
# -------------------------------
@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"


def init_mlp(sizes, rng, dtype=np.float32, last_activation="identity"):
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = last_activation if i == len(sizes) - 2 else "relu"
        std = np.sqrt((2.0 if act == "relu" else 1.0) / fan_in)
        w = (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)
        layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
    return layers


def mlp_forward_cached(x, layers, gates=None):
    cache = []
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.weight.shape[0]:
            raise ValueError(f"layer {i}: input width {h.shape[-1]} != {layer.weight.shape[0]}")
        inp = h
        h = matmul(h, layer.weight) + layer.bias
        gate = None
        if layer.activation == "relu":
            h, gate = relu(h, None if gates is None else gates[i])
        elif layer.activation != "identity":
            raise ValueError(f"unsupported activation '{layer.activation}'")
        cache.append((inp, gate))
    return h, cache


def mlp_forward(x, layers, gates=None):
    return mlp_forward_cached(x, layers, gates)[0]


def mlp_backward(layers, cache, dy):
    """Return (d input, [(d weight, d bias), ...]) for a cached forward."""
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        inp, gate = cache[i]
        if gate is not None:
            dy = relu_backward(dy, gate)
        grads[i] = (matmul(inp.T, dy), dy.sum(axis=0))
        dy = matmul(dy, layers[i].weight.T)
    return dy, grads


def mlp_gates(cache):
    return [gate for _, gate in cache]


# -------------------------------
# 3x3 convolution (im2col)
# -------------------------------
def _im2col(x, stride):
    n, c, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * 9), (ho, wo)


def _col2im(dcols, x_shape, stride, out_hw):
    n, c, h, w = x_shape
    ho, wo = out_hw
    dcols = dcols.reshape(n, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, 1:-1, 1:-1]


def conv3x3(x, w, stride=1):
    """Bias-free 3x3 convolution, zero padding 1. x: (N,C,H,W), w: (O,C,3,3)."""
    if x.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ValueError(f"conv shape mismatch: input {x.shape}, weight {w.shape}")
    cols, (ho, wo) = _im2col(x, stride)
    out = matmul(cols, w.reshape(w.shape[0], -1).T)
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, stride, (ho, wo))


def conv3x3_backward(dout, w, cache):
    cols, x_shape, stride, out_hw = cache
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = matmul(dflat.T, cols).reshape(w.shape)
    dx = _col2im(matmul(dflat, w.reshape(w.shape[0], -1)), x_shape, stride, out_hw)
    return dx, dw


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    return float(loss), dlogits / n


# -------------------------------
# Adam
# -------------------------------
@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` in place; returns (params, state)."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameter keys")
    for name, g in grads.items():
        if g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ValueError(f"shape mismatch for '{name}': {g.shape} vs {params[name].shape}")
        check_finite(f"gradient '{name}'", g)

    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params, state


# -------------------------------
# Finite-difference check
# -------------------------------
def grad_check(f, params, eps=1e-4, max_coords=None, rng=None):
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` maps a tensor set to ``(value, grads)``. Parameters are copied to
    float64 first. With ``max_coords`` only that many coordinates per tensor
    are checked, drawn from ``rng``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, analytic = f(params)
    if not np.isfinite(value):
        raise NumericalError("grad_check: f is not finite at the base point")

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params)[0]
            flat[i] = orig - eps
            down = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"grad_check: f is not finite around '{name}'[{i}]")
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(a_flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


# -------------------------------
# MNNSW001 container
# -------------------------------
def dump_tensors(tensors):
    """Serialize a list of arrays: magic, u32 count, then per tensor u32 rank, u32 dims, f32 payload."""
    out = [WEIGHT_MAGIC, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        out.append(struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(out)


def parse_tensors(blob, source="<bytes>"):
    def take(offset, size):
        if offset + size > len(blob):
            raise TruncationError(source, offset, offset + size - len(blob))
        return blob[offset:offset + size], offset + size

    magic, off = take(0, len(WEIGHT_MAGIC))
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    raw, off = take(off, 4)
    (count,) = struct.unpack("<I", raw)
    tensors = []
    for _ in range(count):
        raw, off = take(off, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, off = take(off, 4 * rank)
        shape = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(shape, dtype=np.int64))
        raw, off = take(off, 4 * size)
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if off != len(blob):
        raise FormatError(f"{source}: {len(blob) - off} trailing bytes")
    return tensors


def save_tensors(path, tensors):
    with open(path, "wb") as f:
        f.write(dump_tensors(tensors))
    logger.debug("wrote %d tensors to %s", len(tensors), path)


def load_tensors(path):
    with open(path, "rb") as f:
        return parse_tensors(f.read(), source=str(path))
