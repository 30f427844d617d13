"""Residual-gated association transform.

The transform maps a d-dimensional embedding x to

    f(x) = normalize(alpha * x + (1 - alpha) * g(x))

where g is a four-layer MLP (affine -> layernorm -> GELU, three times, then a
final affine, all d -> d) and alpha = logistic(alpha_raw) is a single learned
gate. alpha_raw starts at 0 so the gate opens at 0.5; driving alpha_raw high
collapses f to plain row normalization, which keeps the untrained model safe
to deploy.

Parameter count is 4*(d^2 + d) + 3*2d + 1.

Checkpoint container ("AARM", version 1, little-endian): magic, u32 version,
u32 d, then float32 parameters in this fixed order:

    w0, b0, w1, b1, w2, b2, w3, b3,
    ln0_scale, ln0_shift, ln1_scale, ln1_shift, ln2_scale, ln2_shift,
    alpha_raw

with each weight matrix stored row-major as (d_out, d_in).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from assocrank.embeddings import EmbeddingMatrix

MODEL_MAGIC = b"AARM"
MODEL_VERSION = 1

LN_EPS = 1e-5
DEGENERATE_NORM = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class CheckpointError(ValueError):
    """Raised for malformed or truncated model checkpoints."""


@dataclass
class AssocModel:
    """Parameters of the association transform. Arrays share one dtype."""

    weights: list[np.ndarray]    # 4 matrices, each (d, d)
    biases: list[np.ndarray]     # 4 vectors (d,)
    ln_scales: list[np.ndarray]  # 3 vectors (d,)
    ln_shifts: list[np.ndarray]  # 3 vectors (d,)
    alpha_raw: np.ndarray        # shape (1,)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_raw[0])))

    @classmethod
    def initialize(cls, dim: int, seed: int, dtype=np.float32) -> "AssocModel":
        """Seeded init: weights uniform in +-1/sqrt(d), biases zero,
        layernorm at identity, gate at 0.5."""
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        weights = [rng.uniform(-bound, bound, size=(dim, dim)).astype(dtype) for _ in range(4)]
        biases = [np.zeros(dim, dtype=dtype) for _ in range(4)]
        ln_scales = [np.ones(dim, dtype=dtype) for _ in range(3)]
        ln_shifts = [np.zeros(dim, dtype=dtype) for _ in range(3)]
        return cls(weights, biases, ln_scales, ln_shifts, np.zeros(1, dtype=dtype))

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in checkpoint order."""
        items: list[tuple[str, np.ndarray]] = []
        for i in range(4):
            items.append((f"w{i}", self.weights[i]))
            items.append((f"b{i}", self.biases[i]))
        for i in range(3):
            items.append((f"ln{i}_scale", self.ln_scales[i]))
            items.append((f"ln{i}_shift", self.ln_shifts[i]))
        items.append(("alpha_raw", self.alpha_raw))
        return items

    def astype(self, dtype) -> "AssocModel":
        return AssocModel(
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
            ln_scales=[s.astype(dtype) for s in self.ln_scales],
            ln_shifts=[s.astype(dtype) for s in self.ln_shifts],
            alpha_raw=self.alpha_raw.astype(dtype),
        )

    def copy(self) -> "AssocModel":
        return self.astype(self.dtype)


def param_count(model: AssocModel) -> int:
    return sum(arr.size for _, arr in model.param_items())


def _gelu(y: np.ndarray) -> np.ndarray:
    return 0.5 * y * (1.0 + erf(y * _INV_SQRT2))


def _gelu_grad(y: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * y * y) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(y * _INV_SQRT2)) + y * phi


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values after {stage}")


def forward_batch(model: AssocModel, x: np.ndarray, degenerate: str = "raise"):
    """Apply f to each row of x. Returns (outputs, cache).

    degenerate: what to do when the pre-normalization blend has norm
    <= 1e-12 for some row. "raise" is the training behaviour; "zero" emits a
    zero row (inference path) and records the rows in cache["degenerate"].
    """
    if degenerate not in ("raise", "zero"):
        raise ValueError(f"unknown degenerate policy {degenerate!r}")
    x = np.ascontiguousarray(x, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"input shape {x.shape} does not match model dim {model.dim}")

    h = x
    lns = []   # per layernorm: (xhat, inv_sigma)
    acts = []  # per block: (y, a) with y the LN output
    inputs = [x]
    for i in range(3):
        z = h @ model.weights[i].T + model.biases[i]
        _check_finite(z, f"affine {i}")
        mu = z.mean(axis=1, keepdims=True)
        centered = z - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(var + LN_EPS)
        xhat = centered * inv_sigma
        y = xhat * model.ln_scales[i] + model.ln_shifts[i]
        _check_finite(y, f"layernorm {i}")
        a = _gelu(y)
        lns.append((xhat, inv_sigma))
        acts.append((y, a))
        inputs.append(a)
        h = a
    g = h @ model.weights[3].T + model.biases[3]
    _check_finite(g, "affine 3")

    alpha = 1.0 / (1.0 + np.exp(-model.alpha_raw[0]))
    u = alpha * x + (1.0 - alpha) * g
    norms = np.sqrt((u * u).sum(axis=1, keepdims=True))
    degenerate_rows = np.where(norms[:, 0] <= DEGENERATE_NORM)[0]
    if degenerate_rows.size and degenerate == "raise":
        raise FloatingPointError(
            f"degenerate pre-normalization vector at row {int(degenerate_rows[0])}"
        )
    safe = np.where(norms <= DEGENERATE_NORM, 1.0, norms)
    f = u / safe
    if degenerate_rows.size:
        f[degenerate_rows] = 0.0
    cache = {
        "inputs": inputs,
        "lns": lns,
        "acts": acts,
        "g": g,
        "alpha": alpha,
        "u": u,
        "norms": safe,
        "f": f,
        "degenerate": degenerate_rows,
    }
    return f, cache


def forward(model: AssocModel, x: np.ndarray, degenerate: str = "raise") -> np.ndarray:
    """Transform a single vector."""
    out, _ = forward_batch(model, np.asarray(x)[None, :], degenerate=degenerate)
    return out[0]


def backward_batch(model: AssocModel, cache: dict, df: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(outputs) for a forward_batch call."""
    x = cache["inputs"][0]
    f = cache["f"]
    norms = cache["norms"]
    alpha = cache["alpha"]
    g = cache["g"]

    # normalize: u -> u / ||u||
    du = (df - f * (df * f).sum(axis=1, keepdims=True)) / norms
    dalpha = float((du * (x - g)).sum())
    dalpha_raw = np.array([dalpha * alpha * (1.0 - alpha)], dtype=model.dtype)
    dg = (1.0 - alpha) * du

    grads: dict[str, np.ndarray] = {"alpha_raw": dalpha_raw}
    dh = dg
    grads["w3"] = dh.T @ cache["inputs"][3]
    grads["b3"] = dh.sum(axis=0)
    dh = dh @ model.weights[3]
    for i in (2, 1, 0):
        y, _ = cache["acts"][i]
        dh = dh * _gelu_grad(y)
        xhat, inv_sigma = cache["lns"][i]
        grads[f"ln{i}_scale"] = (dh * xhat).sum(axis=0)
        grads[f"ln{i}_shift"] = dh.sum(axis=0)
        dxhat = dh * model.ln_scales[i]
        dz = inv_sigma * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        grads[f"w{i}"] = dz.T @ cache["inputs"][i]
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ model.weights[i]
    return grads


@dataclass
class TransformedMatrix:
    """Passage matrix pushed through f once, for reuse at query time."""

    source: str
    ids: list[str]
    data: np.ndarray


def transform_matrix(
    model: AssocModel,
    matrix: EmbeddingMatrix,
    source: str = "",
    batch: int = 1024,
) -> TransformedMatrix:
    """Apply f to every row. Row order and ids match the source matrix."""
    if matrix.dim != model.dim:
        raise ValueError(f"matrix dim {matrix.dim} does not match model dim {model.dim}")
    out = np.empty_like(matrix.data)
    for start in range(0, matrix.rows, batch):
        block, _ = forward_batch(model, matrix.data[start : start + batch], degenerate="zero")
        out[start : start + batch] = block
    return TransformedMatrix(source=source, ids=list(matrix.ids), data=out)


def save_model(model: AssocModel, path: str) -> None:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", model.dim))
    for _, arr in model.param_items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path: str) -> AssocModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != MODEL_VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {MODEL_VERSION}")
    (dim,) = struct.unpack("<I", raw[8:12])
    if dim < 1:
        raise CheckpointError(f"invalid dim {dim}")
    expected = 4 * (dim * dim + dim) + 3 * 2 * dim + 1
    payload = raw[12:]
    if len(payload) != expected * 4:
        raise CheckpointError(
            f"payload holds {len(payload) // 4} floats, expected {expected} for d={dim}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    pos = 0

    def take(shape) -> np.ndarray:
        nonlocal pos
        size = int(np.prod(shape))
        out = flat[pos : pos + size].reshape(shape).copy()
        pos += size
        return out

    weights, biases = [], []
    for _ in range(4):
        weights.append(take((dim, dim)))
        biases.append(take((dim,)))
    ln_scales, ln_shifts = [], []
    for _ in range(3):
        ln_scales.append(take((dim,)))
        ln_shifts.append(take((dim,)))
    alpha_raw = take((1,))
    if not all(np.isfinite(arr).all() for arr in weights + biases + ln_scales + ln_shifts):
        raise CheckpointError("non-finite parameter values")
    if not np.isfinite(alpha_raw).all():
        raise CheckpointError("non-finite parameter values")
    return AssocModel(weights, biases, ln_scales, ln_shifts, alpha_raw)
