"""A small dense-network engine: hashed embeddings, MLPs, losses and Adam.

Networks keep every dense weight and bias in one flat float64 buffer so the
optimizer touches all of them in a single pass. The per-layer loops are
numba-compiled; at batch size one (the streaming case) call overhead, not
arithmetic, dominates, and plain numpy spends most of its time dispatching.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

ACTIVATIONS = {"identity": 0, "relu": 1, "sigmoid": 2, "softplus": 3}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_EPS = 1e-7
# ceiling applied wherever an exp() could overflow into a label or prediction
VALUE_CEILING = 1e30
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Network shapes or options are inconsistent."""


class NetworkUsageError(RuntimeError):
    """A method was called in the wrong order (e.g. backward before forward)."""


# --- scalar helpers ---------------------------------------------------------

@njit(cache=True, error_model="numpy")
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def _softplus(z):
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


@njit(cache=True, error_model="numpy")
def _act(z, code):
    if code == 1:
        return z if z > 0.0 else 0.0
    if code == 2:
        return _sigmoid(z)
    if code == 3:
        return _softplus(z)
    return z


@njit(cache=True, error_model="numpy")
def _act_grad(z, a, code):
    if code == 1:
        return 1.0 if z > 0.0 else 0.0
    if code == 2:
        return a * (1.0 - a)
    if code == 3:
        return _sigmoid(z)
    return 1.0


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


# --- kernels ----------------------------------------------------------------

@njit(cache=True, error_model="numpy")
def _forward(theta, w_off, b_off, dims, acts, a_off, table, buckets, extra, x_in, A, Z):
    B = A.shape[0]
    L = acts.shape[0]
    F = buckets.shape[1]
    for b in range(B):
        if F > 0:
            D = table.shape[2]
            for f in range(F):
                row = buckets[b, f]
                for k in range(D):
                    A[b, f * D + k] = table[f, row, k]
            base = F * D
            for e in range(extra.shape[1]):
                A[b, base + e] = extra[b, e]
        else:
            for i in range(dims[0]):
                A[b, i] = x_in[b, i]
        for l in range(L):
            nin = dims[l]
            nout = dims[l + 1]
            ai = a_off[l]
            ao = a_off[l + 1]
            wo = w_off[l]
            bo = b_off[l]
            for j in range(nout):
                Z[b, ao + j] = theta[bo + j]
            for i in range(nin):
                x = A[b, ai + i]
                if x != 0.0:
                    row0 = wo + i * nout
                    for j in range(nout):
                        Z[b, ao + j] += x * theta[row0 + j]
            code = acts[l]
            for j in range(nout):
                A[b, ao + j] = _act(Z[b, ao + j], code)


@njit(cache=True, error_model="numpy")
def _backward(theta, w_off, b_off, dims, acts, a_off, A, Z, dout, grad, G, din, emb_grad):
    B = A.shape[0]
    L = acts.shape[0]
    F = emb_grad.shape[1]
    D = emb_grad.shape[2]
    for b in range(B):
        top = a_off[L]
        for j in range(dims[L]):
            G[b, top + j] = dout[b, j]
        for l in range(L - 1, -1, -1):
            nin = dims[l]
            nout = dims[l + 1]
            ai = a_off[l]
            ao = a_off[l + 1]
            wo = w_off[l]
            bo = b_off[l]
            code = acts[l]
            for j in range(nout):
                dz = G[b, ao + j] * _act_grad(Z[b, ao + j], A[b, ao + j], code)
                G[b, ao + j] = dz
                grad[bo + j] += dz
            for i in range(nin):
                x = A[b, ai + i]
                row0 = wo + i * nout
                s = 0.0
                for j in range(nout):
                    dz = G[b, ao + j]
                    grad[row0 + j] += x * dz
                    s += theta[row0 + j] * dz
                G[b, ai + i] = s
        if F > 0:
            for f in range(F):
                for k in range(D):
                    emb_grad[b, f, k] = G[b, f * D + k]
        for i in range(din.shape[1]):
            din[b, i] = G[b, i]


@njit(cache=True, error_model="numpy")
def _adam_dense(theta, grad, m, v, step, b1, b2, eps_hat):
    for i in range(theta.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        theta[i] -= step * mi / (math.sqrt(vi) + eps_hat)


@njit(cache=True, error_model="numpy")
def _adam_rows(table, mt, vt, buckets, emb_grad, step, b1, b2, eps_hat):
    B = buckets.shape[0]
    F = buckets.shape[1]
    D = table.shape[2]
    for f in range(F):
        for b in range(B):
            row = buckets[b, f]
            seen = False
            for p in range(b):
                if buckets[p, f] == row:
                    seen = True
                    break
            if seen:
                continue
            for k in range(D):
                g = emb_grad[b, f, k]
                for q in range(b + 1, B):
                    if buckets[q, f] == row:
                        g += emb_grad[q, f, k]
                mi = b1 * mt[f, row, k] + (1.0 - b1) * g
                vi = b2 * vt[f, row, k] + (1.0 - b2) * g * g
                mt[f, row, k] = mi
                vt[f, row, k] = vi
                table[f, row, k] -= step * mi / (math.sqrt(vi) + eps_hat)


def _as_2d(a, dtype) -> np.ndarray:
    if isinstance(a, np.ndarray) and a.ndim == 2 and a.dtype == dtype and a.flags.c_contiguous:
        return a
    return np.ascontiguousarray(np.atleast_2d(np.asarray(a, dtype=dtype)))


# --- hashing ----------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_buckets(features, buckets: int) -> np.ndarray:
    """Bucket index per (row, field): splitmix64(splitmix64(field) ^ raw_id) mod buckets."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.int64))
    n_fields = feats.shape[1]
    with np.errstate(over="ignore"):
        salt = _splitmix64(np.arange(n_fields, dtype=np.uint64))
        mixed = _splitmix64(feats.astype(np.uint64) ^ salt[None, :])
    return (mixed % np.uint64(buckets)).astype(np.int64)


# --- network ----------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingSpec:
    n_fields: int
    buckets: int
    dim: int
    n_extra: int = 0

    @property
    def width(self) -> int:
        return self.n_fields * self.dim + self.n_extra


# shared placeholders for kernel arguments a network does not use
_NO_FLOATS = np.zeros((0, 0))
_NO_BUCKETS = np.zeros((0, 0), dtype=np.int64)
_NO_EMB_GRAD = np.zeros((0, 0, 0))
_EMPTY_TABLE = np.zeros((0, 1, 1))


class Network:
    """An MLP, optionally fed by per-field embedding tables plus numeric extras.

    ``sizes`` lists layer widths including the input width; ``activations``
    has one entry per affine layer.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str],
                 embedding: Optional[EmbeddingSpec] = None,
                 rng: Optional[np.random.Generator] = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ConfigurationError("need one activation per layer and at least one layer")
        if any(s <= 0 for s in sizes):
            raise ConfigurationError(f"layer widths must be positive: {sizes}")
        unknown = [a for a in activations if a not in ACTIVATIONS]
        if unknown:
            raise ConfigurationError(f"unknown activations {unknown}")
        if embedding is not None and embedding.width != sizes[0]:
            raise ConfigurationError(
                f"embedding width {embedding.width} does not match input size {sizes[0]}")
        self.sizes = tuple(sizes)
        self.activations = tuple(activations)
        self.embedding = embedding

        self._dims = np.array(sizes, dtype=np.int64)
        self._acts = np.array([ACTIVATIONS[a] for a in activations], dtype=np.int64)
        w_off, b_off, pos = [], [], 0
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            w_off.append(pos)
            pos += nin * nout
            b_off.append(pos)
            pos += nout
        self._w_off = np.array(w_off, dtype=np.int64)
        self._b_off = np.array(b_off, dtype=np.int64)
        self._a_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.theta = np.zeros(pos)
        if embedding is not None:
            self.table = np.zeros((embedding.n_fields, embedding.buckets, embedding.dim))
        else:
            self.table = _EMPTY_TABLE
        self._cache = None
        self.version = 0
        if rng is not None:
            self.initialize(rng)

    # parameter views ---------------------------------------------------------
    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def has_embedding(self) -> bool:
        return self.embedding is not None

    def weight(self, layer: int) -> np.ndarray:
        nin, nout = self.sizes[layer], self.sizes[layer + 1]
        start = self._w_off[layer]
        return self.theta[start:start + nin * nout].reshape(nin, nout)

    def bias(self, layer: int) -> np.ndarray:
        start = self._b_off[layer]
        return self.theta[start:start + self.sizes[layer + 1]]

    def initialize(self, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        for layer in range(self.n_layers):
            bound = 1.0 / math.sqrt(self.sizes[layer])
            self.weight(layer)[...] = rng.uniform(-bound, bound, size=self.weight(layer).shape)
            self.bias(layer)[...] = rng.uniform(-bound, bound, size=self.bias(layer).shape)
        if self.has_embedding:
            # an embedding row is treated as a layer with fan_in = dim
            bound = 1.0 / math.sqrt(self.embedding.dim)
            self.table[...] = rng.uniform(-bound, bound, size=self.table.shape)
        self.version += 1

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.theta = self.theta.copy()
        other.table = self.table.copy() if self.has_embedding else _EMPTY_TABLE
        other._cache = None
        return other

    def checksum(self) -> int:
        crc = zlib.crc32(self.theta.tobytes())
        if self.has_embedding:
            crc = zlib.crc32(self.table.tobytes(), crc)
        return crc

    # forward / backward --------------------------------------------------
    def forward(self, x=None, buckets=None, extra=None) -> np.ndarray:
        """Evaluate the network on a batch; returns an array (B, out_dim)."""
        if self.has_embedding:
            if buckets is None:
                raise NetworkUsageError("embedding network needs bucket indices")
            buckets = _as_2d(buckets, np.int64)
            if buckets.shape[1] != self.embedding.n_fields:
                raise NetworkUsageError("one bucket per field is required")
            n = buckets.shape[0]
            if self.embedding.n_extra:
                if extra is None:
                    raise NetworkUsageError("numeric extra inputs are required")
                extra = _as_2d(extra, np.float64)
                if extra.shape != (n, self.embedding.n_extra):
                    raise NetworkUsageError("extra inputs have the wrong shape")
            else:
                extra = _NO_FLOATS
            x_in = _NO_FLOATS
        else:
            x_in = _as_2d(x, np.float64)
            if x_in.shape[1] != self.sizes[0]:
                raise NetworkUsageError(f"input width {x_in.shape[1]} != {self.sizes[0]}")
            n = x_in.shape[0]
            buckets = _NO_BUCKETS
            extra = _NO_FLOATS
        width = int(self._a_off[-1])
        A = np.empty((n, width))
        Z = np.empty((n, width))
        _forward(self.theta, self._w_off, self._b_off, self._dims, self._acts, self._a_off,
                 self.table, buckets, extra, x_in, A, Z)
        self._cache = (A, Z, buckets)
        return A[:, width - self.sizes[-1]:]

    def backward(self, dout) -> "Gradients":
        """Reverse pass for the most recent forward call."""
        if self._cache is None:
            raise NetworkUsageError("backward called without a preceding forward")
        A, Z, buckets = self._cache
        n = A.shape[0]
        dout = _as_2d(dout, np.float64)
        if dout.shape != (n, self.sizes[-1]):
            dout = np.ascontiguousarray(dout.reshape(n, self.sizes[-1]))
        grad = np.zeros(self.theta.shape[0])
        G = np.empty(A.shape)
        if self.has_embedding:
            emb_grad = np.empty((n, self.embedding.n_fields, self.embedding.dim))
            din = _NO_FLOATS
        else:
            emb_grad = _NO_EMB_GRAD
            din = np.empty((n, self.sizes[0]))
        _backward(self.theta, self._w_off, self._b_off, self._dims, self._acts, self._a_off,
                  A, Z, dout, grad, G, din, emb_grad)
        return Gradients(dense=grad, buckets=buckets if self.has_embedding else None,
                         emb=emb_grad if self.has_embedding else None, input=din)

    def dense_table_grad(self, grads: "Gradients") -> np.ndarray:
        """Scatter the row-sparse embedding gradient into a table-shaped array."""
        out = np.zeros_like(self.table)
        if grads.emb is not None:
            for f in range(self.embedding.n_fields):
                np.add.at(out[f], grads.buckets[:, f], grads.emb[:, f, :])
        return out


@dataclass
class Gradients:
    dense: np.ndarray
    buckets: Optional[np.ndarray]
    emb: Optional[np.ndarray]
    input: np.ndarray

    def scale(self, c: float) -> "Gradients":
        return Gradients(self.dense * c, self.buckets,
                         None if self.emb is None else self.emb * c, self.input * c)


@dataclass
class OptimizerState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    table_m: np.ndarray
    table_v: np.ndarray
    step: int = 0

    @classmethod
    def for_network(cls, net: Network, lr: float) -> "OptimizerState":
        return cls(lr=lr, m=np.zeros_like(net.theta), v=np.zeros_like(net.theta),
                   table_m=np.zeros_like(net.table), table_v=np.zeros_like(net.table))

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.m.copy(), self.v.copy(),
                              self.table_m.copy(), self.table_v.copy(), self.step)


def adam_step(net: Network, state: OptimizerState, grads: Gradients) -> None:
    """One Adam update; embedding rows absent from ``grads`` stay bit-identical.

    Bias corrections are folded into the step size and epsilon:
    lr * sqrt(1 - b2^t) / (1 - b1^t) and eps * sqrt(1 - b2^t).
    """
    state.step += 1
    root_bc2 = math.sqrt(1.0 - ADAM_BETA2 ** state.step)
    step = state.lr * root_bc2 / (1.0 - ADAM_BETA1 ** state.step)
    eps_hat = ADAM_EPS * root_bc2
    _adam_dense(net.theta, grads.dense, state.m, state.v, step, ADAM_BETA1, ADAM_BETA2, eps_hat)
    if net.has_embedding and grads.emb is not None:
        _adam_rows(net.table, state.table_m, state.table_v, grads.buckets, grads.emb,
                   step, ADAM_BETA1, ADAM_BETA2, eps_hat)
    net.version += 1


# --- losses -----------------------------------------------------------------

def log_mae_loss(pred, target):
    """|log1p(pred) - log1p(target)| and its derivative in ``pred``.

    Works elementwise on arrays. The subgradient at equality is 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(pred < 0) or np.any(target < 0):
        raise ValueError("log-MAE needs nonnegative prediction and target")
    diff = np.log1p(pred) - np.log1p(target)
    return np.abs(diff), np.sign(diff) / (1.0 + pred)


def bce_loss(prob, label):
    """Binary cross-entropy on a clamped probability; gradient is w.r.t. the logit."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return loss, p - y


def mae_loss(pred, target):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.abs(diff), np.sign(diff)


# --- gradient verification --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    n_checked: Dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def lines(self) -> List[str]:
        return [f"{name:<28s} checked={self.n_checked[name]:5d} max_rel_err={err:.3e}"
                for name, err in self.max_rel_error.items()]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[], float], analytic: Dict[str, np.ndarray],
               params: Dict[str, np.ndarray], h: float = 1e-5, tolerance: float = 1e-4,
               max_entries: int = 48, rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``params`` maps names to arrays that ``loss_fn`` reads (perturbed in place
    and restored). ``analytic`` holds same-shaped gradients. Per array, every
    nonzero analytic entry is checked up to ``max_entries``, topped up with
    zero entries. Never raises on mismatch; the report carries the verdict.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in params.items():
        grad = np.asarray(analytic[name]).reshape(-1)
        flat = arr.reshape(-1)
        if flat.base is None and arr.size:
            raise ValueError(f"{name}: parameter array must support in-place perturbation")
        nonzero = np.flatnonzero(grad)
        zero = np.flatnonzero(grad == 0)
        if nonzero.size > max_entries:
            nonzero = rng.choice(nonzero, size=max_entries, replace=False)
        n_zero = min(zero.size, max(4, max_entries - nonzero.size))
        picks = np.concatenate([nonzero, rng.choice(zero, size=n_zero, replace=False) if n_zero else []])
        worst = 0.0
        for idx in picks.astype(np.int64):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_fn()
            flat[idx] = old - h
            down = loss_fn()
            flat[idx] = old
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(float(grad[idx]), numeric))
        report.max_rel_error[name] = worst
        report.n_checked[name] = int(picks.size)
    return report


# --- checkpoints --------------------------------------------------------------

def _manifest_entry(net: Network) -> dict:
    emb = net.embedding
    return {
        "sizes": list(net.sizes),
        "activations": list(net.activations),
        "embedding": None if emb is None else
        {"n_fields": emb.n_fields, "buckets": emb.buckets, "dim": emb.dim, "n_extra": emb.n_extra},
        "theta_shape": list(net.theta.shape),
        "table_shape": list(net.table.shape) if net.has_embedding else None,
    }


def save_networks(networks: Dict[str, Network], path: str, meta: Optional[dict] = None) -> None:
    """Write networks to a zip of raw little-endian f64 buffers plus a JSON manifest."""
    manifest = {"version": CHECKPOINT_VERSION, "meta": meta or {},
                "networks": {name: _manifest_entry(net) for name, net in networks.items()}}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        for name, net in networks.items():
            put(f"{name}/theta.f64", net.theta.astype("<f8").tobytes())
            if net.has_embedding:
                put(f"{name}/table.f64", net.table.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_networks(path: str) -> Tuple[Dict[str, Network], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {manifest.get('version')}")
        nets = {}
        for name, entry in manifest["networks"].items():
            emb = entry["embedding"]
            net = Network(entry["sizes"], entry["activations"],
                          EmbeddingSpec(**emb) if emb else None)
            theta = np.frombuffer(zf.read(f"{name}/theta.f64"), dtype="<f8")
            if theta.shape != tuple(entry["theta_shape"]):
                raise ConfigurationError(f"{name}: theta shape mismatch")
            net.theta[...] = theta
            if emb:
                table = np.frombuffer(zf.read(f"{name}/table.f64"), dtype="<f8")
                net.table[...] = table.reshape(entry["table_shape"])
            nets[name] = net
    return nets, manifest.get("meta", {})
