"""Dense MLPs with hand-written backprop, grouped max pooling, and a
finite-difference gradient checker. Everything runs in float64.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass
class Mlp:
    """Affine layers with rectifier between them; the last layer is linear.

    ``weights[k]`` has shape (fan_in, fan_out) so a batch of rows maps as
    ``x @ W + b``.
    """

    weights: list
    biases: list

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def units(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights)

    def arrays(self, prefix: str):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{k}", w
            yield f"{prefix}.b{k}", b

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(in_dim: int, units, rng: np.random.Generator, zero_last: bool = False) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    fan_in = in_dim
    for k, fan_out in enumerate(units):
        if zero_last and k == len(units) - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
        fan_in = fan_out
    return Mlp(weights, biases)


@dataclass
class MlpCache:
    inputs: list
    pre: list


def mlp_forward(params: Mlp, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match MLP input dim {params.in_dim}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        # column-major result keeps per-column segment reductions fast
        z = (w.T @ x.T).T
        z += b
        pre.append(z)
        x = z if k == last else np.maximum(z, 0.0)
    return x, MlpCache(inputs, pre)


def mlp_backward(params: Mlp, cache: MlpCache, grad_out: np.ndarray):
    """Return ``(grad_params, grad_input)`` for the forward pass in ``cache``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"grad shape {g.shape} does not match output shape {cache.pre[-1].shape}")
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        if k != n_layers - 1:
            g = np.where(cache.pre[k] > 0, g, 0.0)
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return Mlp(gw, gb), g


def relu_signature(cache: MlpCache) -> bytes:
    """Packed activation pattern of the hidden layers, for kink detection."""
    return b"".join(np.packbits(z > 0).tobytes() for z in cache.pre[:-1])


@dataclass
class GroupIndex:
    group_of: np.ndarray
    group_count: int


def max_aggregate(rows: np.ndarray, groups: GroupIndex):
    """Per-group column-wise max. Empty groups pool to 0.

    Returns ``(pooled, argmax)``; ``argmax[g, c]`` is the source row of the
    max (lowest row on ties) or -1 for an empty group.
    """
    rows = np.asarray(rows, dtype=np.float64)
    group_of = np.asarray(groups.group_of, dtype=np.int64)
    if len(group_of) != len(rows):
        raise ValueError(f"{len(rows)} rows but {len(group_of)} group ids")
    n, cols = rows.shape
    pooled = np.zeros((groups.group_count, cols))
    argmax = np.full((groups.group_count, cols), -1, dtype=np.int64)
    if n == 0:
        return pooled, argmax
    # work on the transposed (cols, n) view so every reduction runs along
    # contiguous memory; MLP outputs are column-major, making this a free view
    if np.all(group_of[1:] >= group_of[:-1]):
        order = None
        srt_groups = group_of
        cols_view = np.ascontiguousarray(rows.T)
    else:
        order = np.argsort(group_of, kind="stable")
        srt_groups = group_of[order]
        cols_view = np.ascontiguousarray(rows.T[:, order])
    starts = np.flatnonzero(np.r_[True, srt_groups[1:] != srt_groups[:-1]])
    present = srt_groups[starts]
    maxima = np.maximum.reduceat(cols_view, starts, axis=1)
    pooled[present] = maxima.T
    segment = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, n]))
    row_ids = np.arange(n) if order is None else order
    cand = np.where(cols_view == maxima[:, segment], row_ids, n)
    argmax[present] = np.minimum.reduceat(cand, starts, axis=1).T
    return pooled, argmax


def max_aggregate_backward(grad_pooled: np.ndarray, argmax: np.ndarray, n_rows: int) -> np.ndarray:
    grad_rows = np.zeros((n_rows, argmax.shape[1]), order="F")
    g, c = np.nonzero(argmax >= 0)
    grad_rows[argmax[g, c], c] = grad_pooled[g, c]
    return grad_rows


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn, params: dict, grads: dict, probes: int, h: float = 1e-5,
               seed: int = 0, signature=None, max_redraws: int = 20) -> float:
    """Max relative error of ``grads`` against central differences.

    ``params`` maps names to arrays that ``loss_fn()`` reads; they are
    perturbed in place and restored. When ``signature`` is given, a probe
    whose +h and -h evaluations see different activation patterns straddles a
    kink and is redrawn (at most ``max_redraws`` times per probe).
    """
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    worst = 0.0
    for _ in range(probes):
        for _attempt in range(max_redraws + 1):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            arr = params[name]
            flat = int(rng.integers(arr.size))
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = loss_fn()
            sig_plus = signature() if signature else None
            arr[idx] = orig - h
            f_minus = loss_fn()
            sig_minus = signature() if signature else None
            arr[idx] = orig
            if sig_plus == sig_minus:
                break
        numeric = (f_plus - f_minus) / (2 * h)
        worst = max(worst, relative_error(float(grads[name][idx]), numeric))
    return worst


CHECKPOINT_MAGIC = b"PGNNCKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(arrays: dict) -> bytes:
    """Serialize named float64 tensors.

    Layout (all little-endian): 8-byte magic ``PGNNCKPT``; u32 version;
    u32 tensor count; then per tensor: u32 name length, UTF-8 name, u32 rank,
    rank x u64 dims, float64 payload in row-major order.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_checkpoint(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(view):
            raise FormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    return out


def save_checkpoint(path, arrays: dict) -> None:
    from .fileio import atomic_write_bytes
    atomic_write_bytes(Path(path), write_checkpoint(arrays))


def load_checkpoint(path) -> dict:
    return read_checkpoint(Path(path).read_bytes())
