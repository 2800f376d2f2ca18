"""Input-selective state-space sequence model with two scan backends.

The recurrence is s_t = A_t * s_{t-1} + B_t x_t with s_0 = 0, where the
diagonal transition A_t and the input projection are deterministic functions
of the current input (softplus-gated timescale, exponential decay). The
sequential backend is the reference and carries the gradient path; the
parallel backend computes the same prefix composition with a work-efficient
chunked up-sweep/down-sweep and is used for inference and benchmarks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .rng import CounterRng
from .tensor import Tensor


@dataclass
class SsmBlockParams:
    a: Tensor           # (d_h,) decay logits
    w_delta: Tensor     # (d_h, d_in) timescale map
    delta_bias: Tensor  # (d_h,)
    w_b: Tensor         # (d_h, d_in) input projection
    w_mix: Optional[Tensor] = None   # (d_in, d_h) residual readout (inter-block only)
    b_mix: Optional[Tensor] = None


@dataclass
class SsmParams:
    blocks: list
    w_out: Tensor       # (d_h, d_h) final state readout
    b_out: Tensor
    d_h: int
    d_in: int

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @classmethod
    def create(cls, rng: CounterRng, d_in: int, d_h: int = 64,
               block_count: int = 2) -> "SsmParams":
        if d_h <= 0:
            raise ConfigError(f"d_h must be positive, got {d_h}")
        if block_count < 1:
            raise ConfigError(f"block_count must be >= 1, got {block_count}")
        def w(shape, fan_in):
            return Tensor(rng.normal(shape, std=1.0 / math.sqrt(fan_in)), requires_grad=True)
        blocks = []
        for i in range(block_count):
            last = i == block_count - 1
            blocks.append(SsmBlockParams(
                a=Tensor(rng.normal((d_h,), std=0.5) - 1.0, requires_grad=True),
                w_delta=w((d_h, d_in), d_in),
                delta_bias=Tensor(np.zeros(d_h), requires_grad=True),
                w_b=w((d_h, d_in), d_in),
                w_mix=None if last else w((d_in, d_h), d_h),
                b_mix=None if last else Tensor(np.zeros(d_in), requires_grad=True),
            ))
        return cls(blocks=blocks, w_out=w((d_h, d_h), d_h),
                   b_out=Tensor(np.zeros(d_h), requires_grad=True), d_h=d_h, d_in=d_in)

    def named_params(self, prefix: str = "ssm") -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            base = f"{prefix}.block{i}"
            out[f"{base}.a"] = blk.a
            out[f"{base}.w_delta"] = blk.w_delta
            out[f"{base}.delta_bias"] = blk.delta_bias
            out[f"{base}.w_b"] = blk.w_b
            if blk.w_mix is not None:
                out[f"{base}.w_mix"] = blk.w_mix
                out[f"{base}.b_mix"] = blk.b_mix
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


@dataclass
class SsmStateSeq:
    """State trajectory s_1..s_T (s_0 is the zero vector)."""

    states: np.ndarray   # (T, d_h)


def make_selective_params(x_t: Tensor, block: SsmBlockParams) -> tuple[Tensor, Tensor]:
    """Per-step transition diagonal and input matrix from one input vector.

    A[k] = exp(-softplus(<w_delta[k], x> + delta_bias[k]) * softplus(a[k])),
    strictly inside (0,1); B is the base projection scaled per row by the
    same softplus timescale. Deterministic given (x_t, block).
    """
    if x_t.ndim != 1:
        raise ShapeError(f"make_selective_params expects a vector, got shape {x_t.shape}")
    delta = tt.softplus(tt.matmul(block.w_delta, x_t) + block.delta_bias)
    a_diag = tt.exp(-(delta * tt.softplus(block.a)))
    b_t = tt.mul(block.w_b.T, delta).T
    return a_diag, b_t


def selective_rates(x_seq: Tensor, block: SsmBlockParams) -> tuple[Tensor, Tensor]:
    """Vectorized (A_t, B_t x_t) for a whole sequence: both (T, d_h)."""
    delta = tt.softplus(tt.linear(x_seq, block.w_delta, block.delta_bias))
    a_seq = tt.exp(-(delta * tt.softplus(block.a)))
    bx_seq = delta * tt.linear(x_seq, block.w_b)
    return a_seq, bx_seq


def _rates_np(x_seq: np.ndarray, block: SsmBlockParams) -> tuple[np.ndarray, np.ndarray]:
    def sp(v):
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    delta = sp(x_seq @ block.w_delta.data.T + block.delta_bias.data)
    a_seq = np.exp(-delta * sp(block.a.data))
    bx_seq = delta * (x_seq @ block.w_b.data.T)
    return a_seq, bx_seq


def scan_sequential(x_seq: np.ndarray, params: SsmParams) -> SsmStateSeq:
    """Reference backend: first-block recurrence evaluated left to right."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 2 or x_seq.shape[0] < 1:
        raise ShapeError(f"scan expects (T, d_in) with T >= 1, got shape {x_seq.shape}")
    a_seq, bx_seq = _rates_np(x_seq, params.blocks[0])
    return SsmStateSeq(states=_scan_loop(a_seq, bx_seq))


def _scan_loop(a_seq: np.ndarray, bx_seq: np.ndarray) -> np.ndarray:
    T, d = a_seq.shape
    states = np.empty((T, d), dtype=a_seq.dtype)
    s = np.zeros(d, dtype=a_seq.dtype)
    for t in range(T):
        s = a_seq[t] * s + bx_seq[t]
        states[t] = s
    return states


def scan_parallel(x_seq: np.ndarray, params: SsmParams,
                  chunk_size: int = 64, workers: int = 1) -> SsmStateSeq:
    """Prefix-scan backend; matches scan_sequential within 1e-8 relative."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 2 or x_seq.shape[0] < 1:
        raise ShapeError(f"scan expects (T, d_in) with T >= 1, got shape {x_seq.shape}")
    a_seq, bx_seq = _rates_np(x_seq, params.blocks[0])
    return SsmStateSeq(states=_scan_blelloch(a_seq, bx_seq, chunk_size, workers))


def compose(later: tuple[np.ndarray, np.ndarray],
            earlier: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Associative composition of affine recurrence steps.

    (A2, b2) o (A1, b1) = (A2*A1, A2*b1 + b2): applying ``earlier`` then
    ``later`` to a state s gives A2*(A1*s + b1) + b2.
    """
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2


def _local_scan(a: np.ndarray, b: np.ndarray) -> None:
    # In-place inclusive scan along axis 1 of (chunks, C, d) arrays.
    for i in range(1, a.shape[1]):
        b[:, i] += a[:, i] * b[:, i - 1]
        a[:, i] *= a[:, i - 1]


def _scan_blelloch(a_seq: np.ndarray, bx_seq: np.ndarray,
                   chunk_size: int, workers: int) -> np.ndarray:
    T, d = a_seq.shape
    nc = (T + chunk_size - 1) // chunk_size
    padded = nc * chunk_size
    a = np.ones((padded, d), dtype=a_seq.dtype)
    b = np.zeros((padded, d), dtype=a_seq.dtype)
    a[:T] = a_seq
    b[:T] = bx_seq
    a = a.reshape(nc, chunk_size, d)
    b = b.reshape(nc, chunk_size, d)

    # Pass 1: inclusive scan inside every chunk. Chunks are independent, so
    # splitting them across workers cannot change any result.
    if workers > 1 and nc > 1:
        bounds = np.linspace(0, nc, min(workers, nc) + 1).astype(int)
        slabs = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda sl: _local_scan(a[sl], b[sl]), slabs))
    else:
        _local_scan(a, b)

    # Pass 2: Blelloch up-sweep/down-sweep over the per-chunk summaries,
    # giving each chunk the composition of everything before it.
    m = 1 << max(0, (nc - 1).bit_length())
    ca = np.ones((m, d), dtype=a_seq.dtype)
    cb = np.zeros((m, d), dtype=a_seq.dtype)
    ca[:nc] = a[:, -1]
    cb[:nc] = b[:, -1]
    step = 2
    while step <= m:
        ks = np.arange(step - 1, m, step)
        prev = ks - step // 2
        cb[ks] = ca[ks] * cb[prev] + cb[ks]
        ca[ks] = ca[ks] * ca[prev]
        step *= 2
    ca[m - 1] = 1.0
    cb[m - 1] = 0.0
    step = m
    while step >= 2:
        ks = np.arange(step - 1, m, step)
        prev = ks - step // 2
        ta, tb = ca[prev].copy(), cb[prev].copy()
        ca[prev], cb[prev] = ca[ks], cb[ks]
        cb[ks] = ta * cb[ks] + tb
        ca[ks] = ta * ca[ks]
        step //= 2

    # Pass 3: apply each chunk's exclusive prefix to its local results.
    # s = A_local * b_prefix + b_local (prefix applied to s_0 = 0).
    states = a * cb[:nc, None, :] + b
    return states.reshape(padded, d)[:T]


def ssm_forward(x_seq: Tensor, params: SsmParams, backend: str = "sequential") -> Tensor:
    """Stacked selective-SSM blocks with residual connections and a readout.

    Returns the (T, d_h) state-feature sequence. The sequential backend runs
    on the tape and is the only differentiable path; the parallel backend is
    inference-only and numerically equivalent.
    """
    if backend == "sequential":
        u = x_seq
        states = None
        for i, blk in enumerate(params.blocks):
            a_seq, bx_seq = selective_rates(u, blk)
            states = tt.selective_scan(a_seq, bx_seq)
            if i < len(params.blocks) - 1:
                u = u + tt.linear(states, blk.w_mix, blk.b_mix)
        return tt.linear(states, params.w_out, params.b_out)
    if backend == "parallel":
        u = np.asarray(x_seq.data if isinstance(x_seq, Tensor) else x_seq, dtype=np.float64)
        states = None
        for i, blk in enumerate(params.blocks):
            a_seq, bx_seq = _rates_np(u, blk)
            states = _scan_blelloch(a_seq, bx_seq, chunk_size=64, workers=1)
            if i < len(params.blocks) - 1:
                u = u + states @ blk.w_mix.data.T + blk.b_mix.data
        return Tensor._wrap(states @ params.w_out.data.T + params.b_out.data)
    raise ConfigError(f"unknown backend {backend!r}; expected sequential or parallel")
