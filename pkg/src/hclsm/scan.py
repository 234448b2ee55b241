"""Level-0 selective state space engine.

The recurrence ``h_t = a_t * h_{t-1} + bx_t`` with readout ``y_t = <h_t, c_t>``
is linear in ``h``, so each time chunk collapses to a transfer pair
``(prod a, local state)``. Pairs compose associatively,
``(a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)``, which lets chunks be scanned
independently and stitched together with a short exclusive scan over chunk
boundaries.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .tensor import ops
from .tensor.core import Tensor, record
from .tensor.gradcheck import register_check
from .tensor.nn import Linear, Module, param

EXP_MIN = -20.0
DEFAULT_CHUNK = 64


def default_workers() -> int:
    cap = os.environ.get("HCLSM_THREADS")
    n = os.cpu_count() or 1
    return max(1, int(cap)) if cap else n


@dataclass
class ScanInputs:
    a_bar: np.ndarray  # [BN, T, d_inner, d_state]
    bx: np.ndarray  # [BN, T, d_inner, d_state]
    c: np.ndarray  # [BN, T, d_state]
    h0: np.ndarray  # [BN, d_inner, d_state]

    def __post_init__(self):
        BN, T, di, ds = self.a_bar.shape
        if self.bx.shape != self.a_bar.shape:
            raise ValueError(f"bx shape {self.bx.shape} != a_bar shape {self.a_bar.shape}")
        if self.c.shape != (BN, T, ds):
            raise ValueError(f"c shape {self.c.shape} != {(BN, T, ds)}")
        if self.h0.shape != (BN, di, ds):
            raise ValueError(f"h0 shape {self.h0.shape} != {(BN, di, ds)}")

    @classmethod
    def random(cls, rng: np.random.Generator, bn: int, t: int, d_inner: int, d_state: int,
               dtype=np.float64, zero_h0: bool = False) -> "ScanInputs":
        # decay gates drawn as exp(-u), u in [0, 2], keep the recurrence well inside (0, 1]
        # (in place: at benchmark sizes each array is gigabytes)
        a = rng.random((bn, t, d_inner, d_state), dtype=dtype)
        a *= -2.0
        np.exp(a, out=a)
        bx = rng.random((bn, t, d_inner, d_state), dtype=dtype)
        bx -= 0.5
        c = rng.random((bn, t, d_state), dtype=dtype) - 0.5
        h0 = np.zeros((bn, d_inner, d_state), dtype) if zero_h0 else rng.random((bn, d_inner, d_state), dtype=dtype)
        return cls(a, bx, c.astype(dtype), h0.astype(dtype))


# ------------------------------------------------------------------ kernels


# reassociation only: no FMA contraction, so the state update rounds exactly
# like the numpy reference and only the readout sum may reorder
_FASTMATH = {"reassoc", "nsz"}


@numba.njit(cache=True, nogil=True)
def _chunk_transfer(a, bx, t0, t1, n0, n1, i0, i1, out_a, out_b):
    ds = a.shape[3]
    pa = np.empty((i1 - i0, ds), dtype=a.dtype)
    pb = np.empty((i1 - i0, ds), dtype=a.dtype)
    for n in range(n0, n1):
        pa[:] = 1.0
        pb[:] = 0.0
        for t in range(t0, t1):
            for i in range(i0, i1):
                for s in range(ds):
                    av = a[n, t, i, s]
                    pa[i - i0, s] = pa[i - i0, s] * av
                    pb[i - i0, s] = av * pb[i - i0, s] + bx[n, t, i, s]
        for i in range(i0, i1):
            for s in range(ds):
                out_a[n, i, s] = pa[i - i0, s]
                out_b[n, i, s] = pb[i - i0, s]


@numba.njit(cache=True, nogil=True, fastmath=_FASTMATH)
def _chunk_finalize(a, bx, c, h_start, t0, t1, n0, n1, i0, i1, h_out, y, store_h):
    ds = a.shape[3]
    h = np.empty((i1 - i0, ds), dtype=a.dtype)
    zero = np.zeros(1, dtype=a.dtype)[0]
    for n in range(n0, n1):
        for i in range(i0, i1):
            for s in range(ds):
                h[i - i0, s] = h_start[n, i, s]
        for t in range(t0, t1):
            for i in range(i0, i1):
                acc = zero
                for s in range(ds):
                    hv = a[n, t, i, s] * h[i - i0, s] + bx[n, t, i, s]
                    h[i - i0, s] = hv
                    acc += c[n, t, s] * hv
                y[n, t, i] = acc
                if store_h:
                    for s in range(ds):
                        h_out[n, t, i, s] = h[i - i0, s]


@numba.njit(cache=True, nogil=True)
def _scan_adjoint(a, c, h, h0, gy, ga, gbx, gc, gh0):
    BN, T, di, ds = a.shape
    lam = np.empty((di, ds), dtype=a.dtype)
    for n in range(BN):
        for i in range(di):
            for s in range(ds):
                lam[i, s] = 0.0
        for t in range(T - 1, -1, -1):
            for i in range(di):
                g = gy[n, t, i]
                for s in range(ds):
                    lv = g * c[n, t, s] + lam[i, s]
                    gbx[n, t, i, s] = lv
                    hp = h[n, t - 1, i, s] if t > 0 else h0[n, i, s]
                    ga[n, t, i, s] = lv * hp
                    gc[n, t, s] += g * h[n, t, i, s]
                    lam[i, s] = a[n, t, i, s] * lv
        for i in range(di):
            for s in range(ds):
                gh0[n, i, s] = lam[i, s]


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="hclsm-scan")


# ---------------------------------------------------------------- public API


def compose(p, q):
    """Associative composition of transfer pairs: apply ``p`` then ``q``."""
    a1, b1 = p
    a2, b2 = q
    return a1 * a2, a2 * b1 + b2


def discretize(delta: Tensor, a_log: Tensor) -> Tensor:
    """``exp(clamp(delta * A, -20, 0))`` with ``A = -exp(a_log)``.

    delta: [..., d_inner], a_log: [d_inner, d_state] -> [..., d_inner, d_state].
    """
    A = ops.neg(ops.exp(a_log))
    z = ops.reshape(delta, delta.shape + (1,)) * A
    return ops.exp(ops.clamp(z, EXP_MIN, 0.0))


def scan_sequential(inputs: ScanInputs, store_h: bool = True):
    """Left-to-right reference recurrence. Returns ``(h, y)``; ``h`` is None if not stored."""
    a, bx, c = inputs.a_bar, inputs.bx, inputs.c
    BN, T, di, ds = a.shape
    h = inputs.h0.copy()
    hs = np.empty_like(a) if store_h else None
    y = np.empty((BN, T, di), dtype=a.dtype)
    for t in range(T):
        np.multiply(h, a[:, t], out=h)
        h += bx[:, t]
        if store_h:
            hs[:, t] = h
        np.einsum("nis,ns->ni", h, c[:, t], out=y[:, t])
    return hs, y


def _tiles(BN: int, di: int, workers: int) -> list[tuple[int, int, int, int]]:
    """Split (tracks x channels) into at least ``workers`` rectangular blocks when possible."""
    n_blocks = max(1, min(BN, workers))
    i_blocks = max(1, min(di, -(-workers // n_blocks)))
    n_edges = np.linspace(0, BN, n_blocks + 1).astype(int)
    i_edges = np.linspace(0, di, i_blocks + 1).astype(int)
    return [(int(n_edges[a]), int(n_edges[a + 1]), int(i_edges[b]), int(i_edges[b + 1]))
            for a in range(n_blocks) for b in range(i_blocks)
            if n_edges[a + 1] > n_edges[a] and i_edges[b + 1] > i_edges[b]]


def scan_parallel(inputs: ScanInputs, workers: int | None = None, chunk: int | None = None,
                  store_h: bool = True):
    """Chunked scan over (time chunk x track block x channel block) tiles on a thread pool.

    Phase 1 reduces every chunk but the last to its transfer pair, phase 2
    composes those pairs serially into chunk-start states, phase 3 rescans each
    chunk from its start state. ``chunk=None`` splits time only when there are
    fewer tracks than workers; otherwise every tile covers the full sequence.
    Results do not depend on ``workers``.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    a = np.ascontiguousarray(inputs.a_bar)
    bx = np.ascontiguousarray(inputs.bx, dtype=a.dtype)
    c = np.ascontiguousarray(inputs.c, dtype=a.dtype)
    h0 = np.ascontiguousarray(inputs.h0, dtype=a.dtype)
    BN, T, di, ds = a.shape
    if chunk is None:
        chunk = T if BN >= workers else DEFAULT_CHUNK
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    chunk = min(chunk, max(T, 1))
    bounds = [(t0, min(t0 + chunk, T)) for t0 in range(0, T, chunk)]
    tiles = _tiles(BN, di, workers)

    C = len(bounds)
    trans_a = np.empty((max(C - 1, 0), BN, di, ds), dtype=a.dtype)
    trans_b = np.empty_like(trans_a)
    h_out = np.empty_like(a) if store_h else np.empty((1, 1, 1, 1), dtype=a.dtype)
    y = np.empty((BN, T, di), dtype=a.dtype)

    def run(tasks):
        if workers == 1 or len(tasks) == 1:
            for fn, args in tasks:
                fn(*args)
            return
        futures = [_pool(workers).submit(fn, *args) for fn, args in tasks]
        for f in futures:
            f.result()

    run([(_chunk_transfer, (a, bx, t0, t1, n0, n1, i0, i1, trans_a[k], trans_b[k]))
         for k, (t0, t1) in enumerate(bounds[:-1]) for n0, n1, i0, i1 in tiles])

    starts = np.empty((C, BN, di, ds), dtype=a.dtype)
    starts[0] = h0
    for k in range(1, C):
        starts[k] = trans_a[k - 1] * starts[k - 1] + trans_b[k - 1]

    run([(_chunk_finalize, (a, bx, c, starts[k], t0, t1, n0, n1, i0, i1, h_out, y, store_h))
         for k, (t0, t1) in enumerate(bounds) for n0, n1, i0, i1 in tiles])
    return (h_out if store_h else None), y


def selective_scan(a_bar: Tensor, bx: Tensor, c: Tensor, h0: Tensor | None = None,
                   workers: int | None = 1, chunk: int | None = None) -> Tensor:
    """Differentiable scan: forward on the chunked path, backward by the adjoint recurrence."""
    BN, T, di, ds = a_bar.shape
    h0_data = np.zeros((BN, di, ds), dtype=a_bar.dtype) if h0 is None else h0.data
    inputs = ScanInputs(a_bar.data, bx.data, c.data, h0_data)
    h, y = scan_parallel(inputs, workers=workers, chunk=chunk, store_h=True)

    def bw(gy):
        gy = np.ascontiguousarray(gy, dtype=a_bar.dtype)
        ga = np.empty_like(inputs.a_bar)
        gbx = np.empty_like(inputs.a_bar)
        gc = np.zeros_like(inputs.c)
        gh0 = np.empty_like(h0_data)
        _scan_adjoint(np.ascontiguousarray(inputs.a_bar), np.ascontiguousarray(inputs.c), h,
                      np.ascontiguousarray(h0_data), gy, ga, gbx, gc, gh0)
        grads = (ga, gbx, gc)
        return grads if h0 is None else grads + (gh0,)

    parents = (a_bar, bx, c) if h0 is None else (a_bar, bx, c, h0)
    return record(y, parents, bw)


class SelectiveSSM(Module):
    """Input-dependent SSM block: ``y = scan(x) + x``."""

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 0.05, dt_max: float = 0.5):
        self.d_inner, self.d_state = d_inner, d_state
        self.a_log = param(rng.uniform(-0.5, 0.0, size=(d_inner, d_state)))
        self.dt_proj = Linear(d_inner, d_inner, rng)
        self.dt_proj.weight.data *= 0.1
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        self.dt_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))  # softplus^-1
        self.b_proj = Linear(d_inner, d_state, rng, bias=False)
        self.c_proj = Linear(d_inner, d_state, rng, bias=False)

    def __call__(self, x: Tensor, workers: int | None = 1, chunk: int | None = None) -> Tensor:
        return ssm_forward(x, self, workers=workers, chunk=chunk)


def ssm_forward(x: Tensor, params: SelectiveSSM, workers: int | None = 1, chunk: int | None = None) -> Tensor:
    """x: [BN, T, d_inner] -> [BN, T, d_inner]."""
    delta = ops.softplus(params.dt_proj(x))
    Bm = params.b_proj(x)
    Cm = params.c_proj(x)
    a_bar = discretize(delta, params.a_log)
    BN, T, di = x.shape
    ds = params.d_state
    bx = ops.reshape(delta * x, (BN, T, di, 1)) * ops.reshape(Bm, (BN, T, 1, ds))
    y = selective_scan(a_bar, bx, Cm, workers=workers, chunk=chunk)
    return y + x


class GlobalContext(Module):
    """SSM over mean-pooled object tracks; its output is added to every track."""

    def __init__(self, d: int, d_state: int, rng: np.random.Generator):
        self.ssm = SelectiveSSM(d, d_state, rng)

    def __call__(self, object_states: Tensor) -> Tensor:
        # [B, N, T, d] -> [B, T, d]
        pooled = ops.mean(object_states, axis=1)
        return self.ssm(pooled)


def global_context(object_states: Tensor, module: GlobalContext) -> Tensor:
    return module(object_states)


# ---------------------------------------------------------------- benchmark

TABLE_ROWS = (("Tiny", 128, 16), ("Base", 512, 16))


def bench_scan(rows=TABLE_ROWS, d_inner: int = 64, d_state: int = 8, workers: int | None = 8,
               chunk: int | None = None, repeats: int = 5, dtype=np.float64, seed: int = 0) -> list[dict]:
    """Median wall time of the sequential and chunked scans (forward, readout only)."""
    report = []
    rng = np.random.default_rng(seed)
    for name, bn, t in rows:
        inputs = ScanInputs.random(rng, bn, t, d_inner, d_state, dtype=dtype)
        scan_parallel(inputs, workers=workers, chunk=chunk, store_h=False)  # jit warm-up
        seq, par = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            scan_sequential(inputs, store_h=False)
            seq.append((time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            scan_parallel(inputs, workers=workers, chunk=chunk, store_h=False)
            par.append((time.perf_counter() - t0) * 1e3)
        s_ms, p_ms = statistics.median(seq), statistics.median(par)
        report.append({"Config": name, "BxN": bn, "T": t, "Sequential_ms": s_ms, "Parallel_ms": p_ms,
                       "Speedup": s_ms / p_ms})
        del inputs
    return report


BENCH_COLUMNS = ("Config", "BxN", "T", "Sequential_ms", "Parallel_ms", "Speedup")


def write_bench_csv(report: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for row in report:
            w.writerow([row["Config"], row["BxN"], row["T"], f"{row['Sequential_ms']:.3f}",
                        f"{row['Parallel_ms']:.3f}", f"{row['Speedup']:.2f}"])


# ------------------------------------------------------------ gradient checks


@register_check("scan")
def _c_scan(rng):
    def f(a, bx, c, h0):
        return selective_scan(a, bx, c, h0, chunk=3)

    return f, [np.exp(-rng.uniform(0, 1, (2, 5, 3, 2))), rng.uniform(-1, 1, (2, 5, 3, 2)),
               rng.uniform(-1, 1, (2, 5, 2)), rng.uniform(-1, 1, (2, 3, 2))]


@register_check("discretize")
def _c_disc(rng):
    return discretize, [rng.uniform(0.1, 2.0, (2, 3)), rng.uniform(-0.5, 0.0, (3, 2))]


@register_check("ssm_forward")
def _c_ssm(rng):
    block = SelectiveSSM(3, 2, rng)
    def f(x, a_log, dt_w, dt_b, b_w, c_w):
        block.a_log, block.dt_proj.weight, block.dt_proj.bias = a_log, dt_w, dt_b
        block.b_proj.weight, block.c_proj.weight = b_w, c_w
        return ssm_forward(x, block)

    return f, [rng.uniform(-1, 1, (2, 4, 3)), block.a_log.data.copy(), block.dt_proj.weight.data.copy(),
               block.dt_proj.bias.data.copy(), block.b_proj.weight.data.copy(), block.c_proj.weight.data.copy()]
