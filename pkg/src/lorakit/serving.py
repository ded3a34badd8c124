"""Batched forward pass for many Hadamard-tied adapters sharing one base weight.

User ``k`` owns factors ``(X^k, Y^k)`` and its output row is
``z^k W + z^k (W * X^k Y^k^T)`` (``*`` elementwise).  Since
``z (W * x y^T) = ((z * x) W) * y`` for vectors ``x``, ``y``, stacking the
``j``-th factor columns of every user gives one GEMM per rank index::

    out = Z W + sum_j ((Z * Xt_j) W) * Yt_j

with no per-user ``m x n`` intermediate.

Arithmetic is tallied by :class:`OpCounter` in plain flops: a ``(a x b)(b x c)``
product costs ``2abc``, an elementwise multiply or add costs one per entry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import RandomSource
from .errors import ShapeError


@dataclass(frozen=True, eq=False)
class BatchRequest:
    """``Z``: ``(K, m)`` inputs; ``X``: ``(K, m, r)`` and ``Y``: ``(K, n, r)`` stacked factors."""

    Z: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        for nm in ("Z", "X", "Y"):
            object.__setattr__(self, nm, np.asarray(getattr(self, nm), dtype=np.float64))
        Z, X, Y = self.Z, self.X, self.Y
        if Z.ndim != 2 or X.ndim != 3 or Y.ndim != 3:
            raise ShapeError("expected Z (K, m), X (K, m, r), Y (K, n, r)")
        K, m = Z.shape
        if K < 1:
            raise ShapeError("batch needs at least one user")
        if X.shape[:2] != (K, m) or Y.shape[0] != K or X.shape[2] != Y.shape[2]:
            raise ShapeError(f"inconsistent shapes Z{Z.shape}, X{X.shape}, Y{Y.shape}")

    @property
    def dims(self):
        K, m, r = self.X.shape
        return K, m, self.Y.shape[1], r


class OpCounter:
    def __init__(self):
        self.flops = 0

    def matmul(self, A, B):
        self.flops += 2 * A.shape[0] * A.shape[1] * B.shape[1]
        return A @ B

    def mul(self, A, B):
        out = A * B
        self.flops += out.size
        return out

    def add(self, A, B):
        out = A + B
        self.flops += out.size
        return out


def _check_W(W, batch):
    W = np.asarray(W, dtype=np.float64)
    K, m, n, r = batch.dims
    if W.shape != (m, n):
        raise ShapeError(f"W has shape {W.shape}, batch expects {(m, n)}")
    return W


def fastlora_forward(W, batch: BatchRequest, counter: OpCounter | None = None) -> np.ndarray:
    """Batched Hadamard-adapter forward; rank index ``j`` accumulates in fixed ascending order."""
    W = _check_W(W, batch)
    c = counter or OpCounter()
    out = c.matmul(batch.Z, W)
    for j in range(batch.X.shape[2]):
        Zj = c.mul(batch.Z, batch.X[:, :, j])
        out = c.add(out, c.mul(c.matmul(Zj, W), batch.Y[:, :, j]))
    return out


def naive_forward(W, batch: BatchRequest, counter: OpCounter | None = None) -> np.ndarray:
    """Reference per-user loop that forms ``W * X^k Y^k^T`` explicitly."""
    W = _check_W(W, batch)
    c = counter or OpCounter()
    K, m, n, r = batch.dims
    out = np.empty((K, n))
    for k in range(K):
        H = c.mul(W, c.matmul(batch.X[k], batch.Y[k].T))
        out[k] = c.matmul(batch.Z[k : k + 1], c.add(W, H))[0]
    return out


def standard_lora_forward(W, batch: BatchRequest, counter: OpCounter | None = None) -> np.ndarray:
    """Per-user additive LoRA ``z^k (W + X^k Y^k^T)``, evaluated as ``z W + (z X) Y^T``."""
    W = _check_W(W, batch)
    c = counter or OpCounter()
    K, m, n, r = batch.dims
    out = np.empty((K, n))
    for k in range(K):
        z = batch.Z[k : k + 1]
        out[k] = c.add(c.matmul(z, W), c.matmul(c.matmul(z, batch.X[k]), batch.Y[k].T))[0]
    return out


def flops_model(path: str, K: int, m: int, n: int, r: int) -> int:
    """Closed-form flop count of each forward path, in :class:`OpCounter` units."""
    if path == "fastlora":
        return 2 * K * m * n + r * (K * m + 2 * K * m * n + 2 * K * n)
    if path == "naive":
        return K * (2 * m * n * r + 4 * m * n)
    if path == "standard_lora":
        return K * (2 * m * n + 2 * m * r + 2 * r * n + n)
    raise ValueError(f"unknown path {path!r}")


FORWARDS = {"fastlora": fastlora_forward, "naive": naive_forward, "standard_lora": standard_lora_forward}
BENCH_COLUMNS = ("path", "K", "m", "n", "r", "median_ns", "flops_model")


def random_batch(K, m, n, r, rng: RandomSource) -> BatchRequest:
    return BatchRequest(rng.child("Z").normal((K, m)), rng.child("X").normal((K, m, r), 1 / np.sqrt(r)),
                        rng.child("Y").normal((K, n, r)))


def bench_serving(W, sizes, r: int, reps: int = 5, rng: RandomSource | None = None) -> list[dict]:
    """Median wall time per batch for each path and batch size ``K`` in ``sizes``."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    rng = rng or RandomSource(0, "bench")
    rows = []
    for K in sizes:
        batch = random_batch(K, m, n, r, rng.child(f"K{K}"))
        for path, fn in FORWARDS.items():
            times = []
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                fn(W, batch)
                times.append(time.perf_counter_ns() - t0)
            rows.append(dict(path=path, K=K, m=m, n=n, r=r, median_ns=int(np.median(times)),
                             flops_model=flops_model(path, K, m, n, r)))
    return rows


def speedup(rows, K, over="naive") -> float:
    """``median_ns(over) / median_ns(fastlora)`` at batch size ``K``."""
    t = {row["path"]: row["median_ns"] for row in rows if row["K"] == K}
    return t[over] / t["fastlora"]
