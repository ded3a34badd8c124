"""Dense containers, seeded randomness and spectral metrics.

Matrices are plain ``float64`` numpy arrays of shape ``(rows, cols)``; layer
stacks are 3-D arrays of shape ``(m, n, L)``.  Nothing here mutates its
inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, DomainError, ShapeError


@dataclass(frozen=True)
class Tolerances:
    """Every numerical constant the library relies on, in one place."""

    pd_floor_rel: float = 1e-12  # eigenvalue floor, relative to trace(P)/r
    gram_floor: float = 1e-12  # ScaledGD flooring, relative to trace(P)/r
    gram_cond_max: float = 1e14
    rank_tol: float = 1e-8
    stiefel_entry: float = 1e-6  # max ||U^T U - I||_F tolerated on entry to an RGD step
    fd_step: float = 1e-6


TOL = Tolerances()


def as_matrix(a, name="matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (no copy when already one)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


def as_tensor3(a, name="tensor") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 3-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


# --------------------------------------------------------------------------
# randomness


def _stream_key(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{stream}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


@dataclass
class RandomSource:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Two sources built from the same pair yield bit-identical draws on any
    host.  Use :meth:`child` to derive an independent named sub-stream, so
    that adding a consumer never shifts another consumer's draws.
    """

    seed: int
    stream: str = "root"
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        bitgen = np.random.Philox(key=_stream_key(self.seed, self.stream))
        self.generator = np.random.Generator(bitgen)

    def child(self, name: str) -> "RandomSource":
        return RandomSource(self.seed, f"{self.stream}/{name}")

    def normal(self, shape, scale=1.0) -> np.ndarray:
        return scale * self.generator.standard_normal(shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def orthonormal(self, rows: int, cols: int) -> np.ndarray:
        """Random ``rows x cols`` matrix with orthonormal columns (QR of a Gaussian)."""
        if cols > rows:
            raise ShapeError(f"cannot draw {cols} orthonormal columns in R^{rows}")
        q, r = np.linalg.qr(self.generator.standard_normal((rows, cols)))
        # sign fix makes the draw Haar-distributed and deterministic
        return q * np.where(np.diag(r) < 0, -1.0, 1.0)


# --------------------------------------------------------------------------
# spectral metrics


@dataclass(frozen=True)
class SpectralSummary:
    singular_values: np.ndarray
    stable_rank: float
    condition_number: float


def singular_values(M) -> np.ndarray:
    return np.linalg.svd(as_matrix(M), compute_uv=False)


def stable_rank(M) -> float:
    """``||M||_F^2 / ||M||_2^2``; lies in ``[1, min(m, n)]``."""
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        raise DomainError("stable rank of a zero matrix is undefined")
    return float(np.sum(s**2) / s[0] ** 2)


def numerical_rank(M, tol=TOL.rank_tol) -> int:
    """Number of singular values strictly above ``tol * sigma_max``."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def condition_number_r(M, r: int) -> float:
    """``sigma_1 / sigma_r``."""
    s = singular_values(M)
    if not 1 <= r <= s.size:
        raise ShapeError(f"r={r} out of range for {s.size} singular values")
    if s[r - 1] == 0.0:
        return float("inf")
    return float(s[0] / s[r - 1])


def spectral_summary(M, r: int | None = None) -> SpectralSummary:
    s = singular_values(M)
    if r is None:
        r = numerical_rank(M)
    kappa = float(s[0] / s[r - 1]) if r >= 1 and s[r - 1] > 0 else float("inf")
    return SpectralSummary(s, stable_rank(M), kappa)


def gram_imbalance(X, Y) -> float:
    """``||X^T X - Y^T Y||_F``."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"column mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return float(np.linalg.norm(X.T @ X - Y.T @ Y))


# --------------------------------------------------------------------------
# symmetric matrix functions


def _sym_eigh(P):
    P = as_matrix(P, "P")
    if P.shape[0] != P.shape[1]:
        raise ShapeError(f"expected a square matrix, got {P.shape}")
    return np.linalg.eigh(0.5 * (P + P.T))


def pd_floor(P) -> float:
    r = P.shape[0]
    return TOL.pd_floor_rel * max(float(np.trace(P)), 0.0) / r


def sym_psd_sqrt(P) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix."""
    w, Q = _sym_eigh(P)
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)) @ Q.T


def sym_pd_invsqrt(P) -> np.ndarray:
    """Inverse principal square root; eigenvalues floored at ``pd_floor(P)``."""
    w, Q = _sym_eigh(P)
    w = np.maximum(w, pd_floor(P))
    if w[0] <= 0.0:
        raise ConditioningError("matrix is zero; inverse square root undefined")
    return (Q / np.sqrt(w)) @ Q.T


def check_pd(P, name="P") -> None:
    w = np.linalg.eigvalsh(0.5 * (P + P.T))
    if w[0] <= pd_floor(P):
        raise ConditioningError(f"{name} is not positive definite (min eigenvalue {w[0]:.3e})")


def geometric_mean_S(PX, PY) -> np.ndarray:
    """Matrix geometric mean of ``PX^{-1}`` and ``PY``.

    ``S = PX^{-1/2} (PX^{1/2} PY PX^{1/2})^{1/2} PX^{-1/2}`` is the unique SPD
    solution of ``S PX S = PY``.
    """
    PX = as_matrix(PX, "PX")
    PY = as_matrix(PY, "PY")
    if PX.shape != PY.shape or PX.shape[0] != PX.shape[1]:
        raise ShapeError(f"need two square matrices of equal size, got {PX.shape}, {PY.shape}")
    check_pd(PX, "PX")
    check_pd(PY, "PY")
    hx = sym_psd_sqrt(PX)
    hx_inv = sym_pd_invsqrt(PX)
    mid = sym_psd_sqrt(hx @ PY @ hx)
    S = hx_inv @ mid @ hx_inv
    return 0.5 * (S + S.T)
