"""Initialization schemes returning ready-to-train factor pairs.

Subspace-aware schemes read a *proxy* matrix from the problem: the target
``A`` for factorization, the negative gradient at ``dW = 0`` for sensing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import BM, SVDType
from .core import RandomSource, as_matrix
from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class LoraDefault:
    scale: float | None = None  # std of X0; None -> 1/sqrt(m)


@dataclass(frozen=True)
class GaussianSmall:
    sigma_x: float = 1e-3
    sigma_y: float = 1e-3


@dataclass(frozen=True)
class Nystrom:
    scale: float | None = None  # std of the sketch; None -> 1/sqrt(n)


@dataclass(frozen=True)
class NystromAlt:
    scale: float | None = None
    sigma_y: float | None = None  # std of Y0; None -> 1/sqrt(n)


@dataclass(frozen=True)
class SpectralTop:
    pass


@dataclass(frozen=True)
class SpectralBottom:
    pass


@dataclass(frozen=True)
class QrTop:
    pass


@dataclass(frozen=True)
class GradientSpectral:
    pass


@dataclass(frozen=True)
class LoftQ:
    bits: int = 4
    sweeps: int = 5


@dataclass(frozen=True)
class RandomFactors:
    """Gaussian entries with std ``scale`` in every trainable field."""

    scale: float = 0.1


@dataclass(frozen=True)
class StiefelRandom:
    """SVD-type start: Haar-random orthonormal ``U``, ``V`` and ``Sigma = 0``."""

    ortho_mode: str = "penalized"


INIT_SCHEMES = {
    "lora_default": LoraDefault, "gaussian_small": GaussianSmall, "nystrom": Nystrom,
    "nystrom_alt": NystromAlt, "spectral_top": SpectralTop, "spectral_bottom": SpectralBottom,
    "qr_top": QrTop, "gradient_spectral": GradientSpectral, "loftq": LoftQ,
    "stiefel_random": StiefelRandom, "random": RandomFactors,
}
INIT_NAMES = {cls: name for name, cls in INIT_SCHEMES.items()}


def validate_init(spec) -> None:
    for f in ("scale", "sigma_x", "sigma_y"):
        v = getattr(spec, f, None)
        if v is not None and v <= 0:
            raise ConfigurationError(f"{f} must be positive", f"init.{f}")
    if isinstance(spec, LoftQ):
        if not 2 <= spec.bits <= 16:
            raise ConfigurationError("bits must lie in [2, 16]", "init.bits")
        if spec.sweeps < 1:
            raise ConfigurationError("sweeps must be >= 1", "init.sweeps")


# --------------------------------------------------------------------------
# helpers


def _fix_signs(U, Vt):
    """Flip singular pairs so the largest-magnitude entry of each left vector is positive."""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def truncated_svd(M, r, bottom=False):
    U, s, Vt = np.linalg.svd(as_matrix(M), full_matrices=False)
    sl = slice(s.size - r, s.size) if bottom else slice(0, r)
    U, Vt = _fix_signs(U[:, sl], Vt[sl])
    return U, s[sl], Vt


def _svd_factors(M, r, bottom=False):
    U, s, Vt = truncated_svd(M, r, bottom)
    root = np.sqrt(s)
    return BM(U * root, Vt.T * root)


def init(spec, problem, shape, rng: RandomSource):
    """Build the starting adapter for ``spec`` on ``problem``.

    ``shape`` is ``(m, n, r)``.  Returns a :class:`BM` pair, or an
    :class:`SVDType` for :class:`StiefelRandom`.
    """
    m, n, r = shape
    if r > min(m, n):
        raise ShapeError(f"rank {r} exceeds min(m, n) = {min(m, n)}")
    if r < 1:
        raise ShapeError("rank must be >= 1")
    validate_init(spec)

    if isinstance(spec, LoraDefault):
        scale = spec.scale if spec.scale is not None else 1.0 / np.sqrt(m)
        return BM(rng.child("X").normal((m, r), scale), np.zeros((n, r)))
    if isinstance(spec, GaussianSmall):
        return BM(rng.child("X").normal((m, r), spec.sigma_x), rng.child("Y").normal((n, r), spec.sigma_y))
    if isinstance(spec, RandomFactors):
        return BM(rng.child("X").normal((m, r), spec.scale), rng.child("Y").normal((n, r), spec.scale))
    if isinstance(spec, StiefelRandom):
        return SVDType(rng.child("U").orthonormal(m, r), np.zeros((r, r)),
                       rng.child("V").orthonormal(n, r), ortho_mode=spec.ortho_mode)

    P = as_matrix(problem.proxy(), "proxy")
    if P.shape != (m, n):
        raise ShapeError(f"proxy has shape {P.shape}, expected {(m, n)}")

    if isinstance(spec, (Nystrom, NystromAlt)):
        scale = spec.scale if spec.scale is not None else 1.0 / np.sqrt(n)
        X0 = P @ rng.child("Phi").normal((n, r), scale)
        if isinstance(spec, Nystrom):
            return BM(X0, np.zeros((n, r)))
        sy = spec.sigma_y if spec.sigma_y is not None else 1.0 / np.sqrt(n)
        return BM(X0, rng.child("Psi").normal((n, r), sy))
    if isinstance(spec, (SpectralTop, GradientSpectral)):
        return _svd_factors(P, r)
    if isinstance(spec, SpectralBottom):
        return _svd_factors(P, r, bottom=True)
    if isinstance(spec, QrTop):
        Q, R = np.linalg.qr(P)
        Q, Rt = _fix_signs(Q[:, :r], R[:r])
        return BM(Q, Rt.T)
    if isinstance(spec, LoftQ):
        _, X, Y = loftq_alternating(P, r, UniformQuantizer(spec.bits), spec.sweeps)
        return BM(X, Y)
    raise ConfigurationError(f"unknown init scheme {spec!r}", "init")


# --------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class UniformQuantizer:
    """Symmetric per-matrix uniform quantizer.

    With ``scale=None`` the step is derived from each input's absolute
    maximum, ``step = absmax / (2^(bits-1) - 1)``, so no value clips and the
    round-trip error is at most half a step.
    """

    bits: int
    scale: float | None = None

    @property
    def levels(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def step(self, W) -> float:
        if self.scale is not None:
            return self.scale
        amax = float(np.max(np.abs(W))) if np.size(W) else 0.0
        return amax / self.levels if amax > 0 else 1.0

    def quantize(self, W):
        """Integer codes and the step used."""
        step = self.step(W)
        codes = np.clip(np.rint(W / step), -self.levels, self.levels)
        return codes, step

    def __call__(self, W) -> np.ndarray:
        codes, step = self.quantize(W)
        return codes * step


def loftq_alternating(W, r: int, q: UniformQuantizer, sweeps: int, callback=None):
    """Alternate ``Q_t = q(W - X Y^T)`` with a rank-``r`` SVD refit of ``W - Q_t``.

    Starts from ``X = Y = 0``.  ``callback(t, Q, X, Y, tail_sq)`` is invoked
    after every refit; ``tail_sq`` is the squared singular-value mass of
    ``W - Q_t`` beyond rank ``r``.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    W = as_matrix(W, "W")
    m, n = W.shape
    X = np.zeros((m, r))
    Y = np.zeros((n, r))
    Q = np.zeros_like(W)
    for t in range(1, sweeps + 1):
        Q = q(W - X @ Y.T)
        U, s, Vt = np.linalg.svd(W - Q, full_matrices=False)
        k = min(r, s.size)
        root = np.sqrt(s[:k])
        X = np.zeros((m, r))
        Y = np.zeros((n, r))
        X[:, :k] = U[:, :k] * root
        Y[:, :k] = Vt[:k].T * root
        if callback is not None:
            callback(t, Q, X, Y, float(np.sum(s[k:] ** 2)))
    return Q, X, Y
