"""Single-layer testbeds: matrix factorization and matrix sensing.

Both problems expose ``loss_at(M)`` and ``grad_at(M)`` on the *materialized*
adapter output; the chain rule through each parameterization lives in
:meth:`lorakit.adapters.Adapter.pullback`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import Adapter
from .core import RandomSource, condition_number_r, numerical_rank
from .errors import ConfigurationError, DomainError, ShapeError


@dataclass(frozen=True)
class SyntheticSpec:
    m: int
    n: int
    r_A: int
    kappa: float = 1.0
    N: int = 0
    noise_sigma: float = 0.0
    spectrum: str = "linear"

    def __post_init__(self):
        if not 1 <= self.r_A <= min(self.m, self.n):
            raise ShapeError(f"r_A={self.r_A} must lie in [1, min(m, n)={min(self.m, self.n)}]")
        if self.kappa < 1:
            raise DomainError("kappa must be >= 1")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.spectrum not in ("linear", "log"):
            raise ConfigurationError(f"unknown spectrum {self.spectrum!r}", "problem.spectrum")


@dataclass(frozen=True, eq=False)
class FactorizationProblem:
    """``f = 1/2 ||A - dW||_F^2``; ``target`` may be a matrix or an ``(m, n, L)`` stack."""

    target: np.ndarray
    rank: int | None = None
    kappa: float | None = None

    @property
    def shape(self):
        return self.target.shape

    def loss_at(self, M) -> float:
        D = M - self.target
        return 0.5 * float(np.vdot(D, D))

    def grad_at(self, M) -> np.ndarray:
        return M - self.target

    def loss_grad_at(self, M):
        D = M - self.target
        return 0.5 * float(np.vdot(D, D)), D

    def proxy(self) -> np.ndarray:
        return self.target


@dataclass(frozen=True, eq=False)
class SensingProblem:
    """``f = 1/2 ||y - m(W_pre + dW)||^2`` with ``m(W)_i = Tr(M_i^T W)``.

    ``operators`` has shape ``(N, *W.shape)``.  ``truth`` (optional) is the
    generating update, kept for diagnostics only.
    """

    operators: np.ndarray
    y: np.ndarray
    W_pre: np.ndarray | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.y.shape != (self.operators.shape[0],):
            raise ShapeError(f"y has shape {self.y.shape}, expected ({self.operators.shape[0]},)")
        if self.W_pre is not None and self.W_pre.shape != self.shape:
            raise ShapeError("W_pre shape does not match the operators")

    @property
    def shape(self):
        return self.operators.shape[1:]

    def residual(self, M) -> np.ndarray:
        W = M if self.W_pre is None else self.W_pre + M
        return apply_sensing(self.operators, W) - self.y

    def loss_at(self, M) -> float:
        res = self.residual(M)
        return 0.5 * float(res @ res)

    def grad_at(self, M) -> np.ndarray:
        return adjoint_sensing(self.operators, self.residual(M))

    def loss_grad_at(self, M):
        res = self.residual(M)
        return 0.5 * float(res @ res), adjoint_sensing(self.operators, res)

    def proxy(self) -> np.ndarray:
        """Negative gradient at ``dW = 0``."""
        return -self.grad_at(np.zeros(self.shape))


Problem = FactorizationProblem | SensingProblem


# --------------------------------------------------------------------------
# construction


def _spectrum(spec: SyntheticSpec) -> np.ndarray:
    if spec.r_A == 1:
        if spec.kappa != 1:
            raise DomainError("a rank-1 target has condition number 1")
        return np.ones(1)
    if spec.spectrum == "log":
        return np.geomspace(spec.kappa, 1.0, spec.r_A)
    return np.linspace(spec.kappa, 1.0, spec.r_A)


def make_synthetic_target(spec: SyntheticSpec, rng: RandomSource) -> FactorizationProblem:
    """``A = U0 diag(d) V0^T`` with Haar-random orthonormal ``U0``, ``V0``.

    ``d`` runs from ``kappa`` down to 1 (linearly, or geometrically when
    ``spectrum == "log"``), so ``sigma_1 / sigma_{r_A} = kappa`` exactly.
    """
    d = _spectrum(spec)
    U0 = rng.child("U").orthonormal(spec.m, spec.r_A)
    V0 = rng.child("V").orthonormal(spec.n, spec.r_A)
    A = (U0 * d) @ V0.T
    return FactorizationProblem(A, spec.r_A, float(d[0] / d[-1]))


def make_target_stack(spec: SyntheticSpec, L: int, rng: RandomSource) -> FactorizationProblem:
    """``L`` independent synthetic targets stacked along a third mode."""
    slices = [make_synthetic_target(spec, rng.child(f"layer{l}")).target for l in range(L)]
    return FactorizationProblem(np.stack(slices, axis=-1), spec.r_A, spec.kappa)


def gaussian_operators(N: int, shape, rng: RandomSource) -> np.ndarray:
    """i.i.d. Gaussian sensing operators with entry variance ``1/N``."""
    return rng.normal((N, *shape), 1.0 / np.sqrt(N))


def make_sensing_problem(spec: SyntheticSpec, rng: RandomSource, W_pre=None, L: int | None = None) -> SensingProblem:
    if spec.N < 1:
        raise ConfigurationError("sensing needs N >= 1 measurements", "problem.N")
    if L is None:
        truth = make_synthetic_target(spec, rng.child("truth")).target
    else:
        truth = make_target_stack(spec, L, rng.child("truth")).target
    ops = gaussian_operators(spec.N, truth.shape, rng.child("operators"))
    W = truth if W_pre is None else W_pre + truth
    y = apply_sensing(ops, W)
    if spec.noise_sigma > 0:
        y = y + rng.child("noise").normal(y.shape, spec.noise_sigma)
    return SensingProblem(ops, y, None if W_pre is None else np.asarray(W_pre, float), truth)


def apply_sensing(ops, W) -> np.ndarray:
    """``[Tr(M_i^T W)]_i``."""
    W = np.asarray(W, dtype=np.float64)
    if ops.shape[1:] != W.shape:
        raise ShapeError(f"operators act on {ops.shape[1:]}, got {W.shape}")
    return np.tensordot(ops, W, axes=W.ndim)


def adjoint_sensing(ops, v) -> np.ndarray:
    """``sum_i v_i M_i``."""
    return np.tensordot(v, ops, axes=1)


def shift_pretrained(p: SensingProblem) -> SensingProblem:
    """Fold the frozen weight into the measurements: ``y <- y - m(W_pre)``."""
    if p.W_pre is None:
        raise ValueError("problem has no W_pre to shift out")
    return replace(p, y=p.y - apply_sensing(p.operators, p.W_pre), W_pre=None)


def check_target(p: FactorizationProblem, tol=1e-6) -> None:
    """Assert the recorded rank / condition number match the target."""
    r = numerical_rank(p.target, 1e-10)
    if r != p.rank:
        raise DomainError(f"target rank {r} != recorded {p.rank}")
    if abs(condition_number_r(p.target, r) - p.kappa) > tol * p.kappa:
        raise DomainError("target condition number differs from the recorded kappa")


# --------------------------------------------------------------------------
# loss and gradients over adapters


def _check_shape(p, M):
    if M.shape != tuple(p.shape):
        raise ShapeError(f"adapter materializes to {M.shape}, problem expects {tuple(p.shape)}")


def loss(p: Problem, spec: Adapter) -> float:
    M = spec.materialize()
    _check_shape(p, M)
    return p.loss_at(M)


def grad_factors(p: Problem, spec: Adapter) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` with respect to every trainable field."""
    M = spec.materialize()
    _check_shape(p, M)
    return spec.pullback(p.grad_at(M))


def loss_and_grad(p: Problem, spec: Adapter) -> tuple[float, dict[str, np.ndarray]]:
    M = spec.materialize()
    _check_shape(p, M)
    f, G = p.loss_grad_at(M)
    return f, spec.pullback(G)


def fd_grad_oracle(p: Problem, spec: Adapter, h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central finite differences, one trainable entry at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for name, value in spec.params().items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = value.copy()
            minus = value.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = loss(p, spec.with_params(**{name: plus}))
            fm = loss(p, spec.with_params(**{name: minus}))
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
