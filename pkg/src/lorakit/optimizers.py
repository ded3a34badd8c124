"""Full-batch optimizers over adapter parameterizations.

Every optimizer is a frozen dataclass; ``None`` step sizes are resolved
against the problem by :func:`resolve_defaults`.  The stepping functions are
pure: they take an adapter and return a new one.

Factor-pair optimizers (GD-family, ScaledGD, RefLoRA) act on :class:`BM`;
the Stiefel and landing optimizers act on :class:`SVDType`.  Plain GD also
accepts every other adapter variant and updates all trainable fields.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import BM, Adapter, SVDType, orthogonality_penalty
from .core import TOL, check_pd, geometric_mean_S, gram_imbalance, sym_pd_invsqrt
from .errors import ConditioningError, ConfigurationError, DomainError, FeasibilityError

# --------------------------------------------------------------------------
# optimizer specs


@dataclass(frozen=True)
class GD:
    eta: float | None = None


@dataclass(frozen=True)
class AltGD:
    eta_x: float | None = None
    eta_y: float | None = None


@dataclass(frozen=True)
class LoraPlusGD:
    eta_x: float | None = None
    rate_ratio: float = 4.0  # eta_y = rate_ratio * eta_x


@dataclass(frozen=True)
class FreezeX:
    eta: float | None = None


@dataclass(frozen=True)
class ScaledGD:
    eta: float = 0.25
    gram_floor: float = TOL.gram_floor


@dataclass(frozen=True)
class RefLoRA:
    eta: float | None = None
    mode: str = "full"  # or "scale_only"


@dataclass(frozen=True)
class StiefelRGD:
    eta_dir: float | None = None
    gamma_mag: float = 0.5


@dataclass(frozen=True)
class Landing:
    eta: float | None = None
    lambda_land: float = 1.0
    gamma_mag: float = 0.5


OPTIMIZERS = {
    "gd": GD, "altgd": AltGD, "loraplus": LoraPlusGD, "freeze_x": FreezeX,
    "scaledgd": ScaledGD, "reflora": RefLoRA, "stiefel_rgd": StiefelRGD, "landing": Landing,
}
OPTIMIZER_NAMES = {cls: name for name, cls in OPTIMIZERS.items()}
BM_ONLY = (AltGD, LoraPlusGD, FreezeX, ScaledGD, RefLoRA)
SVD_ONLY = (StiefelRGD, Landing)


def validate_optimizer(opt) -> None:
    for f in ("eta", "eta_x", "eta_dir", "gamma_mag", "lambda_land", "rate_ratio"):
        v = getattr(opt, f, None)
        if v is not None and not v > 0:
            raise ConfigurationError(f"{f} must be > 0", f"optimizer.{f}")
    if isinstance(opt, AltGD) and opt.eta_y is not None and opt.eta_y < 0:
        raise ConfigurationError("eta_y must be >= 0", "optimizer.eta_y")
    if isinstance(opt, ScaledGD) and opt.gram_floor < 0:
        raise ConfigurationError("gram_floor must be >= 0", "optimizer.gram_floor")
    if isinstance(opt, RefLoRA) and opt.mode not in ("full", "scale_only"):
        raise ConfigurationError(f"unknown mode {opt.mode!r}", "optimizer.mode")


def check_compatible(opt, adapter: Adapter) -> None:
    if isinstance(opt, BM_ONLY) and not isinstance(adapter, BM):
        raise ConfigurationError(f"{OPTIMIZER_NAMES[type(opt)]} needs a bm adapter, got {adapter.name}", "optimizer")
    if isinstance(opt, SVD_ONLY):
        if not isinstance(adapter, SVDType):
            raise ConfigurationError(f"{OPTIMIZER_NAMES[type(opt)]} needs an svd adapter, got {adapter.name}", "optimizer")
        want = "strict" if isinstance(opt, StiefelRGD) else "penalized"
        if adapter.ortho_mode != want:
            raise ConfigurationError(f"{OPTIMIZER_NAMES[type(opt)]} needs ortho_mode={want!r}", "adapter.ortho_mode")


def top_singular_value(problem) -> float:
    P = np.asarray(problem.proxy())
    if P.ndim == 3:
        P = P.reshape(P.shape[0], -1)
    s1 = float(np.linalg.norm(P, 2))
    if s1 == 0.0:
        raise DomainError("proxy is zero; cannot derive a default step size")
    return s1


def resolve_defaults(opt, problem):
    """Fill ``None`` step sizes: ``0.1/sigma_1^2`` for GD-type, ``0.25/sigma_1`` for RefLoRA."""
    names = [f for f in ("eta", "eta_x", "eta_y", "eta_dir") if hasattr(opt, f) and getattr(opt, f) is None]
    if not names:
        return opt
    s1 = top_singular_value(problem)
    base = 0.25 / s1 if isinstance(opt, RefLoRA) else 0.1 / s1**2
    upd = {f: base for f in names}
    return replace(opt, **upd)


# --------------------------------------------------------------------------
# stepping


def _grads(problem, adapter):
    return adapter.pullback(problem.grad_at(adapter.materialize()))


def _floored_inverse(P, floor):
    """``(P + floor * tr(P)/r I)^{-1}``, or ``None`` when ``P`` is exactly zero."""
    r = P.shape[0]
    tr = float(np.trace(P))
    if tr == 0.0:
        return None
    Pf = P + (floor * tr / r) * np.eye(r)
    if np.linalg.cond(Pf) > TOL.gram_cond_max:
        raise ConditioningError("Gram matrix too ill-conditioned after flooring")
    return np.linalg.inv(Pf)


def _precondition(g, Pinv):
    # a zero Gram means the partner factor is zero, hence so is g
    return np.zeros_like(g) if Pinv is None else g @ Pinv


def scaledgd_direction(X, Y, gX, gY, floor=TOL.gram_floor):
    return _precondition(gX, _floored_inverse(Y.T @ Y, floor)), _precondition(gY, _floored_inverse(X.T @ X, floor))


def reflora_metric(X, Y, mode="full") -> np.ndarray:
    """The ``S`` of the balancing metric: geometric mean of ``(X^T X)^{-1}`` and ``Y^T Y``."""
    if mode == "full":
        return geometric_mean_S(X.T @ X, Y.T @ Y)
    nx, ny = np.linalg.norm(X), np.linalg.norm(Y)
    if nx == 0.0 or ny == 0.0:
        raise ConditioningError("scale-only metric needs nonzero factors")
    return (ny / nx) * np.eye(X.shape[1])


def tangent_project(U, G) -> np.ndarray:
    """``G - U sym(U^T G)``: projection onto the Stiefel tangent space at ``U``."""
    UG = U.T @ G
    return G - U @ (0.5 * (UG + UG.T))


def polar_retract(U, E, eta) -> np.ndarray:
    """``(U - eta E)(I + eta^2 E^T E)^{-1/2}``; exact polar factor when ``U^T E`` is skew."""
    r = U.shape[1]
    return (U - eta * E) @ sym_pd_invsqrt(np.eye(r) + eta**2 * (E.T @ E))


def landing_field(U, G, lam) -> np.ndarray:
    return tangent_project(U, G) + lam * U @ (U.T @ U - np.eye(U.shape[1]))


def _theta_step(problem, ad: SVDType, gamma):
    g = _grads(problem, ad)["Sigma"]
    return replace(ad, Sigma=ad.Sigma - gamma * g)


def _check_stiefel(ad: SVDType):
    for nm, Q in (("U", ad.U), ("V", ad.V)):
        err = np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1]))
        if err > TOL.stiefel_entry:
            raise FeasibilityError(f"{nm} is off the Stiefel manifold by {err:.2e}")


def update(adapter, problem, opt, grads=None):
    """One optimizer step from ``adapter``; ``grads`` (at ``adapter``) may be passed in to save work."""
    if grads is None:
        grads = _grads(problem, adapter)
    if isinstance(opt, GD) and not isinstance(adapter, BM):
        return adapter.with_params(**{k: v - opt.eta * grads[k] for k, v in adapter.params().items()})
    X, Y = getattr(adapter, "X", None), getattr(adapter, "Y", None)
    gX, gY = grads.get("X"), grads.get("Y")
    bm = BM.unchecked
    if isinstance(opt, GD):
        return bm(X - opt.eta * gX, Y - opt.eta * gY)
    if isinstance(opt, AltGD):
        Xn = X - opt.eta_x * gX
        gY = _grads(problem, bm(Xn, Y))["Y"]
        return bm(Xn, Y - opt.eta_y * gY)
    if isinstance(opt, LoraPlusGD):
        return bm(X - opt.eta_x * gX, Y - opt.rate_ratio * opt.eta_x * gY)
    if isinstance(opt, FreezeX):
        return bm(X, Y - opt.eta * gY)
    if isinstance(opt, ScaledGD):
        dX, dY = scaledgd_direction(X, Y, gX, gY, opt.gram_floor)
        return bm(X - opt.eta * dX, Y - opt.eta * dY)
    if isinstance(opt, RefLoRA):
        if opt.mode == "full":
            check_pd(X.T @ X, "X^T X")
            check_pd(Y.T @ Y, "Y^T Y")
        S = reflora_metric(X, Y, opt.mode)
        return bm(X - opt.eta * np.linalg.solve(S, gX.T).T, Y - opt.eta * gY @ S)
    if isinstance(opt, StiefelRGD):
        _check_stiefel(adapter)
        U = polar_retract(adapter.U, tangent_project(adapter.U, grads["U"]), opt.eta_dir)
        V = polar_retract(adapter.V, tangent_project(adapter.V, grads["V"]), opt.eta_dir)
        return _theta_step(problem, replace(adapter, U=U, V=V), opt.gamma_mag)
    if isinstance(opt, Landing):
        U = adapter.U - opt.eta * landing_field(adapter.U, grads["U"], opt.lambda_land)
        V = adapter.V - opt.eta * landing_field(adapter.V, grads["V"], opt.lambda_land)
        return _theta_step(problem, replace(adapter, U=U, V=V), opt.gamma_mag)
    raise ConfigurationError(f"unknown optimizer {opt!r}", "optimizer")


# --------------------------------------------------------------------------
# state-based interface


@dataclass(frozen=True)
class StopRule:
    max_iters: int = 1000
    loss_tol: float = 0.0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be >= 0", "stop.max_iters")
        if self.loss_tol < 0:
            raise ConfigurationError("loss_tol must be >= 0", "stop.loss_tol")


@dataclass(frozen=True)
class RunState:
    adapter: Adapter
    iteration: int = 0
    stop: StopRule = field(default_factory=StopRule)


def step(state: RunState, problem, opt) -> RunState:
    return replace(state, adapter=update(state.adapter, problem, opt), iteration=state.iteration + 1)


def _typed_step(kinds):
    def fn(state, problem, opt):
        if not isinstance(opt, kinds):
            raise ConfigurationError(f"wrong optimizer for this step: {opt!r}", "optimizer")
        check_compatible(opt, state.adapter)
        return step(state, problem, opt)
    return fn


step_gd = _typed_step((GD, LoraPlusGD, FreezeX))
step_altgd = _typed_step(AltGD)
step_scaledgd = _typed_step(ScaledGD)
step_reflora = _typed_step(RefLoRA)
step_stiefel_rgd = _typed_step(StiefelRGD)
step_landing = _typed_step(Landing)


# --------------------------------------------------------------------------
# run loop


COLUMNS = ("iter", "loss", "grad_norm", "stable_rank", "gram_imbalance", "ortho_penalty", "wall_ns")


@dataclass
class RunRecord:
    rows: list[dict]
    adapter: Adapter
    iterations: int
    converged: bool
    diverged: bool = False
    header: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)


def fast_stable_rank(adapter) -> float | None:
    """Stable rank of the materialized update; ``None`` for a zero update.

    Factor-form adapters use QR of the thin factors, so no ``m x n`` SVD is needed.
    """
    if isinstance(adapter, BM):
        _, Rx = np.linalg.qr(adapter.X)
        _, Ry = np.linalg.qr(adapter.Y)
        s = np.linalg.svd(Rx @ Ry.T, compute_uv=False)
    elif isinstance(adapter, SVDType):
        _, Ru = np.linalg.qr(adapter.U)
        _, Rv = np.linalg.qr(adapter.V)
        s = np.linalg.svd(Ru @ adapter.Sigma @ Rv.T, compute_uv=False)
    else:
        M = adapter.materialize()
        s = np.linalg.svd(M.reshape(M.shape[0], -1), compute_uv=False)
    if s.size == 0 or s[0] <= 1e-300:
        return None
    return float(np.sum(s**2) / s[0] ** 2)


def metrics_row(it, loss_value, grads, adapter, wall_ns=None, full=True) -> dict:
    with np.errstate(over="ignore"):
        gn = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    row = dict(iter=it, loss=loss_value, grad_norm=gn, stable_rank=None,
               gram_imbalance=None, ortho_penalty=None, wall_ns=wall_ns)
    if full:
        row["stable_rank"] = fast_stable_rank(adapter)
        if isinstance(adapter, BM):
            row["gram_imbalance"] = gram_imbalance(adapter.X, adapter.Y)
        elif isinstance(adapter, SVDType):
            row["ortho_penalty"] = orthogonality_penalty(adapter.U) + orthogonality_penalty(adapter.V)
    return row


def run(problem, adapter: Adapter, opt, stop: StopRule = StopRule(), *, log_every: int = 1,
        record_time: bool = False) -> RunRecord:
    """Iterate until ``loss <= stop.loss_tol`` or ``stop.max_iters`` steps.

    Row ``t`` holds metrics at iterate ``t`` (row 0 is the start).  With
    ``log_every > 1`` only every ``log_every``-th iterate plus the final one
    is logged.  ``wall_ns`` (time since start) is filled only when
    ``record_time`` is set, which keeps default output deterministic.
    A non-finite loss or factor ends the run with ``diverged=True``.
    """
    if log_every < 1:
        raise ConfigurationError("log_every must be >= 1", "log_every")
    validate_optimizer(opt)
    check_compatible(opt, adapter)
    opt = resolve_defaults(opt, problem)
    t0 = time.perf_counter_ns()
    rows = []
    it = 0
    ad = adapter
    prev = None  # metrics inputs of the latest finite iterate
    diverged = False
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            f, G = problem.loss_grad_at(ad.materialize())
        if not np.isfinite(f):
            diverged = True
            break
        grads = ad.pullback(G)
        prev = (it, f, grads, ad, time.perf_counter_ns() - t0 if record_time else None)
        done = f <= stop.loss_tol or it >= stop.max_iters
        if done or it % log_every == 0:
            rows.append(metrics_row(*prev))
        if done:
            break
        try:
            ad = update(ad, problem, opt, grads)
        except DomainError:  # factors overflowed to non-finite values
            diverged = True
            break
        it += 1
    if diverged:
        if prev is None:
            raise DomainError("loss is not finite at the starting point")
        it, ad = prev[0], prev[3]
        if rows[-1]["iter"] != it:
            rows.append(metrics_row(*prev))
    if isinstance(ad, BM):
        ad = BM(ad.X, ad.Y)  # re-validate what the unchecked inner loop produced
    converged = not diverged and rows[-1]["loss"] <= stop.loss_tol
    return RunRecord(rows, ad, it, converged=converged, diverged=diverged)


def iterations_to_tol(rec: RunRecord) -> float:
    """Iteration at which the run hit its tolerance, ``inf`` if it did not."""
    return float(rec.iterations) if rec.converged else float("inf")
