"""Adapter parameterizations of a weight update.

Every variant is an immutable dataclass that knows how to

* ``materialize()`` itself into a dense ``m x n`` matrix (or an ``m x n x L``
  layer stack for the tensor variants),
* ``pullback(G)``: map the gradient ``G`` of a loss with respect to the
  materialized array onto gradients for its trainable fields,
* ``param_count()``: count trainable scalars (frozen fields excluded).

Frozen fields (pre-trained weights, shared random bases, sparsity masks) are
never touched by optimizers; they only ever see the names listed in
``trainable``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import ClassVar

import numpy as np

from .core import RandomSource, as_matrix, as_tensor3, numerical_rank
from .errors import ConditioningError, EmptyAdapterError, RankError, ShapeError

__all__ = [
    "Adapter", "BM", "SVDType", "FedPara", "HiRA", "Kron", "KronEnsemble",
    "LowRankSparse", "SparseHadamard", "VeRA", "NoLA", "DoRA", "CP3", "Tucker2",
    "Tucker3", "TT3", "VARIANTS", "materialize", "materialize_fedpara_krp",
    "param_count", "construct_fedpara_rank_r", "prune_by_sigma",
    "orthogonality_penalty", "row_khatri_rao", "random_adapter",
]


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


def _check_mask(mask, size):
    mask = np.asarray(mask, dtype=np.int64)
    _check(mask.ndim == 1, "mask must be a 1-D index list")
    if mask.size:
        _check(np.all(np.diff(mask) > 0), "mask indices must be strictly increasing")
        _check(mask[0] >= 0 and mask[-1] < size, "mask index out of bounds")
    return mask


@dataclass(frozen=True, eq=False)
class Adapter:
    name: ClassVar[str] = ""
    trainable: ClassVar[tuple[str, ...]] = ()

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.trainable}

    def with_params(self, **updates) -> "Adapter":
        bad = set(updates) - set(self.trainable)
        if bad:
            raise KeyError(f"not trainable on {self.name}: {sorted(bad)}")
        return replace(self, **updates)

    def materialize(self) -> np.ndarray:
        raise NotImplementedError

    def pullback(self, G) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def param_count(self) -> int:
        return int(sum(np.size(v) for v in self.params().values()))

    @property
    def output_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    def __repr__(self):
        parts = ", ".join(f"{f.name}{getattr(getattr(self, f.name), 'shape', '')}" for f in fields(self))
        return f"{type(self).__name__}({parts})"


# --------------------------------------------------------------------------
# matrix variants


@dataclass(frozen=True, eq=False)
class BM(Adapter):
    """Burer-Monteiro / LoRA: ``dW = X Y^T``."""

    X: np.ndarray
    Y: np.ndarray
    name: ClassVar[str] = "bm"
    trainable: ClassVar[tuple[str, ...]] = ("X", "Y")

    def __post_init__(self):
        object.__setattr__(self, "X", as_matrix(self.X, "X"))
        object.__setattr__(self, "Y", as_matrix(self.Y, "Y"))
        _check(self.X.shape[1] == self.Y.shape[1], "X and Y need the same rank")

    @property
    def output_shape(self):
        return (self.X.shape[0], self.Y.shape[0])

    @classmethod
    def unchecked(cls, X, Y) -> "BM":
        """Skip validation; for optimizer inner loops that already hold float64 arrays."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "X", X)
        object.__setattr__(obj, "Y", Y)
        return obj

    def materialize(self):
        return self.X @ self.Y.T

    def pullback(self, G):
        return {"X": G @ self.Y, "Y": G.T @ self.X}


@dataclass(frozen=True, eq=False)
class SVDType(Adapter):
    """``dW = U Sigma V^T`` with (approximately) orthonormal ``U``, ``V``.

    ``sigma_diagonal`` restricts the trainable part of ``Sigma`` to its
    diagonal.  ``ortho_mode`` tells optimizers who owns feasibility:
    ``"strict"`` (retraction-based) or ``"penalized"`` (landing / penalty).
    """

    U: np.ndarray
    Sigma: np.ndarray
    V: np.ndarray
    sigma_diagonal: bool = False
    ortho_mode: str = "strict"
    name: ClassVar[str] = "svd"
    trainable: ClassVar[tuple[str, ...]] = ("U", "Sigma", "V")

    def __post_init__(self):
        U = as_matrix(self.U, "U")
        V = as_matrix(self.V, "V")
        S = np.asarray(self.Sigma, dtype=np.float64)
        if S.ndim == 1:
            S = np.diag(S)
        S = as_matrix(S, "Sigma")
        r = U.shape[1]
        _check(V.shape[1] == r and S.shape == (r, r), "U, Sigma, V ranks disagree")
        _check(self.ortho_mode in ("strict", "penalized"), f"bad ortho_mode {self.ortho_mode!r}")
        if self.sigma_diagonal:
            S = np.diag(np.diag(S))
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "Sigma", S)

    @property
    def output_shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def rank(self):
        return self.U.shape[1]

    def materialize(self):
        return self.U @ self.Sigma @ self.V.T

    def pullback(self, G):
        gS = self.U.T @ G @ self.V
        if self.sigma_diagonal:
            gS = np.diag(np.diag(gS))
        return {"U": G @ self.V @ self.Sigma.T, "Sigma": gS, "V": G.T @ self.U @ self.Sigma}

    def param_count(self):
        m, n = self.output_shape
        r = self.rank
        return (m + n) * r + (r if self.sigma_diagonal else r * r)


@dataclass(frozen=True, eq=False)
class FedPara(Adapter):
    """Hadamard product of two low-rank branches ``(X1 Y1^T) * (X2 Y2^T)``."""

    X1: np.ndarray
    Y1: np.ndarray
    X2: np.ndarray
    Y2: np.ndarray
    name: ClassVar[str] = "fedpara"
    trainable: ClassVar[tuple[str, ...]] = ("X1", "Y1", "X2", "Y2")

    def __post_init__(self):
        for k in self.trainable:
            object.__setattr__(self, k, as_matrix(getattr(self, k), k))
        _check(self.X1.shape == self.X2.shape and self.Y1.shape == self.Y2.shape,
               "both branches must share shapes")
        _check(self.X1.shape[1] == self.Y1.shape[1], "X and Y need the same rank")

    @property
    def output_shape(self):
        return (self.X1.shape[0], self.Y1.shape[0])

    def materialize(self):
        return (self.X1 @ self.Y1.T) * (self.X2 @ self.Y2.T)

    def pullback(self, G):
        P1 = self.X1 @ self.Y1.T
        P2 = self.X2 @ self.Y2.T
        G1 = G * P2
        G2 = G * P1
        return {"X1": G1 @ self.Y1, "Y1": G1.T @ self.X1, "X2": G2 @ self.Y2, "Y2": G2.T @ self.X2}


@dataclass(frozen=True, eq=False)
class HiRA(Adapter):
    """Hadamard product with the frozen weight: ``W0 * (X Y^T)``."""

    W0: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    name: ClassVar[str] = "hira"
    trainable: ClassVar[tuple[str, ...]] = ("X", "Y")

    def __post_init__(self):
        for k in ("W0", "X", "Y"):
            object.__setattr__(self, k, as_matrix(getattr(self, k), k))
        _check(self.W0.shape == (self.X.shape[0], self.Y.shape[0]), "W0 shape mismatch")
        _check(self.X.shape[1] == self.Y.shape[1], "X and Y need the same rank")

    @property
    def output_shape(self):
        return self.W0.shape

    def materialize(self):
        return self.W0 * (self.X @ self.Y.T)

    def pullback(self, G):
        GP = G * self.W0
        return {"X": GP @ self.Y, "Y": GP.T @ self.X}


@dataclass(frozen=True, eq=False)
class Kron(Adapter):
    """``A (d1 x d2)  kron  B (d3 x d4)``, giving ``m = d1 d3``, ``n = d2 d4``."""

    A: np.ndarray
    B: np.ndarray
    name: ClassVar[str] = "kron"
    trainable: ClassVar[tuple[str, ...]] = ("A", "B")

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))

    @property
    def output_shape(self):
        return (self.A.shape[0] * self.B.shape[0], self.A.shape[1] * self.B.shape[1])

    def materialize(self):
        return np.kron(self.A, self.B)

    def pullback(self, G):
        d1, d2 = self.A.shape
        d3, d4 = self.B.shape
        G4 = G.reshape(d1, d3, d2, d4)
        return {"A": np.einsum("ikjl,kl->ij", G4, self.B), "B": np.einsum("ikjl,ij->kl", G4, self.A)}


@dataclass(frozen=True, eq=False)
class KronEnsemble(Adapter):
    """Weighted sum ``sum_k alpha_k A_k kron B_k``; ``A`` is ``(K, d1, d2)``, ``B`` is ``(K, d3, d4)``."""

    alpha: np.ndarray
    A: np.ndarray
    B: np.ndarray
    name: ClassVar[str] = "kron_ensemble"
    trainable: ClassVar[tuple[str, ...]] = ("alpha", "A", "B")

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        A = as_tensor3(self.A, "A")
        B = as_tensor3(self.B, "B")
        _check(A.shape[0] == B.shape[0] == alpha.size, "K mismatch between alpha, A, B")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def output_shape(self):
        return (self.A.shape[1] * self.B.shape[1], self.A.shape[2] * self.B.shape[2])

    def materialize(self):
        out = np.zeros(self.output_shape)
        for a, Ak, Bk in zip(self.alpha, self.A, self.B):
            out += a * np.kron(Ak, Bk)
        return out

    def pullback(self, G):
        _, d1, d2 = self.A.shape
        _, d3, d4 = self.B.shape
        G4 = G.reshape(d1, d3, d2, d4)
        # <G, A kron B> = sum G4[i,k,j,l] A[i,j] B[k,l]
        gA = np.einsum("ikjl,qkl->qij", G4, self.B) * self.alpha[:, None, None]
        gB = np.einsum("ikjl,qij->qkl", G4, self.A) * self.alpha[:, None, None]
        galpha = np.einsum("ikjl,qij,qkl->q", G4, self.A, self.B)
        return {"alpha": galpha, "A": gA, "B": gB}


@dataclass(frozen=True, eq=False)
class LowRankSparse(Adapter):
    """``X Y^T + S`` with ``S`` supported on a fixed row-major index set."""

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    name: ClassVar[str] = "lowrank_sparse"
    trainable: ClassVar[tuple[str, ...]] = ("X", "Y", "values")

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        Y = as_matrix(self.Y, "Y")
        _check(X.shape[1] == Y.shape[1], "X and Y need the same rank")
        mask = _check_mask(self.mask, X.shape[0] * Y.shape[0])
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        _check(values.size == mask.size, "values and mask lengths differ")
        for k, v in (("X", X), ("Y", Y), ("mask", mask), ("values", values)):
            object.__setattr__(self, k, v)

    @property
    def output_shape(self):
        return (self.X.shape[0], self.Y.shape[0])

    def sparse_part(self):
        S = np.zeros(self.output_shape)
        S.flat[self.mask] = self.values
        return S

    def materialize(self):
        return self.X @ self.Y.T + self.sparse_part()

    def pullback(self, G):
        return {"X": G @ self.Y, "Y": G.T @ self.X, "values": G.flat[self.mask].copy()}


@dataclass(frozen=True, eq=False)
class SparseHadamard(Adapter):
    """``W0 * S`` where only the entries of ``S`` on a fixed mask are trainable."""

    W0: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    name: ClassVar[str] = "sparse_hadamard"
    trainable: ClassVar[tuple[str, ...]] = ("values",)

    def __post_init__(self):
        W0 = as_matrix(self.W0, "W0")
        mask = _check_mask(self.mask, W0.size)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        _check(values.size == mask.size, "values and mask lengths differ")
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @property
    def output_shape(self):
        return self.W0.shape

    def materialize(self):
        out = np.zeros(self.W0.shape)
        out.flat[self.mask] = self.W0.flat[self.mask] * self.values
        return out

    def pullback(self, G):
        return {"values": G.flat[self.mask] * self.W0.flat[self.mask]}


@dataclass(frozen=True, eq=False)
class VeRA(Adapter):
    """``diag(a) A diag(b) B^T`` with frozen shared random ``A (m x r)``, ``B (n x r)``."""

    a: np.ndarray
    b: np.ndarray
    A_shared: np.ndarray
    B_shared: np.ndarray
    name: ClassVar[str] = "vera"
    trainable: ClassVar[tuple[str, ...]] = ("a", "b")

    def __post_init__(self):
        A = as_matrix(self.A_shared, "A_shared")
        B = as_matrix(self.B_shared, "B_shared")
        a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        _check(A.shape[1] == B.shape[1] == b.size and a.size == A.shape[0], "VeRA shape mismatch")
        for k, v in (("a", a), ("b", b), ("A_shared", A), ("B_shared", B)):
            object.__setattr__(self, k, v)

    @property
    def output_shape(self):
        return (self.A_shared.shape[0], self.B_shared.shape[0])

    def materialize(self):
        return self.a[:, None] * ((self.A_shared * self.b) @ self.B_shared.T)

    def pullback(self, G):
        inner = (self.A_shared * self.b) @ self.B_shared.T
        ga = np.sum(G * inner, axis=1)
        gb = np.einsum("ij,i,ik,jk->k", G, self.a, self.A_shared, self.B_shared)
        return {"a": ga, "b": gb}


@dataclass(frozen=True, eq=False)
class NoLA(Adapter):
    """``(sum_k alpha_k A^k)(sum_k beta_k B^k)^T`` over frozen random dictionaries."""

    alpha: np.ndarray
    beta: np.ndarray
    dictA: np.ndarray
    dictB: np.ndarray
    name: ClassVar[str] = "nola"
    trainable: ClassVar[tuple[str, ...]] = ("alpha", "beta")

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        dA = as_tensor3(self.dictA, "dictA")
        dB = as_tensor3(self.dictB, "dictB")
        _check(dA.shape[0] == dB.shape[0] == alpha.size == beta.size, "K mismatch")
        _check(dA.shape[2] == dB.shape[2], "dictionary ranks differ")
        for k, v in (("alpha", alpha), ("beta", beta), ("dictA", dA), ("dictB", dB)):
            object.__setattr__(self, k, v)

    @property
    def output_shape(self):
        return (self.dictA.shape[1], self.dictB.shape[1])

    def factors(self):
        return (np.tensordot(self.alpha, self.dictA, axes=1),
                np.tensordot(self.beta, self.dictB, axes=1))

    def materialize(self):
        P, Q = self.factors()
        return P @ Q.T

    def pullback(self, G):
        P, Q = self.factors()
        gP = G @ Q
        gQ = G.T @ P
        return {"alpha": np.tensordot(self.dictA, gP, axes=([1, 2], [0, 1])),
                "beta": np.tensordot(self.dictB, gQ, axes=([1, 2], [0, 1]))}


@dataclass(frozen=True, eq=False)
class DoRA(Adapter):
    """Magnitude/direction split of the adapted weight.

    Unlike the additive variants, ``materialize`` returns the full adapted
    matrix ``magnitude * (W0 + X Y^T) / colnorm(W0 + X Y^T)``.
    """

    W0: np.ndarray
    magnitude: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    name: ClassVar[str] = "dora"
    trainable: ClassVar[tuple[str, ...]] = ("magnitude", "X", "Y")

    def __post_init__(self):
        W0 = as_matrix(self.W0, "W0")
        X = as_matrix(self.X, "X")
        Y = as_matrix(self.Y, "Y")
        mag = np.asarray(self.magnitude, dtype=np.float64).reshape(-1)
        _check(W0.shape == (X.shape[0], Y.shape[0]) and X.shape[1] == Y.shape[1], "DoRA shape mismatch")
        _check(mag.size == W0.shape[1], "magnitude needs one entry per column")
        for k, v in (("W0", W0), ("magnitude", mag), ("X", X), ("Y", Y)):
            object.__setattr__(self, k, v)

    @property
    def output_shape(self):
        return self.W0.shape

    def _direction(self):
        V = self.W0 + self.X @ self.Y.T
        c = np.linalg.norm(V, axis=0)
        if np.any(c == 0.0):
            raise ConditioningError("DoRA: zero-norm column in W0 + X Y^T")
        return V, c

    def direction(self):
        V, c = self._direction()
        return V / c

    def materialize(self):
        V, c = self._direction()
        return V * (self.magnitude / c)

    def pullback(self, G):
        V, c = self._direction()
        D = V / c
        gmag = np.sum(G * D, axis=0)
        # d(v/|v|) = (I - u u^T) dv / |v|
        gV = (self.magnitude / c) * (G - D * np.sum(D * G, axis=0))
        return {"magnitude": gmag, "X": gV @ self.Y, "Y": gV.T @ self.X}


# --------------------------------------------------------------------------
# third-order (layer-stack) variants; outputs are (m, n, L)


@dataclass(frozen=True, eq=False)
class CP3(Adapter):
    """``sum_i s1_i o s2_i o s3_i``."""

    S1: np.ndarray
    S2: np.ndarray
    S3: np.ndarray
    name: ClassVar[str] = "cp3"
    trainable: ClassVar[tuple[str, ...]] = ("S1", "S2", "S3")

    def __post_init__(self):
        for k in self.trainable:
            object.__setattr__(self, k, as_matrix(getattr(self, k), k))
        _check(self.S1.shape[1] == self.S2.shape[1] == self.S3.shape[1], "CP ranks disagree")

    @property
    def output_shape(self):
        return (self.S1.shape[0], self.S2.shape[0], self.S3.shape[0])

    def materialize(self):
        return np.einsum("ir,jr,lr->ijl", self.S1, self.S2, self.S3)

    def pullback(self, G):
        return {"S1": np.einsum("ijl,jr,lr->ir", G, self.S2, self.S3),
                "S2": np.einsum("ijl,ir,lr->jr", G, self.S1, self.S3),
                "S3": np.einsum("ijl,ir,jr->lr", G, self.S1, self.S2)}


@dataclass(frozen=True, eq=False)
class Tucker2(Adapter):
    """Shared ``U1``, ``U2`` and one ``r x r`` core per layer: slice ``l`` is ``U1 G_l U2^T``."""

    cores: np.ndarray  # (L, r1, r2)
    U1: np.ndarray
    U2: np.ndarray
    name: ClassVar[str] = "tucker2"
    trainable: ClassVar[tuple[str, ...]] = ("cores", "U1", "U2")

    def __post_init__(self):
        cores = as_tensor3(self.cores, "cores")
        U1 = as_matrix(self.U1, "U1")
        U2 = as_matrix(self.U2, "U2")
        _check(cores.shape[1:] == (U1.shape[1], U2.shape[1]), "core slices must be r1 x r2")
        object.__setattr__(self, "cores", cores)
        object.__setattr__(self, "U1", U1)
        object.__setattr__(self, "U2", U2)

    @property
    def output_shape(self):
        return (self.U1.shape[0], self.U2.shape[0], self.cores.shape[0])

    def materialize(self):
        return np.einsum("ia,lab,jb->ijl", self.U1, self.cores, self.U2)

    def pullback(self, G):
        return {"cores": np.einsum("ijl,ia,jb->lab", G, self.U1, self.U2),
                "U1": np.einsum("ijl,lab,jb->ia", G, self.cores, self.U2),
                "U2": np.einsum("ijl,ia,lab->jb", G, self.U1, self.cores)}

    def param_count(self):
        m, n, L = self.output_shape
        return m * self.U1.shape[1] + n * self.U2.shape[1] + self.cores.size


@dataclass(frozen=True, eq=False)
class Tucker3(Adapter):
    """Dense core ``(r1, r2, r3)`` with one factor matrix per mode."""

    core: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    name: ClassVar[str] = "tucker3"
    trainable: ClassVar[tuple[str, ...]] = ("core", "U1", "U2", "U3")

    def __post_init__(self):
        core = as_tensor3(self.core, "core")
        Us = [as_matrix(getattr(self, k), k) for k in ("U1", "U2", "U3")]
        _check(core.shape == tuple(U.shape[1] for U in Us), "core dims must match factor ranks")
        object.__setattr__(self, "core", core)
        for k, U in zip(("U1", "U2", "U3"), Us):
            object.__setattr__(self, k, U)

    @property
    def output_shape(self):
        return (self.U1.shape[0], self.U2.shape[0], self.U3.shape[0])

    def materialize(self):
        return np.einsum("abc,ia,jb,lc->ijl", self.core, self.U1, self.U2, self.U3)

    def pullback(self, G):
        return {"core": np.einsum("ijl,ia,jb,lc->abc", G, self.U1, self.U2, self.U3),
                "U1": np.einsum("ijl,abc,jb,lc->ia", G, self.core, self.U2, self.U3),
                "U2": np.einsum("ijl,abc,ia,lc->jb", G, self.core, self.U1, self.U3),
                "U3": np.einsum("ijl,abc,ia,jb->lc", G, self.core, self.U1, self.U2)}


@dataclass(frozen=True, eq=False)
class TT3(Adapter):
    """Tensor train ``dW[i, j, l] = G1[i, :] G2[:, j, :] G3[:, l]``."""

    G1: np.ndarray  # (m, r1)
    G2: np.ndarray  # (r1, n, r2)
    G3: np.ndarray  # (r2, L)
    name: ClassVar[str] = "tt3"
    trainable: ClassVar[tuple[str, ...]] = ("G1", "G2", "G3")

    def __post_init__(self):
        G1 = as_matrix(self.G1, "G1")
        G2 = as_tensor3(self.G2, "G2")
        G3 = as_matrix(self.G3, "G3")
        _check(G1.shape[1] == G2.shape[0] and G2.shape[2] == G3.shape[0], "TT ranks disagree")
        object.__setattr__(self, "G1", G1)
        object.__setattr__(self, "G2", G2)
        object.__setattr__(self, "G3", G3)

    @property
    def output_shape(self):
        return (self.G1.shape[0], self.G2.shape[1], self.G3.shape[1])

    def materialize(self):
        return np.einsum("ia,ajb,bl->ijl", self.G1, self.G2, self.G3)

    def pullback(self, G):
        return {"G1": np.einsum("ijl,ajb,bl->ia", G, self.G2, self.G3),
                "G2": np.einsum("ijl,ia,bl->ajb", G, self.G1, self.G3),
                "G3": np.einsum("ijl,ia,ajb->bl", G, self.G1, self.G2)}


VARIANTS: dict[str, type[Adapter]] = {
    cls.name: cls
    for cls in (BM, SVDType, FedPara, HiRA, Kron, KronEnsemble, LowRankSparse, SparseHadamard,
                VeRA, NoLA, DoRA, CP3, Tucker2, Tucker3, TT3)
}
TENSOR_VARIANTS = frozenset({"cp3", "tucker2", "tucker3", "tt3"})


# --------------------------------------------------------------------------
# free functions


def materialize(spec: Adapter) -> np.ndarray:
    return spec.materialize()


def param_count(spec: Adapter) -> int:
    return spec.param_count()


def row_khatri_rao(A, B) -> np.ndarray:
    """Row-wise Khatri-Rao (face-splitting) product: row ``i`` is ``kron(a_i, b_i)``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    _check(A.shape[0] == B.shape[0], "row counts differ")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def materialize_fedpara_krp(spec: FedPara) -> np.ndarray:
    """FedPara through ``(X1 * X2)(Y1 * Y2)^T`` with ``*`` the row-wise Khatri-Rao product.

    Only ``m x r^2`` and ``n x r^2`` intermediates are formed.
    """
    return row_khatri_rao(spec.X1, spec.X2) @ row_khatri_rao(spec.Y1, spec.Y2).T


def construct_fedpara_rank_r(T, r: int) -> FedPara:
    """FedPara factors reproducing any matrix of rank at most ``r``.

    The second branch is the all-ones rank-1 matrix, so the Hadamard product
    collapses to the first branch, which is a truncated SVD of ``T``.
    """
    T = as_matrix(T, "T")
    m, n = T.shape
    if r < 1:
        raise RankError("r must be at least 1")
    if numerical_rank(T, 1e-10) > r:
        raise RankError(f"target has numerical rank {numerical_rank(T, 1e-10)} > r={r}")
    U, s, Vt = np.linalg.svd(T, full_matrices=False)
    k = min(r, s.size)
    root = np.sqrt(s[:k])
    X1 = np.zeros((m, r))
    Y1 = np.zeros((n, r))
    X1[:, :k] = U[:, :k] * root
    Y1[:, :k] = Vt[:k].T * root
    X2 = np.zeros((m, r))
    Y2 = np.zeros((n, r))
    X2[:, 0] = 1.0
    Y2[:, 0] = 1.0
    return FedPara(X1, Y1, X2, Y2)


def prune_by_sigma(spec: SVDType, threshold: float) -> SVDType:
    """Drop rank-one components whose ``|sigma_s|`` is below ``threshold``."""
    if not spec.sigma_diagonal:
        raise ValueError("pruning needs a diagonal Sigma")
    sig = np.diag(spec.Sigma)
    keep = np.abs(sig) >= threshold
    if not np.any(keep):
        raise EmptyAdapterError(f"threshold {threshold} prunes every component")
    return replace(spec, U=spec.U[:, keep], Sigma=np.diag(sig[keep]), V=spec.V[:, keep])


def orthogonality_penalty(U) -> float:
    """``||U^T U - I||_F^2``."""
    U = as_matrix(U, "U")
    D = U.T @ U - np.eye(U.shape[1])
    return float(np.sum(D * D))


# --------------------------------------------------------------------------
# random construction (tests, harness)


def random_mask(rng: RandomSource, size: int, s: int) -> np.ndarray:
    return np.sort(rng.generator.choice(size, size=s, replace=False)).astype(np.int64)


def random_adapter(variant: str, dims: dict, rng: RandomSource, scale: float = 1.0) -> Adapter:
    """Draw an adapter with Gaussian trainables (std ``scale``) and seeded frozen parts.

    ``dims`` keys used per variant: ``m, n, r`` (matrix variants), ``L`` (tensor
    variants), ``r1, r2, r3`` (Tucker-3 / TT), ``d1..d4`` (Kronecker), ``K``
    (ensembles / dictionaries), ``s`` (sparse support size).  Frozen fields
    come from the ``frozen`` child stream so they do not depend on ``scale``.
    """
    if variant not in VARIANTS:
        raise KeyError(f"unknown adapter variant {variant!r}")
    t = rng.child("trainable")
    f = rng.child("frozen")
    g = lambda *shape: t.normal(shape, scale)  # noqa: E731
    m, n, r = dims.get("m"), dims.get("n"), dims.get("r")
    L = dims.get("L", 1)
    K = dims.get("K", 2)

    if variant == "bm":
        return BM(g(m, r), g(n, r))
    if variant == "svd":
        return SVDType(f.orthonormal(m, r), g(r, r), f.child("v").orthonormal(n, r),
                       sigma_diagonal=dims.get("sigma_diagonal", False),
                       ortho_mode=dims.get("ortho_mode", "strict"))
    if variant == "fedpara":
        return FedPara(g(m, r), g(n, r), g(m, r), g(n, r))
    if variant == "hira":
        return HiRA(f.normal((m, n)), g(m, r), g(n, r))
    if variant == "kron":
        return Kron(g(dims["d1"], dims["d2"]), g(dims["d3"], dims["d4"]))
    if variant == "kron_ensemble":
        return KronEnsemble(g(K), g(K, dims["d1"], dims["d2"]), g(K, dims["d3"], dims["d4"]))
    if variant == "lowrank_sparse":
        s = dims.get("s", max(1, (m * n) // 10))
        return LowRankSparse(g(m, r), g(n, r), random_mask(f, m * n, s), g(s))
    if variant == "sparse_hadamard":
        s = dims.get("s", max(1, (m * n) // 10))
        return SparseHadamard(f.normal((m, n)), random_mask(f.child("mask"), m * n, s), g(s))
    if variant == "vera":
        return VeRA(g(m), g(r), f.normal((m, r)), f.child("b").normal((n, r)))
    if variant == "nola":
        return NoLA(g(K), g(K), f.normal((K, m, r)), f.child("b").normal((K, n, r)))
    if variant == "dora":
        W0 = f.normal((m, n))
        return DoRA(W0, np.linalg.norm(W0, axis=0) * (1.0 + g(n)), g(m, r), g(n, r))
    if variant == "cp3":
        return CP3(g(m, r), g(n, r), g(L, r))
    if variant == "tucker2":
        return Tucker2(g(L, r, r), g(m, r), g(n, r))
    r1, r2, r3 = dims.get("r1", r), dims.get("r2", r), dims.get("r3", r)
    if variant == "tucker3":
        return Tucker3(g(r1, r2, r3), g(m, r1), g(n, r2), g(L, r3))
    return TT3(g(m, r1), g(r1, n, r2), g(r2, L))
