import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lorakit.adapters import (BM, CP3, TT3, VARIANTS, DoRA, FedPara, HiRA, Kron, KronEnsemble, LowRankSparse,
                              NoLA, SparseHadamard, SVDType, Tucker2, Tucker3, VeRA, construct_fedpara_rank_r,
                              materialize_fedpara_krp, orthogonality_penalty, param_count, prune_by_sigma,
                              random_adapter, row_khatri_rao)
from lorakit.core import RandomSource, numerical_rank
from lorakit.errors import EmptyAdapterError, RankError, ShapeError

seeds = st.integers(0, 2**32 - 1)
DIMS = {"m": 6, "n": 4, "r": 2, "L": 3, "K": 2, "s": 5, "d1": 3, "d2": 2, "d3": 2, "d4": 2, "r1": 2, "r2": 3, "r3": 2}


def test_bm_example():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    Y = np.array([[2.0, 0.0], [0.0, 3.0]])
    assert np.array_equal(BM(X, Y).materialize(), [[2, 0], [0, 3], [2, 3]])


def test_bm_rank_mismatch():
    with pytest.raises(ShapeError):
        BM(np.ones((3, 2)), np.ones((4, 3)))


def test_param_counts():
    z = np.zeros
    assert param_count(BM(z((64, 8)), z((32, 8)))) == 768
    assert param_count(FedPara(z((64, 8)), z((32, 8)), z((64, 8)), z((32, 8)))) == 1536
    assert param_count(TT3(z((64, 4)), z((4, 64, 4)), z((4, 12)))) == 1328
    assert param_count(SVDType(np.eye(5, 2), np.eye(2), np.eye(4, 2))) == 18 + 4
    assert param_count(SVDType(np.eye(5, 2), np.eye(2), np.eye(4, 2), sigma_diagonal=True)) == 18 + 2
    assert param_count(Kron(z((3, 2)), z((2, 2)))) == 10
    # frozen dictionaries are not trainable
    assert param_count(NoLA(z(3), z(3), z((3, 5, 2)), z((3, 4, 2)))) == 6
    assert param_count(VeRA(z(5), z(2), z((5, 2)), z((4, 2)))) == 7


def loop_materialize(ad):
    """Entry-by-entry oracle for every variant."""
    shape = ad.output_shape
    out = np.zeros(shape)
    if isinstance(ad, BM):
        for i, j in np.ndindex(shape):
            out[i, j] = sum(ad.X[i, k] * ad.Y[j, k] for k in range(ad.X.shape[1]))
    elif isinstance(ad, SVDType):
        r = ad.rank
        for i, j in np.ndindex(shape):
            out[i, j] = sum(ad.U[i, a] * ad.Sigma[a, b] * ad.V[j, b] for a in range(r) for b in range(r))
    elif isinstance(ad, FedPara):
        r = ad.X1.shape[1]
        for i, j in np.ndindex(shape):
            out[i, j] = (sum(ad.X1[i, k] * ad.Y1[j, k] for k in range(r))
                         * sum(ad.X2[i, k] * ad.Y2[j, k] for k in range(r)))
    elif isinstance(ad, HiRA):
        for i, j in np.ndindex(shape):
            out[i, j] = ad.W0[i, j] * sum(ad.X[i, k] * ad.Y[j, k] for k in range(ad.X.shape[1]))
    elif isinstance(ad, Kron):
        d3, d4 = ad.B.shape
        for i, j in np.ndindex(shape):
            out[i, j] = ad.A[i // d3, j // d4] * ad.B[i % d3, j % d4]
    elif isinstance(ad, KronEnsemble):
        _, d3, d4 = ad.B.shape
        for i, j in np.ndindex(shape):
            out[i, j] = sum(a * Ak[i // d3, j // d4] * Bk[i % d3, j % d4] for a, Ak, Bk in zip(ad.alpha, ad.A, ad.B))
    elif isinstance(ad, LowRankSparse):
        m, n = shape
        for i, j in np.ndindex(shape):
            out[i, j] = sum(ad.X[i, k] * ad.Y[j, k] for k in range(ad.X.shape[1]))
        for idx, v in zip(ad.mask, ad.values):
            out[idx // n, idx % n] += v
    elif isinstance(ad, SparseHadamard):
        n = shape[1]
        for idx, v in zip(ad.mask, ad.values):
            out[idx // n, idx % n] = ad.W0[idx // n, idx % n] * v
    elif isinstance(ad, VeRA):
        for i, j in np.ndindex(shape):
            out[i, j] = ad.a[i] * sum(ad.A_shared[i, k] * ad.b[k] * ad.B_shared[j, k] for k in range(ad.b.size))
    elif isinstance(ad, NoLA):
        K, _, r = ad.dictA.shape
        for i, j in np.ndindex(shape):
            out[i, j] = sum(ad.alpha[p] * ad.dictA[p, i, k] * ad.beta[q] * ad.dictB[q, j, k]
                            for p in range(K) for q in range(K) for k in range(r))
    elif isinstance(ad, DoRA):
        V = ad.W0 + ad.X @ ad.Y.T
        for j in range(shape[1]):
            out[:, j] = ad.magnitude[j] * V[:, j] / np.sqrt(sum(V[i, j] ** 2 for i in range(shape[0])))
    elif isinstance(ad, CP3):
        for i, j, l in np.ndindex(shape):
            out[i, j, l] = sum(ad.S1[i, k] * ad.S2[j, k] * ad.S3[l, k] for k in range(ad.S1.shape[1]))
    elif isinstance(ad, Tucker2):
        _, r1, r2 = ad.cores.shape
        for i, j, l in np.ndindex(shape):
            out[i, j, l] = sum(ad.U1[i, a] * ad.cores[l, a, b] * ad.U2[j, b] for a in range(r1) for b in range(r2))
    elif isinstance(ad, Tucker3):
        for i, j, l in np.ndindex(shape):
            out[i, j, l] = sum(ad.core[a, b, c] * ad.U1[i, a] * ad.U2[j, b] * ad.U3[l, c]
                               for a, b, c in np.ndindex(ad.core.shape))
    elif isinstance(ad, TT3):
        for i, j, l in np.ndindex(shape):
            out[i, j, l] = sum(ad.G1[i, a] * ad.G2[a, j, b] * ad.G3[b, l]
                               for a in range(ad.G2.shape[0]) for b in range(ad.G2.shape[2]))
    else:
        raise AssertionError(type(ad))
    return out


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_materialize_matches_loop_oracle(variant):
    for t in range(3):
        ad = random_adapter(variant, DIMS, RandomSource(t, variant))
        assert ad.materialize().shape == ad.output_shape
        assert np.abs(ad.materialize() - loop_materialize(ad)).max() <= 1e-12


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_with_params_roundtrip(variant):
    ad = random_adapter(variant, DIMS, RandomSource(0, variant))
    p = ad.params()
    assert set(p) == set(type(ad).trainable)
    assert param_count(ad) == sum(v.size for v in p.values())
    same = ad.with_params(**p)
    assert np.array_equal(same.materialize(), ad.materialize())


@given(seeds, st.integers(1, 4))
def test_krp_route_matches_hadamard(seed, r):
    ad = random_adapter("fedpara", {"m": 7, "n": 5, "r": r}, RandomSource(seed))
    assert np.abs(materialize_fedpara_krp(ad) - ad.materialize()).max() <= 1e-12


def test_row_khatri_rao_example():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[1.0, 10.0], [0.0, 1.0]])
    assert np.array_equal(row_khatri_rao(A, B), [[1, 10, 2, 20], [0, 3, 0, 4]])


@given(seeds, st.integers(1, 3))
def test_fedpara_rank_at_most_r_squared(seed, r):
    ad = random_adapter("fedpara", {"m": 12, "n": 11, "r": r}, RandomSource(seed))
    assert numerical_rank(ad.materialize(), 1e-8) <= r * r


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_kron_rank_multiplies(seed, ra, rb):
    g = RandomSource(seed)
    A = g.child("a").normal((3, ra)) @ g.child("b").normal((ra, 4))
    B = g.child("c").normal((4, rb)) @ g.child("d").normal((rb, 3))
    assert numerical_rank(Kron(A, B).materialize(), 1e-8) == numerical_rank(A, 1e-8) * numerical_rank(B, 1e-8)


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_hira_rank_bound(seed, rw, r):
    g = RandomSource(seed)
    W0 = g.child("a").normal((10, rw)) @ g.child("b").normal((rw, 9))
    ad = HiRA(W0, g.child("x").normal((10, r)), g.child("y").normal((9, r)))
    assert numerical_rank(ad.materialize(), 1e-8) <= min(rw * r, 9)


def test_hira_identity_base_is_diagonal(rng):
    M = HiRA(np.eye(4), rng.child("x").normal((4, 2)), rng.child("y").normal((4, 2))).materialize()
    assert np.all(M[~np.eye(4, dtype=bool)] == 0)


@given(seeds, st.integers(1, 3), st.integers(1, 8))
def test_lowrank_sparse_rank_bound(seed, r, s):
    ad = random_adapter("lowrank_sparse", {"m": 9, "n": 8, "r": r, "s": s}, RandomSource(seed))
    assert numerical_rank(ad.materialize(), 1e-8) <= r + numerical_rank(ad.sparse_part(), 1e-8)


@given(seeds, st.integers(1, 4))
def test_construct_fedpara_reproduces_target(seed, r):
    g = RandomSource(seed)
    T = g.child("a").normal((9, r)) @ g.child("b").normal((r, 7))
    assert np.abs(construct_fedpara_rank_r(T, r).materialize() - T).max() <= 1e-10 * max(1, np.abs(T).max())


def test_construct_fedpara_rejects_high_rank(rng):
    with pytest.raises(RankError):
        construct_fedpara_rank_r(rng.normal((6, 6)), 2)


def test_prune_by_sigma(rng):
    U = rng.child("u").orthonormal(6, 3)
    V = rng.child("v").orthonormal(5, 3)
    ad = SVDType(U, np.diag([3.0, 1e-4, 2.0]), V, sigma_diagonal=True)
    pr = prune_by_sigma(ad, 1e-2)
    assert pr.rank == 2 and np.array_equal(np.diag(pr.Sigma), [3.0, 2.0])
    with pytest.raises(EmptyAdapterError):
        prune_by_sigma(ad, 10.0)
    with pytest.raises(ValueError):
        prune_by_sigma(SVDType(U, np.eye(3), V), 0.1)


def test_orthogonality_penalty(rng):
    assert orthogonality_penalty(rng.orthonormal(7, 3)) <= 1e-28
    assert orthogonality_penalty(2 * np.eye(3, 2)) == pytest.approx(18.0)


def test_vera_superposition(rng):
    ad = random_adapter("vera", {"m": 5, "n": 4, "r": 3}, rng)
    b2 = rng.child("b2").normal((3,))
    lhs = ad.with_params(b=ad.b + b2).materialize()
    rhs = ad.materialize() + ad.with_params(b=b2).materialize()
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_nola_linear_in_alpha(rng):
    ad = random_adapter("nola", {"m": 5, "n": 4, "r": 2, "K": 3}, rng)
    a2 = rng.child("a2").normal((3,))
    lhs = ad.with_params(alpha=ad.alpha + a2).materialize()
    rhs = ad.materialize() + ad.with_params(alpha=a2).materialize()
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_dora_columns(rng):
    ad = random_adapter("dora", {"m": 6, "n": 4, "r": 2}, rng)
    assert np.allclose(np.linalg.norm(ad.direction(), axis=0), 1.0, atol=1e-14)
    assert np.allclose(np.linalg.norm(ad.materialize(), axis=0), np.abs(ad.magnitude), atol=1e-12)


def test_tensor_outputs_are_third_order():
    for v in ("cp3", "tucker2", "tucker3", "tt3"):
        assert random_adapter(v, DIMS, RandomSource(0)).output_shape == (6, 4, 3)


def test_unknown_variant():
    with pytest.raises(KeyError):
        random_adapter("nope", DIMS, RandomSource(0))


def test_small_examples():
    assert np.array_equal(BM([[1.0], [2.0]], [[3.0], [4.0]]).materialize(), [[3, 4], [6, 8]])
    ones = np.ones
    fp = FedPara(ones((3, 2)), ones((3, 2)), ones((3, 2)), ones((3, 2)))
    assert np.array_equal(materialize_fedpara_krp(fp), 4 * ones((3, 3)))
    u1, u2, u3 = np.eye(3)[:, :1], np.eye(4)[:, 1:2], np.eye(2)[:, 1:]
    t = Tucker3(np.full((1, 1, 1), 2.5), u1, u2, u3).materialize()
    want = np.zeros((3, 4, 2))
    want[0, 1, 1] = 2.5
    assert np.array_equal(t, want)


def test_prune_examples(rng):
    U, V = rng.child("u").orthonormal(6, 3), rng.child("v").orthonormal(5, 3)
    ad = SVDType(U[:, :2], np.diag([5.0, 0.1]), V[:, :2], sigma_diagonal=True)
    pr = prune_by_sigma(ad, 1.0)
    assert pr.rank == 1 and pr.Sigma[0, 0] == 5.0
    assert prune_by_sigma(ad, 0.0).rank == 2
    ad3 = SVDType(U, np.diag([3.0, 2.0, 1.0]), V, sigma_diagonal=True)
    gap = np.linalg.norm(ad3.materialize() - prune_by_sigma(ad3, 1.5).materialize())
    assert gap == pytest.approx(1.0, abs=1e-12)


def test_construct_fedpara_small_targets(rng):
    z = construct_fedpara_rank_r(np.zeros((4, 3)), 2)
    assert np.all(z.X1 == 0) and np.all(z.materialize() == 0)
    u, v = rng.child("u").normal((6, 1)), rng.child("v").normal((5, 1))
    assert np.abs(construct_fedpara_rank_r(u @ v.T, 1).materialize() - u @ v.T).max() <= 1e-12


def test_orthogonality_penalty_oracle(rng):
    U = rng.normal((16, 4))
    direct = sum((sum(U[k, i] * U[k, j] for k in range(16)) - (i == j)) ** 2 for i in range(4) for j in range(4))
    assert orthogonality_penalty(U) == pytest.approx(direct, rel=1e-12)


def test_hadamard_of_rank_two_factors():
    g = RandomSource(3)
    A = g.child("a").normal((8, 2)) @ g.child("b").normal((2, 4))
    B = g.child("c").normal((8, 2)) @ g.child("d").normal((2, 4))
    assert numerical_rank(A * B, 1e-8) <= 4


def test_kron_shapes_and_invalid_masks(rng):
    assert Kron(np.ones((3, 2)), np.ones((4, 5))).output_shape == (12, 10)
    with pytest.raises(ShapeError):
        LowRankSparse(np.ones((3, 1)), np.ones((2, 1)), np.array([2, 1]), np.ones(2))
    with pytest.raises(ShapeError):
        SparseHadamard(np.ones((2, 2)), np.array([0, 4]), np.ones(2))
