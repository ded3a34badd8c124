"""Self-check suite behind ``lorakit verify``.

Each check group returns a list of ``(label, ok, detail)`` items; the report
pairs every group with the construct it exercises.  ``mutation`` swaps in a
deliberately broken component so the suite can be shown to catch it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..adapters import (BM, VARIANTS, FedPara, HiRA, Kron, LowRankSparse, construct_fedpara_rank_r,
                        materialize_fedpara_krp, param_count, random_adapter, TT3)
from ..core import RandomSource, geometric_mean_S, numerical_rank, sym_psd_sqrt
from ..initializers import UniformQuantizer, loftq_alternating
from ..optimizers import (GD, RefLoRA, ScaledGD, polar_retract, reflora_metric, scaledgd_direction,
                          tangent_project, update)
from ..problems import FactorizationProblem, SensingProblem, fd_grad_oracle, gaussian_operators, grad_factors
from ..serving import OpCounter, fastlora_forward, flops_model, naive_forward, random_batch

MUTATIONS = ("scaledgd-drop-gram-inverse",)


@dataclass
class CheckResult:
    group: str
    anchor: str
    items: list

    @property
    def ok(self):
        return all(ok for _, ok, _ in self.items)


def _close(a, b, tol):
    return abs(a - b) <= tol


def scalar_problem(target=1.0):
    return FactorizationProblem(np.array([[target]]))


def scalar_step(x, y, opt):
    ad = update(BM(np.array([[x]]), np.array([[y]])), scalar_problem(), opt)
    return float(ad.X[0, 0]), float(ad.Y[0, 0])


def fd_hessian(x, y, h=1e-5):
    """Central differences of the analytic gradient of ``1/2 (xy - 1)^2``."""
    p = scalar_problem()

    def g(u, v):
        gr = grad_factors(p, BM(np.array([[u]]), np.array([[v]])))
        return np.array([gr["X"][0, 0], gr["Y"][0, 0]])

    H = np.column_stack([(g(x + h, y) - g(x - h, y)) / (2 * h), (g(x, y + h) - g(x, y - h)) / (2 * h)])
    return 0.5 * (H + H.T)


def random_gauge(r, rng: RandomSource, cond_max=10.0):
    """Invertible ``r x r`` matrix with condition number at most ``cond_max``."""
    U = rng.child("U").orthonormal(r, r)
    V = rng.child("V").orthonormal(r, r)
    s = np.exp(rng.child("s").uniform(r, 0.0, math.log(cond_max)))
    s[0], s[-1] = 1.0, float(np.exp(np.log(cond_max) * 0.999)) if r > 1 else 1.0
    return (U * s) @ V.T


def _mutated_scaledgd(X, Y, gX, gY, floor):
    return gX, gY  # preconditioner removed: plain GD direction


def one_step_product(X, Y, A, opt, mutation=None):
    p = FactorizationProblem(A)
    if mutation == "scaledgd-drop-gram-inverse" and isinstance(opt, ScaledGD):
        ad = BM(X, Y)
        g = grad_factors(p, ad)
        dX, dY = _mutated_scaledgd(X, Y, g["X"], g["Y"], opt.gram_floor)
        return (X - opt.eta * dX) @ (Y - opt.eta * dY).T
    return update(BM(X, Y), p, opt).materialize()


def gauge_discrepancy(X, Y, Q, A, opt, mutation=None):
    P1 = one_step_product(X, Y, A, opt, mutation)
    P2 = one_step_product(X @ Q, np.linalg.solve(Q, Y.T).T, A, opt, mutation)
    return float(np.linalg.norm(P1 - P2) / max(1.0, np.linalg.norm(P1)))


def scaledgd_pairing(X, Y, xi, phi):
    """``<xi_X, phi_X Y^T Y> + <xi_Y, phi_Y X^T X>``."""
    return float(np.sum(xi[0] * (phi[0] @ (Y.T @ Y))) + np.sum(xi[1] * (phi[1] @ (X.T @ X))))


def reflora_pairing(S, xi, phi):
    """``<xi_X S, phi_X> + <xi_Y S^{-1}, phi_Y>``."""
    return float(np.sum((xi[0] @ S) * phi[0]) + np.sum(np.linalg.solve(S.T, xi[1].T).T * phi[1]))


# --------------------------------------------------------------------------
# check groups


def check_example_landscape():
    items = []
    p = scalar_problem()
    ad = BM(np.array([[2.0]]), np.array([[2.0]]))
    items.append(("loss at (2,2) = 4.5", _close(p.loss_at(ad.materialize()), 4.5, 1e-12), ""))
    g = grad_factors(p, ad)
    items.append(("gradient at (2,2) = (6,6)", _close(g["X"][0, 0], 6, 1e-12) and _close(g["Y"][0, 0], 6, 1e-12), ""))
    for x, y in ((2.0, 2.0), (1.0, 4.0), (0.5, 1.0), (0.125, 4.0)):
        H = fd_hessian(x, y)
        ref = np.array([[y * y, 2 * x * y - 1], [2 * x * y - 1, x * x]])
        err = float(np.abs(H - ref).max())
        items.append((f"Hessian at ({x},{y}) matches [[y^2, 2xy-1], [2xy-1, x^2]]", err <= 1e-6, f"max err {err:.1e}"))
    lam = [float(np.linalg.eigvalsh(fd_hessian(x, y))[-1]) for x, y in ((2, 2), (1, 4))]
    items.append(("lambda_max differs across the gauge orbit", abs(lam[0] - lam[1]) > 1.0,
                  f"{lam[0]:.4f} vs {lam[1]:.4f}"))
    return items


def check_gd_one_step():
    items = []
    for eta in (0.01, 0.05, 0.1):
        a = scalar_step(2, 2, GD(eta))
        b = scalar_step(1, 4, GD(eta))
        ok = max(abs(a[0] - (2 - 6 * eta)), abs(a[1] - (2 - 6 * eta)), abs(b[0] - (1 - 12 * eta)),
                 abs(b[1] - (4 - 3 * eta))) <= 1e-12
        items.append((f"eta={eta}: (2,2)->(2-6eta,2-6eta), (1,4)->(1-12eta,4-3eta)", ok, f"{a} {b}"))
    return items


def check_orbit_closed_forms():
    items = []
    for eta in (0.05, 0.1, 0.2, 1 / 3):
        x, y = scalar_step(4, 1, ScaledGD(eta, 0.0))
        want = 4 - 6 * eta + 2.25 * eta**2
        items.append((f"ScaledGD product at eta={eta:.4g}", _close(x * y, want, 1e-12), f"{x * y!r} vs {want!r}"))
        for x0, y0 in ((2.0, 2.0), (4.0, 1.0), (1.0, 4.0)):
            x, y = scalar_step(x0, y0, RefLoRA(eta))
            want = (2 - 6 * eta) ** 2
            items.append((f"RefLoRA product from ({x0},{y0}) at eta={eta:.4g}", _close(x * y, want, 1e-12),
                          f"{x * y!r} vs {want!r}"))
    x, y = scalar_step(4, 1, ScaledGD(1 / 3, 0.0))
    items.append(("ScaledGD loss at eta=1/3 is 0.78125", _close(0.5 * (x * y - 1) ** 2, 0.78125, 1e-12), ""))
    x, y = scalar_step(2, 2, RefLoRA(1 / 3))
    items.append(("RefLoRA loss at eta=1/3 is 0.5", _close(0.5 * (x * y - 1) ** 2, 0.5, 1e-12), ""))
    return items


def check_gauge_equivariance(trials=30, mutation=None, seed=11):
    rng = RandomSource(seed, "verify/gauge")
    worst = {"scaledgd": 0.0, "reflora": 0.0}
    for t in range(trials):
        tr = rng.child(str(t))
        r = 1 + t % 8
        m, n = r + 4, r + 3
        X, Y = tr.child("X").normal((m, r)), tr.child("Y").normal((n, r))
        A = tr.child("A").normal((m, n))
        Q = random_gauge(r, tr.child("Q"))
        worst["scaledgd"] = max(worst["scaledgd"], gauge_discrepancy(X, Y, Q, A, ScaledGD(0.25, 0.0), mutation))
        worst["reflora"] = max(worst["reflora"], gauge_discrepancy(X, Y, Q, A, RefLoRA(0.05), mutation))
    items = [(f"{k} one-step product gauge-equivariant", v <= 1e-9, f"worst rel err {v:.1e}") for k, v in worst.items()]
    a = scalar_step(2, 2, GD(0.1))
    b = scalar_step(1, 4, GD(0.1))
    gap = abs(a[0] * a[1] - b[0] * b[1])
    items.append(("plain GD is not gauge-equivariant on the scalar orbit", gap >= 1e-3, f"gap {gap:.3f}"))
    return items


def check_gauge_geometry(trials=30, seed=12):
    rng = RandomSource(seed, "verify/geometry")
    hz = bal = inv = gm = 0.0
    for t in range(trials):
        tr = rng.child(str(t))
        r = 1 + t % 8
        m, n = r + 5, r + 2
        X, Y = tr.child("X").normal((m, r)), tr.child("Y").normal((n, r))
        A = tr.child("A").normal((m, n))
        p = FactorizationProblem(A)
        g = grad_factors(p, BM(X, Y))
        S = reflora_metric(X, Y)
        eta = 0.05
        step = (-eta * np.linalg.solve(S, g["X"].T).T, -eta * g["Y"] @ S)
        Uv = tr.child("U").normal((r, r))
        vert = (X @ Uv, -Y @ Uv.T)
        hz = max(hz, abs(reflora_pairing(S, step, vert)) / max(1.0, np.linalg.norm(step[0]) * np.linalg.norm(vert[0])))
        # balanced pair: GD on (X S^1/2, Y S^-1/2)
        Sh = sym_psd_sqrt(S)
        Xb, Yb = X @ Sh, np.linalg.solve(Sh, Y.T).T
        Pb = update(BM(Xb, Yb), p, GD(eta)).materialize()
        Pr = update(BM(X, Y), p, RefLoRA(eta)).materialize()
        bal = max(bal, float(np.linalg.norm(Pb - Pr) / max(1.0, np.linalg.norm(Pr))))
        # ScaledGD metric under the gauge action
        Q = random_gauge(r, tr.child("Q"))
        Qit = np.linalg.inv(Q).T
        xi = (tr.child("a").normal((m, r)), tr.child("b").normal((n, r)))
        phi = (tr.child("c").normal((m, r)), tr.child("d").normal((n, r)))
        v0 = scaledgd_pairing(X, Y, xi, phi)
        v1 = scaledgd_pairing(X @ Q, Y @ Qit, (xi[0] @ Q, xi[1] @ Qit), (phi[0] @ Q, phi[1] @ Qit))
        inv = max(inv, abs(v0 - v1) / max(1.0, abs(v0)))
        # geometric mean transforms as Q^-1 S Q^-T
        S2 = geometric_mean_S((X @ Q).T @ (X @ Q), (Y @ Qit).T @ (Y @ Qit))
        Qi = np.linalg.inv(Q)
        gm = max(gm, float(np.linalg.norm(S2 - Qi @ S @ Qi.T) / np.linalg.norm(S2)))
    return [("RefLoRA step is horizontal", hz <= 1e-9, f"{hz:.1e}"),
            ("RefLoRA = GD on the balanced pair", bal <= 1e-9, f"{bal:.1e}"),
            ("ScaledGD metric is gauge-invariant", inv <= 1e-9, f"{inv:.1e}"),
            ("geometric mean transforms as Q^-1 S Q^-T", gm <= 1e-8, f"{gm:.1e}")]


def check_khatri_rao(trials=20, seed=13):
    rng = RandomSource(seed, "verify/krp")
    worst = 0.0
    for t in range(trials):
        tr = rng.child(str(t))
        spec = random_adapter("fedpara", {"m": 8, "n": 6, "r": 1 + t % 4}, tr)
        worst = max(worst, float(np.abs(materialize_fedpara_krp(spec) - spec.materialize()).max()))
    return [("row-wise Khatri-Rao route equals the Hadamard route", worst <= 1e-12, f"{worst:.1e}")]


def bernoulli_full_rank_rate(trials=100, n=100, seed=14) -> float:
    rng = RandomSource(seed, "verify/bernoulli")
    p = 4 * math.log(n) / n
    hits = 0
    for t in range(trials):
        M = (rng.child(str(t)).uniform((n, n)) < p) * rng.child(f"v{t}").normal((n, n))
        hits += numerical_rank(M, 1e-8) == n
    return hits / trials


def check_rank_laws(trials=50, seed=15):
    rng = RandomSource(seed, "verify/rank")
    bad = {"fedpara": 0, "kron": 0, "hira": 0, "lowrank_sparse": 0}
    for t in range(trials):
        tr = rng.child(str(t))
        r = 1 + t % 3
        fp = random_adapter("fedpara", {"m": 12, "n": 10, "r": r}, tr.child("fp"))
        bad["fedpara"] += numerical_rank(fp.materialize()) > r * r
        ra, rb = 1 + t % 2, 1 + t % 3
        A = tr.child("A1").normal((3, ra)) @ tr.child("A2").normal((ra, 3))
        B = tr.child("B1").normal((4, rb)) @ tr.child("B2").normal((rb, 3))
        kr = Kron(A, B)
        bad["kron"] += numerical_rank(kr.materialize()) != numerical_rank(A) * numerical_rank(B)
        rw = 1 + t % 3
        W0 = tr.child("W1").normal((12, rw)) @ tr.child("W2").normal((rw, 10))
        hi = HiRA(W0, tr.child("X").normal((12, r)), tr.child("Y").normal((10, r)))
        bad["hira"] += numerical_rank(hi.materialize()) > min(rw * r, 12, 10)
        ls = random_adapter("lowrank_sparse", {"m": 12, "n": 10, "r": r, "s": 3 + t % 5}, tr.child("ls"))
        sp = numerical_rank(ls.sparse_part()) if np.any(ls.values) else 0
        bad["lowrank_sparse"] += numerical_rank(ls.materialize()) > min(r + sp, 12, 10)
    items = [(f"{k} rank law holds in {trials} trials", v == 0, f"{v} violations") for k, v in bad.items()]
    hira_diag = HiRA(np.eye(3), rng.child("hx").normal((3, 2)), rng.child("hy").normal((3, 2))).materialize()
    items.append(("HiRA with W0 = I is diagonal", np.all(hira_diag[~np.eye(3, dtype=bool)] == 0), ""))
    worst = 0.0
    for t in range(20):
        T = rng.child(f"T{t}").normal((10, 3)) @ rng.child(f"T{t}b").normal((3, 7))
        worst = max(worst, float(np.abs(construct_fedpara_rank_r(T, 3).materialize() - T).max()))
    items.append(("FedPara reaches any rank-r target", worst <= 1e-8, f"{worst:.1e}"))
    rate = bernoulli_full_rank_rate()
    items.append(("Bernoulli(4 log n / n) support is full rank w.h.p.", rate >= 0.95, f"rate {rate:.2f}"))
    return items


def check_param_counts():
    z = np.zeros
    return [
        ("BM m=64 n=32 r=8 -> 768", param_count(BM(z((64, 8)), z((32, 8)))) == 768, ""),
        ("FedPara m=64 n=32 r=8 -> 1536", param_count(FedPara(z((64, 8)), z((32, 8)), z((64, 8)), z((32, 8)))) == 1536, ""),
        ("TT3 m=n=64 L=12 r=4 -> 1328", param_count(TT3(z((64, 4)), z((4, 64, 4)), z((4, 12)))) == 1328, ""),
    ]


def check_fastlora(seed=16):
    rng = RandomSource(seed, "verify/serve")
    items = []
    for K in (1, 2, 8, 64):
        b = random_batch(K, 16, 12, 3, rng.child(f"b{K}"))
        W = rng.child(f"W{K}").normal((16, 12))
        cf, cn = OpCounter(), OpCounter()
        err = float(np.abs(fastlora_forward(W, b, cf) - naive_forward(W, b, cn)).max())
        items.append((f"K={K}: batched path equals per-user loop", err <= 1e-10, f"{err:.1e}"))
        items.append((f"K={K}: op counters match the flop model",
                      cf.flops == flops_model("fastlora", K, 16, 12, 3) and cn.flops == flops_model("naive", K, 16, 12, 3),
                      f"{cf.flops}, {cn.flops}"))
    return items


def check_loftq(trials=10, seed=17):
    rng = RandomSource(seed, "verify/loftq")
    worst_refit = 0.0
    improved = 0
    for t in range(trials):
        W = rng.child(str(t)).normal((32, 32))
        q = UniformQuantizer(4)

        def cb(_, Q, X, Y, tail):
            nonlocal worst_refit
            R = W - Q - X @ Y.T
            worst_refit = max(worst_refit, abs(float(np.sum(R * R)) - tail) / max(tail, 1e-300))

        Q, X, Y = loftq_alternating(W, 4, q, 5, cb)
        improved += np.linalg.norm(W - Q - X @ Y.T) <= np.linalg.norm(W - q(W))
    return [("refit residual equals the tail singular-value mass", worst_refit <= 1e-10, f"{worst_refit:.1e}"),
            ("4-bit residual beats plain quantization", improved == trials, f"{improved}/{trials}")]


FD_DIMS = {"m": 6, "n": 4, "r": 2, "L": 3, "K": 2, "s": 5, "d1": 3, "d2": 2, "d3": 2, "d4": 2, "r1": 2, "r2": 3, "r3": 2}


def fd_problems(rng: RandomSource, shape):
    fac = FactorizationProblem(rng.child("A").normal(shape))
    ops = gaussian_operators(7, shape, rng.child("ops"))
    sen = SensingProblem(ops, rng.child("y").normal((7,)))
    return {"factorization": fac, "sensing": sen}


def fd_relative_error(problem, spec, h=1e-6) -> float:
    g = grad_factors(problem, spec)
    f = fd_grad_oracle(problem, spec, h)
    num = math.sqrt(sum(float(np.sum((g[k] - f[k]) ** 2)) for k in g))
    den = math.sqrt(sum(float(np.sum(f[k] ** 2)) for k in f))
    return num / max(den, 1e-12)


def check_fd_gradients(points=2, seed=18):
    rng = RandomSource(seed, "verify/fd")
    items = []
    for variant in VARIANTS:
        worst = 0.0
        for t in range(points):
            tr = rng.child(f"{variant}/{t}")
            spec = random_adapter(variant, FD_DIMS, tr.child("spec"), scale=0.7)
            for prob in fd_problems(tr.child("prob"), spec.output_shape).values():
                worst = max(worst, fd_relative_error(prob, spec))
        items.append((f"{variant}: analytic = finite differences", worst <= 1e-5, f"rel err {worst:.1e}"))
    return items


def check_stiefel(trials=10, seed=19):
    rng = RandomSource(seed, "verify/stiefel")
    feas = polar = 0.0
    for t in range(trials):
        tr = rng.child(str(t))
        U = tr.child("U").orthonormal(9, 3)
        E = tangent_project(U, tr.child("G").normal((9, 3)))
        eta = 0.3
        Un = polar_retract(U, E, eta)
        feas = max(feas, float(np.linalg.norm(Un.T @ Un - np.eye(3))))
        P, _, Qt = np.linalg.svd(U - eta * E, full_matrices=False)
        polar = max(polar, float(np.abs(Un - P @ Qt).max()))
    return [("retraction stays on the Stiefel manifold", feas <= 1e-10, f"{feas:.1e}"),
            ("retraction equals the SVD polar factor", polar <= 1e-10, f"{polar:.1e}")]


GROUPS = [
    ("example-landscape", "scalar factorization example: loss, gradient, Hessian along the gauge orbit",
     check_example_landscape),
    ("gd-one-step", "plain GD one-step closed forms on the scalar orbit", check_gd_one_step),
    ("orbit-closed-forms", "ScaledGD and RefLoRA product closed forms on the xy = 4 orbit", check_orbit_closed_forms),
    ("gauge-equivariance", "one-step product under (XQ, YQ^-T)", check_gauge_equivariance),
    ("gauge-geometry", "RefLoRA horizontality and balancing, ScaledGD metric invariance", check_gauge_geometry),
    ("khatri-rao", "FedPara via row-wise Khatri-Rao products", check_khatri_rao),
    ("rank-laws", "Hadamard, Kronecker, HiRA and sparse-plus-low-rank rank bounds", check_rank_laws),
    ("param-counts", "trainable parameter counts per architecture", check_param_counts),
    ("fastlora", "batched Hadamard-adapter serving kernel", check_fastlora),
    ("loftq", "alternating quantize-and-refit", check_loftq),
    ("fd-gradients", "analytic gradients vs central differences, every adapter on both problems", check_fd_gradients),
    ("stiefel", "polar retraction", check_stiefel),
]


def verify(mutation: str | None = None) -> list[CheckResult]:
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}")
    out = []
    for name, anchor, fn in GROUPS:
        try:
            items = fn(mutation=mutation) if name == "gauge-equivariance" else fn()
        except Exception as e:  # a crash is a failed check, not a crashed report
            items = [("check raised", False, f"{type(e).__name__}: {e}")]
        out.append(CheckResult(name, anchor, items))
    return out


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for res in results:
        lines.append(f"[{'PASS' if res.ok else 'FAIL'}] {res.group}: {res.anchor}")
        for label, ok, detail in res.items:
            lines.append(f"    {'ok  ' if ok else 'FAIL'} {label}" + (f" ({detail})" if detail else ""))
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} check groups passed")
    return "\n".join(lines)
