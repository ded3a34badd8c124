"""Deterministic execution of configs: single runs, sweeps and CSV emission."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..adapters import SVDType, random_adapter
from ..core import RandomSource
from ..errors import ConfigurationError, LorakitError
from ..initializers import RandomFactors, SpectralTop, init, truncated_svd
from ..optimizers import COLUMNS, RunRecord, run
from ..problems import (SyntheticSpec, make_sensing_problem, make_synthetic_target, make_target_stack)
from .config import ExperimentConfig, serialize, with_override


def artifact_version() -> str:
    """Package version plus a short digest of the installed sources, git-describe style."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+g{h.hexdigest()[:12]}"


def build_problem(cfg: ExperimentConfig, rng: RandomSource):
    p = cfg.problem
    spec = SyntheticSpec(p.m, p.n, p.r_A, p.kappa, p.N, p.noise_sigma, p.spectrum)
    if p.kind == "sensing":
        return make_sensing_problem(spec, rng, L=p.L)
    if p.L is not None:
        return make_target_stack(spec, p.L, rng)
    return make_synthetic_target(spec, rng)


def build_adapter(cfg: ExperimentConfig, problem, rng: RandomSource):
    a, p = cfg.adapter, cfg.problem
    if isinstance(cfg.init, RandomFactors) and a.variant != "bm":
        ad = random_adapter(a.variant, a.dims(p), rng, cfg.init.scale)
    elif a.variant == "svd" and isinstance(cfg.init, SpectralTop):
        U, s, Vt = truncated_svd(problem.proxy(), a.rank)
        ad = SVDType(U, np.diag(s), Vt.T, sigma_diagonal=a.sigma_diagonal)
    else:
        ad = init(cfg.init, problem, (p.m, p.n, a.rank), rng)
    if isinstance(ad, SVDType):
        ad = replace(ad, ortho_mode=a.ortho_mode, sigma_diagonal=a.sigma_diagonal)
    return ad


def run_experiment(cfg: ExperimentConfig, *, record_time: bool = False) -> RunRecord:
    """init -> run for one config; streams come from ``cfg.seed`` only."""
    root = RandomSource(cfg.seed, "experiment")
    problem = build_problem(cfg, root.child("problem"))
    adapter = build_adapter(cfg, problem, root.child("init"))
    rec = run(problem, adapter, cfg.optimizer, cfg.stop, log_every=cfg.log_every, record_time=record_time)
    rec.header = {"version": artifact_version(), "config": serialize(cfg)}
    return rec


# --------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_body(rec: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rec.rows:
        w.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def csv_text(rec: RunRecord) -> str:
    """Commented header (version, resolved config) followed by the body."""
    lines = [f"# version: {rec.header.get('version', '')}"]
    lines += [f"# {ln}" for ln in rec.header.get("config", "").splitlines()]
    return "\n".join(lines) + "\n" + csv_body(rec)


def read_csv_body(text: str) -> str:
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("#"))


def write_record(rec: RunRecord, path) -> None:
    Path(path).write_text(csv_text(rec))


# --------------------------------------------------------------------------
# sweeps


def parse_axis(spec: str):
    """``key=v1,v2,...`` with each value read as int, float or string."""
    if "=" not in spec:
        raise ConfigurationError(f"axis must look like key=v1,v2 (got {spec!r})", "axis")
    key, vals = spec.split("=", 1)
    out = []
    for v in vals.split(","):
        v = v.strip()
        if not v:
            raise ConfigurationError("empty axis value", key)
        for conv in (int, float):
            try:
                out.append(conv(v))
                break
            except ValueError:
                continue
        else:
            out.append({"true": True, "false": False}.get(v.lower(), v))
    return key.strip(), out


def expand_sweep(base: ExperimentConfig, axes: dict, seeds: int):
    """Cartesian product of axis values; yields ``(point, seed, cfg)``.

    ``cfg`` is the :class:`ConfigurationError` itself when the point does not resolve.
    """
    if not axes:
        raise ConfigurationError("sweep needs at least one axis", "axis")
    if seeds < 1:
        raise ConfigurationError("seeds must be >= 1", "seeds")
    keys = list(axes)
    for values in itertools.product(*(axes[k] for k in keys)):
        point = tuple(zip(keys, values))
        cfg = base
        try:
            for k, v in point:
                cfg = with_override(cfg, k, v)
        except ConfigurationError as e:
            cfg = e  # an invalid point is a failed run, not a failed sweep
        for s in range(seeds):
            yield point, base.seed + s, cfg if isinstance(cfg, Exception) else replace(cfg, seed=base.seed + s)


def _run_one(cfg):
    if isinstance(cfg, ConfigurationError):
        return None, f"ConfigurationError: {cfg}"
    try:
        rec = run_experiment(cfg)
        return rec, None
    except LorakitError as e:
        return None, f"{type(e).__name__}: {e}"


def sweep(base: ExperimentConfig, axes: dict, seeds: int = 1, jobs: int = 1):
    """Execute every axis point for ``seeds`` seeds; failures are recorded, not raised.

    Returns ``(results, summary)``.  ``results`` holds
    ``(point, seed, record_or_None, error_or_None)``; ``summary`` has one row
    per axis point with the median iterations-to-tolerance (``inf`` when
    fewer than half the seeds converged) and median final stable rank.
    """
    jobs_list = list(expand_sweep(base, axes, seeds))
    cfgs = [c for _, _, c in jobs_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_one, cfgs))
    else:
        outs = [_run_one(c) for c in cfgs]
    results = [(pt, sd, rec, err) for (pt, sd, _), (rec, err) in zip(jobs_list, outs)]
    return results, summarize(results)


def summarize(results) -> list[dict]:
    groups = {}
    for point, _, rec, err in results:
        groups.setdefault(point, []).append((rec, err))
    rows = []
    for point, items in groups.items():
        iters = [float(r.iterations) if r.converged else math.inf for r, e in items if r is not None]
        srs = [r.rows[-1]["stable_rank"] for r, e in items if r is not None and r.rows[-1]["stable_rank"] is not None]
        row = {k: v for k, v in point}
        row.update(runs=len(items), failed=sum(e is not None for _, e in items),
                   median_iters=statistics.median(iters) if iters else math.inf,
                   median_final_stable_rank=statistics.median(srs) if srs else None)
        rows.append(row)
    return rows


def summary_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()
