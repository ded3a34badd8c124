"""Experiment configuration: TOML in, frozen dataclasses out, TOML back.

Example::

    seed = 3
    optimizer = "gd"            # shorthand for [optimizer] name = "gd"
    init = "nystrom"

    [problem]
    kind = "factorization"
    m = 60
    n = 50
    r_A = 5
    kappa = 20.0

    [adapter]
    variant = "bm"
    rank = 5

    [stop]
    max_iters = 5000
    loss_tol = 1e-8

Unknown keys, wrong value types and incompatible optimizer/adapter/init
combinations raise :class:`ConfigurationError` carrying the dotted key path.
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields, replace

import tomli
import tomli_w

from ..adapters import TENSOR_VARIANTS, VARIANTS
from ..errors import ConfigurationError
from ..initializers import INIT_NAMES, INIT_SCHEMES, LoraDefault, Nystrom, StiefelRandom, validate_init
from ..optimizers import (OPTIMIZER_NAMES, OPTIMIZERS, BM_ONLY, SVD_ONLY, Landing, RefLoRA, ScaledGD,
                          StopRule, validate_optimizer)


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "factorization"
    m: int = 60
    n: int = 50
    r_A: int = 5
    kappa: float = 1.0
    N: int = 0
    noise_sigma: float = 0.0
    spectrum: str = "linear"
    L: int | None = None  # layer count; required by tensor adapters


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "bm"
    rank: int | None = None  # defaults to problem.r_A
    r1: int | None = None
    r2: int | None = None
    r3: int | None = None
    d1: int | None = None
    d2: int | None = None
    d3: int | None = None
    d4: int | None = None
    K: int = 2
    s: int | None = None
    sigma_diagonal: bool = False
    ortho_mode: str | None = None  # defaults from the optimizer

    def dims(self, problem: ProblemConfig) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None and k not in ("variant", "rank")}
        out.update(m=problem.m, n=problem.n, r=self.rank, L=problem.L or 1)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    init: typing.Any = field(default_factory=LoraDefault)
    optimizer: typing.Any = field(default_factory=lambda: OPTIMIZERS["gd"]())
    stop: StopRule = field(default_factory=StopRule)
    seed: int = 0
    output: str | None = None
    log_every: int = 1


# --------------------------------------------------------------------------
# typed table -> dataclass


def _check_type(value, hint, key):
    args = typing.get_args(hint)
    if args and type(None) in args:  # Optional[...]
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigurationError(f"expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}", key)
    return value


def _build(cls, table, path, skip=()):
    if not isinstance(table, dict):
        raise ConfigurationError("expected a table", path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names - set(skip)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigurationError("unknown key", f"{path}.{key}" if path else key)
    kwargs = {}
    for k, v in table.items():
        if k in skip:
            continue
        kwargs[k] = _check_type(v, hints[k], f"{path}.{k}" if path else k)
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(str(e).split(": ", 1)[-1], e.key or path) from None
    except (ValueError, TypeError) as e:
        raise ConfigurationError(str(e), path) from None


def _tagged(value, registry, path, tag):
    """A tagged-union entry: either ``"name"`` or a table with ``name`` plus fields."""
    if isinstance(value, str):
        value = {tag: value}
    if not isinstance(value, dict) or tag not in value:
        raise ConfigurationError(f"expected a name or a table with '{tag}'", path)
    name = value[tag]
    if name not in registry:
        raise ConfigurationError(f"unknown {path} {name!r}; choose from {sorted(registry)}", f"{path}.{tag}")
    return _build(registry[name], value, path, skip=(tag,))


# --------------------------------------------------------------------------
# parse / validate / serialize


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigurationError(f"not valid TOML: {e}") from None
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError("unknown key", sorted(unknown)[0])
    kw = {}
    if "problem" in doc:
        kw["problem"] = _build(ProblemConfig, doc["problem"], "problem")
    if "adapter" in doc:
        kw["adapter"] = _build(AdapterConfig, doc["adapter"], "adapter")
    if "init" in doc:
        kw["init"] = _tagged(doc["init"], INIT_SCHEMES, "init", "scheme")
    if "optimizer" in doc:
        kw["optimizer"] = _tagged(doc["optimizer"], OPTIMIZERS, "optimizer", "name")
    if "stop" in doc:
        kw["stop"] = _build(StopRule, doc["stop"], "stop")
    for k in ("seed", "output", "log_every"):
        if k in doc:
            kw[k] = _check_type(doc[k], typing.get_type_hints(ExperimentConfig)[k], k)
    return resolve(ExperimentConfig(**kw))


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill dependent defaults and check cross-field compatibility."""
    p, a, ini, opt = cfg.problem, cfg.adapter, cfg.init, cfg.optimizer
    if p.kind not in ("factorization", "sensing"):
        raise ConfigurationError(f"unknown kind {p.kind!r}", "problem.kind")
    if p.kind == "sensing" and p.N < 1:
        raise ConfigurationError("sensing needs N >= 1", "problem.N")
    if not 1 <= p.r_A <= min(p.m, p.n):
        raise ConfigurationError("r_A must lie in [1, min(m, n)]", "problem.r_A")
    if p.kappa < 1:
        raise ConfigurationError("kappa must be >= 1", "problem.kappa")
    if p.r_A == 1 and p.kappa != 1:
        raise ConfigurationError("a rank-1 target has kappa = 1", "problem.kappa")
    if p.spectrum not in ("linear", "log"):
        raise ConfigurationError(f"unknown spectrum {p.spectrum!r}", "problem.spectrum")
    if p.L is not None and p.L < 1:
        raise ConfigurationError("L must be >= 1", "problem.L")
    if cfg.seed < 0:
        raise ConfigurationError("seed must be >= 0", "seed")
    if cfg.log_every < 1:
        raise ConfigurationError("log_every must be >= 1", "log_every")

    if a.variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {a.variant!r}; choose from {sorted(VARIANTS)}", "adapter.variant")
    rank = a.rank if a.rank is not None else p.r_A
    if rank < 1:
        raise ConfigurationError("rank must be >= 1", "adapter.rank")
    tensor = a.variant in TENSOR_VARIANTS
    if tensor and p.L is None:
        raise ConfigurationError(f"{a.variant} needs problem.L", "problem.L")
    if not tensor and p.L is not None:
        raise ConfigurationError(f"{a.variant} is a matrix adapter; drop problem.L", "problem.L")
    if a.variant == "kron":
        d = (a.d1, a.d2, a.d3, a.d4)
        if None in d:
            raise ConfigurationError("kron needs d1, d2, d3, d4", "adapter.d1")
        if a.d1 * a.d3 != p.m or a.d2 * a.d4 != p.n:
            raise ConfigurationError("kron needs m = d1*d3 and n = d2*d4", "adapter.d1")
    if a.variant == "kron_ensemble" and None in (a.d1, a.d2, a.d3, a.d4):
        raise ConfigurationError("kron_ensemble needs d1, d2, d3, d4", "adapter.d1")
    if a.variant in ("bm", "svd") and rank > min(p.m, p.n):
        raise ConfigurationError("rank exceeds min(m, n)", "adapter.rank")

    ortho = a.ortho_mode
    if ortho is None:
        ortho = "penalized" if isinstance(opt, Landing) else "strict"
    if ortho not in ("strict", "penalized"):
        raise ConfigurationError(f"unknown ortho_mode {ortho!r}", "adapter.ortho_mode")
    a = replace(a, rank=rank, ortho_mode=ortho)

    validate_init(ini)
    validate_optimizer(opt)
    iname, oname = INIT_NAMES[type(ini)], OPTIMIZER_NAMES[type(opt)]
    if a.variant == "bm" and isinstance(ini, StiefelRandom):
        raise ConfigurationError("stiefel_random builds an svd adapter", "init")
    if a.variant == "svd" and iname not in ("stiefel_random", "spectral_top", "random"):
        raise ConfigurationError("svd adapters start from stiefel_random, spectral_top or random", "init")
    if a.variant not in ("bm", "svd") and iname != "random":
        raise ConfigurationError(f"{a.variant} adapters start from init = \"random\"", "init")
    if isinstance(opt, BM_ONLY) and a.variant != "bm":
        raise ConfigurationError(f"{oname} needs adapter.variant = \"bm\"", "optimizer")
    if isinstance(opt, SVD_ONLY):
        if a.variant != "svd":
            raise ConfigurationError(f"{oname} needs adapter.variant = \"svd\"", "optimizer")
        want = "penalized" if isinstance(opt, Landing) else "strict"
        if ortho != want:
            raise ConfigurationError(f"{oname} needs ortho_mode = \"{want}\"", "adapter.ortho_mode")
    if isinstance(opt, ScaledGD) and isinstance(ini, LoraDefault):
        raise ConfigurationError("scaledgd with lora_default starts from a zero Gram matrix", "init")
    if isinstance(opt, RefLoRA) and isinstance(ini, (LoraDefault, Nystrom)):
        raise ConfigurationError("reflora needs both factors nonzero at the start", "init")
    return replace(cfg, adapter=a)


def _drop_none(d):
    return {k: v for k, v in d.items() if v is not None}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {"seed": cfg.seed, "log_every": cfg.log_every}
    if cfg.output is not None:
        out["output"] = cfg.output
    out["problem"] = _drop_none(asdict(cfg.problem))
    out["adapter"] = _drop_none(asdict(cfg.adapter))
    out["init"] = {"scheme": INIT_NAMES[type(cfg.init)], **_drop_none(asdict(cfg.init))}
    out["optimizer"] = {"name": OPTIMIZER_NAMES[type(cfg.optimizer)], **_drop_none(asdict(cfg.optimizer))}
    out["stop"] = asdict(cfg.stop)
    return out


def serialize(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def with_override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Set a dotted key (``problem.kappa``, ``init``, ``optimizer.eta`` ...) and re-resolve.

    Switching ``init`` or ``optimizer`` by name resets that entry's fields.
    """
    doc = config_to_dict(cfg)
    parts = key.split(".")
    if parts[0] == "adapter" and parts[-1] != "ortho_mode":
        doc["adapter"].pop("ortho_mode", None)  # let it re-derive
    if key in ("init", "optimizer"):
        doc[key] = value
        if key == "optimizer":
            doc["adapter"].pop("ortho_mode", None)
    else:
        node = doc
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigurationError("unknown key", key)
            node = node[p]
        node[parts[-1]] = value
    return config_from_dict(doc)


_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _table_schema(cls, skip=()):
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        hint = typing.get_type_hints(cls)[f.name]
        args = typing.get_args(hint)
        base = next((a for a in args if a is not type(None)), hint) if args else hint
        t = _JSON_TYPES.get(base)
        props[f.name] = {"type": t} if t else {}
        if args and type(None) in args:
            props[f.name] = {"type": [t, "null"]} if t else {}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _union_schema(registry, tag):
    out = [{"type": "string", "enum": sorted(registry)}]
    for name, cls in sorted(registry.items()):
        s = _table_schema(cls)
        s["properties"] = {tag: {"const": name}, **s["properties"]}
        s["required"] = [tag]
        out.append(s)
    return {"oneOf": out}


def config_schema() -> dict:
    """JSON Schema (draft 2020-12) of the config document."""
    top = _table_schema(ExperimentConfig, skip=("problem", "adapter", "init", "optimizer", "stop"))
    top["properties"].update(problem=_table_schema(ProblemConfig), adapter=_table_schema(AdapterConfig),
                             init=_union_schema(INIT_SCHEMES, "scheme"),
                             optimizer=_union_schema(OPTIMIZERS, "name"), stop=_table_schema(StopRule))
    top["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    return top
