import json
import math
import subprocess
import sys

import numpy as np
import pytest
import tomli
from hypothesis import given, settings
from hypothesis import strategies as st

from lorakit.cli import main
from lorakit.errors import ConfigurationError
from lorakit.harness.config import (ExperimentConfig, config_schema, config_to_dict, parse_config, serialize,
                                    with_override)
from lorakit.harness.runner import (artifact_version, csv_body, csv_text, parse_axis, read_csv_body,
                                    run_experiment, summarize, summary_csv, sweep)
from lorakit.harness.verify import GROUPS, verify
from lorakit.optimizers import COLUMNS

MINIMAL = """
optimizer = "gd"
[problem]
m = 12
n = 10
r_A = 2
kappa = 3.0
[stop]
max_iters = 30
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.adapter.rank == 2 and cfg.adapter.ortho_mode == "strict"
    assert cfg.seed == 0 and cfg.stop.loss_tol == 0.0
    assert type(cfg.init).__name__ == "LoraDefault"
    assert parse_config(serialize(cfg)) == cfg


@pytest.mark.parametrize("text,key", [
    ('optimizer = "gd"\n[problem]\nbogus = 1\n', "problem.bogus"),
    ('colour = 1\n', "colour"),
    ('[problem]\nm = "sixty"\n', "problem.m"),
    ('optimizer = "scaledgd"\ninit = "lora_default"\n', "init"),
    ('optimizer = "reflora"\ninit = "nystrom"\n', "init"),
    ('optimizer = "landing"\n', "optimizer"),
    ('optimizer = "adam"\n', "optimizer.name"),
    ('[optimizer]\nname = "gd"\neta = -1.0\n', "optimizer.eta"),
    ('optimizer = "stiefel_rgd"\ninit = "stiefel_random"\n[adapter]\nvariant = "svd"\northo_mode = "penalized"\n',
     "adapter.ortho_mode"),
    ('init = "random"\n[adapter]\nvariant = "cp3"\n', "problem.L"),
    ('[adapter]\nvariant = "fedpara"\n', "init"),
    ('[problem]\nkind = "sensing"\n', "problem.N"),
    ('[stop]\nmax_iters = -1\n', "stop.max_iters"),
])
def test_rejections_carry_key_path(text, key):
    with pytest.raises(ConfigurationError) as e:
        parse_config(text)
    assert e.value.key == key


def test_bad_toml():
    with pytest.raises(ConfigurationError):
        parse_config("[problem\n")


INIT_FOR = {"gd": ["lora_default", "gaussian_small", "nystrom", "spectral_top", "qr_top", "loftq"],
            "altgd": ["nystrom_alt", "gaussian_small"], "loraplus": ["lora_default"], "freeze_x": ["nystrom"],
            "scaledgd": ["nystrom", "gaussian_small", "spectral_top"], "reflora": ["gaussian_small", "spectral_top"],
            "stiefel_rgd": ["stiefel_random"], "landing": ["stiefel_random"]}


@st.composite
def configs(draw):
    m = draw(st.integers(2, 40))
    n = draw(st.integers(2, 40))
    r_A = draw(st.integers(1, min(m, n)))
    kappa = 1.0 if r_A == 1 else draw(st.floats(1.0, 1e3, allow_nan=False))
    opt = draw(st.sampled_from(sorted(INIT_FOR)))
    doc = {"seed": draw(st.integers(0, 2**31)), "optimizer": {"name": opt},
           "init": {"scheme": draw(st.sampled_from(INIT_FOR[opt]))},
           "problem": {"m": m, "n": n, "r_A": r_A, "kappa": kappa,
                       "spectrum": draw(st.sampled_from(["linear", "log"]))},
           "adapter": {"variant": "svd" if opt in ("stiefel_rgd", "landing") else "bm",
                       "rank": draw(st.integers(1, min(m, n)))},
           "stop": {"max_iters": draw(st.integers(0, 10**6)), "loss_tol": draw(st.floats(0, 1, allow_nan=False))}}
    if draw(st.booleans()):
        field = {"altgd": "eta_x", "loraplus": "eta_x", "stiefel_rgd": "eta_dir"}.get(opt, "eta")
        doc["optimizer"][field] = draw(st.floats(1e-6, 1.0))
    if draw(st.booleans()):
        doc["problem"].update(kind="sensing", N=draw(st.integers(1, 500)),
                              noise_sigma=draw(st.floats(0, 1, allow_nan=False)))
    return doc


@settings(max_examples=100, deadline=None)
@given(configs())
def test_serialize_roundtrip(doc):
    import tomli_w
    cfg = parse_config(tomli_w.dumps(doc))
    text = serialize(cfg)
    assert serialize(parse_config(text)) == text
    assert parse_config(text) == cfg


def test_schema_is_json_and_lists_keys():
    s = json.loads(json.dumps(config_schema()))
    assert set(s["properties"]) >= {"problem", "adapter", "init", "optimizer", "stop", "seed"}
    assert s["properties"]["problem"]["additionalProperties"] is False
    names = [o["properties"]["name"]["const"] for o in s["properties"]["optimizer"]["oneOf"][1:]]
    assert "scaledgd" in names and "landing" in names


def test_with_override():
    cfg = parse_config(MINIMAL)
    assert with_override(cfg, "problem.kappa", 5.0).problem.kappa == 5.0
    assert type(with_override(cfg, "init", "nystrom").init).__name__ == "Nystrom"
    with pytest.raises(ConfigurationError):
        with_override(cfg, "problem.nothing", 1)
    svd = parse_config(MINIMAL.replace('optimizer = "gd"', 'optimizer = "stiefel_rgd"\ninit = "stiefel_random"')
                       + '[adapter]\nvariant = "svd"\n')
    assert svd.adapter.ortho_mode == "strict"
    assert with_override(svd, "optimizer", "landing").adapter.ortho_mode == "penalized"


def test_run_experiment_is_byte_deterministic():
    cfg = parse_config(MINIMAL)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert csv_body(a) == csv_body(b)
    assert csv_body(a).splitlines()[0] == ",".join(COLUMNS)
    assert csv_body(a) != csv_body(run_experiment(with_override(cfg, "seed", 1)))


def test_csv_header_and_empty_fields():
    rec = run_experiment(parse_config(MINIMAL))
    text = csv_text(rec)
    assert text.startswith(f"# version: {artifact_version()}\n")
    assert read_csv_body(text) == csv_body(rec)
    first = csv_body(rec).splitlines()[1].split(",")
    assert first[COLUMNS.index("ortho_penalty")] == "" and first[COLUMNS.index("wall_ns")] == ""


def test_zero_iterations_single_row():
    cfg = with_override(parse_config(MINIMAL), "stop.max_iters", 0)
    assert len(csv_body(run_experiment(cfg)).splitlines()) == 2


@pytest.mark.parametrize("variant,extra", [
    ("fedpara", {}), ("hira", {}), ("kron", {"d1": 4, "d2": 5, "d3": 3, "d4": 2}), ("vera", {}),
    ("cp3", {"L": 3}), ("tt3", {"L": 3, "r1": 2, "r2": 2}),
])
def test_non_bm_variants_run(variant, extra):
    doc = tomli.loads(MINIMAL)
    doc["init"] = "random"
    doc["adapter"] = {"variant": variant, **{k: v for k, v in extra.items() if k != "L"}}
    if "L" in extra:
        doc["problem"]["L"] = extra["L"]
    import tomli_w
    rec = run_experiment(parse_config(tomli_w.dumps(doc)))
    loss = [r["loss"] for r in rec.rows]
    assert loss[-1] < loss[0]


def test_parse_axis():
    assert parse_axis("problem.kappa=2,5.5,x") == ("problem.kappa", [2, 5.5, "x"])
    assert parse_axis("a=true")[1] == [True]
    with pytest.raises(ConfigurationError):
        parse_axis("kappa")


def test_single_point_sweep_equals_run():
    cfg = parse_config(MINIMAL)
    results, summary = sweep(cfg, {"problem.kappa": [3.0]}, seeds=1)
    assert csv_body(results[0][2]) == csv_body(run_experiment(cfg))
    assert summary[0]["runs"] == 1 and summary[0]["failed"] == 0


def test_parallel_sweep_equals_serial():
    cfg = parse_config(MINIMAL)
    axes = {"problem.kappa": [2.0, 4.0], "init": ["gaussian_small", "nystrom"]}
    serial, s1 = sweep(cfg, axes, seeds=2, jobs=1)
    par, s2 = sweep(cfg, axes, seeds=2, jobs=2)
    assert [csv_body(r[2]) for r in serial] == [csv_body(r[2]) for r in par]
    assert summary_csv(s1) == summary_csv(s2)
    assert len(s1) == 4 and all(row["runs"] == 2 for row in s1)


def test_sweep_records_failures():
    cfg = parse_config(MINIMAL)
    # lora_default is invalid for scaledgd; the other point still runs
    results, summary = sweep(cfg, {"optimizer": ["scaledgd", "gd"]}, seeds=2)
    assert [r[2] is None for r in results] == [True, True, False, False]
    assert "lora_default" in results[0][3]
    assert summary[0]["failed"] == 2 and summary[1]["failed"] == 0
    results, summary = sweep(with_override(cfg, "optimizer", {"name": "gd", "eta": 50.0}),
                             {"problem.kappa": [3.0]}, seeds=1)
    assert results[0][2].diverged and summary[0]["median_iters"] == math.inf


def test_summary_median_rule():
    class R:
        def __init__(self, it, conv):
            self.iterations, self.converged, self.rows = it, conv, [{"stable_rank": 1.0}]

    pt = (("k", 1),)
    rows = summarize([(pt, 0, R(10, True), None), (pt, 1, R(30, True), None), (pt, 2, R(99, False), None)])
    assert rows[0]["median_iters"] == 30.0
    rows = summarize([(pt, 0, R(10, True), None), (pt, 1, None, "boom"), (pt, 2, R(99, False), None)])
    assert rows[0]["median_iters"] == math.inf and rows[0]["failed"] == 1


def test_verify_reports_many_groups():
    assert len(GROUPS) >= 9
    res = verify()
    assert all(r.ok for r in res), [r.group for r in res if not r.ok]


def test_verify_catches_mutation():
    res = {r.group: r.ok for r in verify("scaledgd-drop-gram-inverse")}
    assert not res["gauge-equivariance"]
    with pytest.raises(ValueError):
        verify("no-such-mutation")


# ---------------------------------------------------------------- CLI

def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_run_writes_csv(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2)]) == 0
    assert read_csv_body(out1.read_text()) == read_csv_body(out2.read_text())
    assert main(["run", "--config", cfg, "--seed", "4", "--out", str(out2)]) == 0
    assert read_csv_body(out1.read_text()) != read_csv_body(out2.read_text())


def test_cli_exit_codes(tmp_path):
    assert main(["run", "--config", write(tmp_path, MINIMAL + "\nbogus = 1\n")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["run", "--config", write(tmp_path, "[problem\n")]) == 2
    diverge = '[optimizer]\nname = "gd"\neta = 50.0\n' + MINIMAL.replace('optimizer = "gd"\n', "")
    assert main(["run", "--config", write(tmp_path, diverge), "--out", str(tmp_path / "d.csv")]) == 1


def test_cli_sweep(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL)
    rc = main(["sweep", "--config", cfg, "--axis", "problem.kappa=2,4", "--seeds", "2",
               "--out-dir", str(tmp_path / "runs")])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "problem.kappa,runs,failed,median_iters,median_final_stable_rank" and len(out) == 3
    assert len(list((tmp_path / "runs").glob("*.csv"))) == 4


def test_cli_verify_subprocess():
    ok = subprocess.run([sys.executable, "-m", "lorakit.cli", "verify"], capture_output=True, text=True)
    assert ok.returncode == 0 and "12/12 check groups passed" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "lorakit.cli", "verify", "--mutate", "scaledgd-drop-gram-inverse"],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and "[FAIL] gauge-equivariance" in bad.stdout


def test_cli_schema(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["type"] == "object"
