import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from qkuramoto import cli
from qkuramoto.experiments import (
    MANIFEST,
    SEED_ENV,
    ConfigError,
    Experiment,
    ExperimentConfig,
    Numerics,
    Replication,
    parse_probe,
    preset,
    read_csv,
    run,
    run_mv,
    validate,
)
from qkuramoto.model import DisorderLaw, FourierModel, InitialLaw, SineModel


def small(exp=Experiment.CUSTOM, out="out", **num):
    base = dict(N=20, T=0.2, dt=0.01, record_stride=5)
    base.update(num)
    return ExperimentConfig(
        exp, SineModel(2.0), DisorderLaw.symmetric_pair(0.5), InitialLaw.von_mises(1.0),
        numerics=Numerics(**base), replication=Replication(2, 2, (3, 4)), output_dir=str(out),
    )


def bodies(out_dir: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out_dir.glob("*.csv"))}


# --- config ----------------------------------------------------------------------------------


@pytest.mark.parametrize("exp", list(Experiment))
def test_presets_round_trip_and_validate(exp):
    cfg = preset(exp)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert validate(cfg) == []


def test_round_trip_general_model():
    law = DisorderLaw.symmetric_pair(1.0)
    cfg = replace(small(), model=FourierModel.from_sine(law, 2.0, n_modes=2), disorder=law)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_config_errors():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"experiment": "Custom"})
    d = small().to_dict()
    d["numerics"]["bogus"] = 1
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)


def test_seed_derivation_and_overrides():
    cfg = small()
    seeds = cfg.replication.seeds()
    assert len(seeds) == 4 and len(set(seeds)) == 4
    assert seeds[0][0] == seeds[1][0] != seeds[2][0]  # disorder-major: noise varies fastest
    assert cfg.replication.seeds() == seeds
    assert cfg.replication.seeds(salt=100) != seeds
    env = {SEED_ENV[0]: "17"}
    assert cfg.with_seed_overrides(env=env).replication.base_seeds == (17, 4)
    assert cfg.with_seed_overrides(seed=9, env=env).replication.base_seeds == (9, 9)
    assert cfg.with_seed_overrides(env={}).replication.base_seeds == (3, 4)


def test_parse_probe():
    assert parse_probe("cos2@a1", 2).evaluate(0.0, 1) == 1.0
    assert parse_probe("cos2@a1", 2).evaluate(0.0, 0) == 0.0
    assert parse_probe("one@all", 2).evaluate(1.0, 0) == 1.0
    for bad in ("cos@all", "tan1@all", "cos1@a5", "cos1"):
        with pytest.raises(ValueError):
            parse_probe(bad, 2)


# --- validation -------------------------------------------------------------------------------


def test_validate_examples():
    cfg = preset(Experiment.FIGURE1)
    bad = replace(cfg, numerics=replace(cfg.numerics, mv_dt=1.0, M=64))
    assert any("stability" in v for v in validate(bad))
    asym = replace(preset(Experiment.BIFURCATION), disorder=DisorderLaw((-1.0, 2.0), (0.5, 0.5)))
    assert any("symmetric" in v for v in validate(asym))
    stable = replace(preset(Experiment.FIGURE2), model=SineModel(0.5))
    assert any("(H_r)" in v for v in validate(stable))


def test_validate_enumerates_every_violation():
    cfg = small(N=0, dt=-1.0, record_stride=0, scheme="rk9")
    cfg = replace(cfg, replication=Replication(0, 1, (1, 2)), workers=0)
    v = validate(cfg)
    for field in ("numerics.N", "numerics.dt", "numerics.record_stride", "numerics.scheme", "replication", "workers"):
        assert any(x.startswith(field) for x in v), field
    with pytest.raises(ConfigError) as err:
        run(cfg)
    assert err.value.violations == v


# --- run ------------------------------------------------------------------------------------------


def test_empty_custom_run(tmp_path):
    cfg = small(out=tmp_path, N=1, T=0.0)
    man = run(cfg)
    header, rows = read_csv(tmp_path / "particle_r_psi.csv")
    assert rows == [] and header[:4] == ["replica", "disorder_seed", "noise_seed", "t"]
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    start, finish = map(json.loads, lines)
    assert start["event"] == "start" and finish["event"] == "finish"
    assert start["manifest_id"] == man.manifest_id == finish["manifest_id"]
    assert finish["outputs"] == ["particle_r_psi.csv"]
    assert (tmp_path / "particle_r_psi.csv").read_text().startswith(f"# manifest={man.manifest_id}\n")


def test_custom_run_contents(tmp_path):
    cfg = small(out=tmp_path)
    run(cfg)
    header, rows = read_csv(tmp_path / "particle_r_psi.csv")
    assert len(rows) == 4 * 5
    assert {(r[1], r[2]) for r in rows} == {(str(d), str(n)) for d, n in cfg.replication.seeds()}
    r = np.array([float(x[header.index("r")]) for x in rows])
    assert np.all((r >= 0) & (r <= 1))


def test_same_config_twice_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(small(out=a))
    run(small(out=b))
    assert bodies(a) == bodies(b) != {}


def test_worker_count_does_not_change_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(small(out=a))
    run(replace(small(out=b), workers=2))
    assert bodies(a) == bodies(b)


def test_seed_change_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(small(out=a))
    run(small(out=b).with_seed_overrides(seed=99, env={}))
    assert bodies(a) != bodies(b)


def test_runs_do_not_touch_each_other(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(small(out=a))
    before = bodies(a)
    run(replace(small(out=b), model=SineModel(5.0)))
    assert bodies(a) == before


def test_mv_runner_output(tmp_path):
    cfg = replace(small(out=tmp_path, T=1.0, M=16, mv_dt=1e-3))
    run(cfg, run_mv)
    header, rows = read_csv(tmp_path / "mv_solution.csv")
    assert header == ["t", "r", "psi", "degenerate"]
    assert float(rows[-1][0]) == pytest.approx(1.0)


def test_figure1_outputs(tmp_path):
    cfg = preset(Experiment.FIGURE1)
    cfg = replace(cfg, numerics=replace(cfg.numerics, N=200, T=8.0), output_dir=str(tmp_path))
    man = run(cfg)
    assert man.outputs == ["mv_solution.csv", "particle_r_psi.csv", "comparison.csv"]
    header, rows = read_csv(tmp_path / "particle_r_psi.csv")
    t = np.array([float(r[3]) for r in rows])
    r = np.array([float(r[4]) for r in rows])
    assert r[0] < 0.3 and r[np.isclose(t, 6.0)][0] > 0.5  # uniform start, synchronised by t = 6
    h, comp = read_csv(tmp_path / "comparison.csv")
    rstar = float(comp[0][h.index("r_star")])
    assert 0.9 < rstar < 1.0


def _bifurcation_table(path):
    h, rows = read_csv(path)
    col = lambda name: np.array([float(r[h.index(name)]) for r in rows])  # noqa: E731
    return col("K"), col("stable_r"), col("leading_eigenvalue")


def test_bifurcation_output(tmp_path):
    run(replace(preset(Experiment.BIFURCATION), output_dir=str(tmp_path / "pair")))
    K, stable, lead = _bifurcation_table(tmp_path / "pair" / "bifurcation.csv")
    assert np.all(np.diff(stable) >= -1e-12)
    # bimodal: the uniform state destabilises at K = 2 through an oscillatory mode,
    # the stationary synchronised branch only appears later
    assert K[lead > 1e-12].min() == pytest.approx(2.5)
    assert 3.0 < K[stable > 0].min() <= 3.5

    cfg = replace(preset(Experiment.BIFURCATION), disorder=DisorderLaw.dirac(0.0),
                  numerics=Numerics(K_list=(0.25, 0.5, 0.9, 1.1, 2.0, 4.0)), output_dir=str(tmp_path / "dirac"))
    run(cfg)
    K, stable, lead = _bifurcation_table(tmp_path / "dirac" / "bifurcation.csv")
    # unimodal: supercritical, the branch exists exactly where the uniform state is unstable
    assert np.array_equal(lead > 0, stable > 0)


def test_floats_round_trip_bit_exactly(tmp_path):
    run(small(out=tmp_path))
    h, rows = read_csv(tmp_path / "particle_r_psi.csv")
    for row in rows[:5]:
        v = float(row[h.index("r")])
        assert format(v, ".17g") == row[h.index("r")]


# --- CLI ---------------------------------------------------------------------------------------


def test_cli_preset_prints_valid_json(capsys):
    assert cli.main(["preset", "Figure2"]) == 0
    cfg = ExperimentConfig.from_json(capsys.readouterr().out)
    assert cfg == preset(Experiment.FIGURE2)


def test_cli_validate_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(preset(Experiment.FIGURE1).to_json())
    assert cli.main(["validate", "--config", str(good)]) == 0
    cfg = preset(Experiment.FIGURE1)
    bad = tmp_path / "bad.json"
    bad.write_text(replace(cfg, numerics=replace(cfg.numerics, mv_dt=1.0)).to_json())
    assert cli.main(["validate", "--config", str(bad)]) == 1
    assert "stability" in capsys.readouterr().out
    assert cli.main(["validate", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_simulate_and_seed_flag(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(small().to_json())
    assert cli.main(["simulate", "--config", str(conf), "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["outputs"] == ["particle_r_psi.csv"]
    start = json.loads((tmp_path / "a" / MANIFEST).read_text().splitlines()[0])
    assert start["config"]["replication"]["base_seeds"] == [5, 5]


def test_cli_module_error_exits_nonzero(tmp_path):
    conf = tmp_path / "c.json"
    cfg = small()
    d = cfg.to_dict()
    d["model"] = SineModel(1e308).to_dict()
    d["disorder"] = DisorderLaw.dirac(1.7e308).to_dict()
    conf.write_text(json.dumps(d))
    with np.errstate(all="ignore"):
        assert cli.main(["simulate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 2


def test_console_script_end_to_end(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(small().to_json())
    env_run = subprocess.run(
        [sys.executable, "-m", "qkuramoto", "simulate", "--config", str(conf), "--out", str(tmp_path / "o")],
        capture_output=True, text=True, env={"QKURAMOTO_NOISE_SEED": "123", "PATH": ""},
    )
    assert env_run.returncode == 0, env_run.stderr
    start = json.loads((tmp_path / "o" / MANIFEST).read_text().splitlines()[0])
    assert start["config"]["replication"]["base_seeds"] == [3, 123]
