import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from longwave.cli import main
from longwave.effective import EffectiveModel
from longwave.errors import ConfigError, IncompatibleDomain
from longwave.experiment import (ExperimentConfig, _parse_bounds, _parse_times, build_models,
                                 default_output_times, load_config, paper_scale_preset,
                                 read_curves, report, run, write_curves)
from longwave.wave import read_field


def small_cfg(tmp_path, **kw):
    base = dict(medium="cos1d", cell_points=128, alpha=4, epsilon=0.25, bounds=((-4.0, 4.0),),
                points_per_cell=16, t_end=4.0, output_times=(1.0, 2.0, 4.0), output_dir=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base).check()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = small_cfg(tmp, dump_fields=True)
    return cfg, run(cfg)


# configuration ---------------------------------------------------------------------

def test_parse_times():
    assert _parse_times("") == ()
    assert _parse_times("1, 2.5,3") == (1.0, 2.5, 3.0)
    ts = _parse_times("log:1:100:3")
    assert ts == pytest.approx((1.0, 10.0, 100.0))
    for bad in ("log:1:2", "a,b", "log:0:1:3"):
        with pytest.raises(ConfigError):
            _parse_times(bad)


def test_parse_bounds():
    assert _parse_bounds("-1,1; 0,2") == ((-1.0, 1.0), (0.0, 2.0))
    for bad in ("1", "1,2,3", "x,1"):
        with pytest.raises(ConfigError):
            _parse_bounds(bad)


def test_default_output_times():
    ts = default_output_times(1000.0, 0.1)
    assert ts[0] == 1.0 and ts[-1] == 1000.0
    assert 100.0 in ts
    assert all(a < b for a, b in zip(ts, ts[1:]))


def test_load_config(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text("[experiment]\nkind = longtime\n[medium]\nspec = builtin:cos1d\ncell_points = 64\n"
                 "[model]\nalpha = 2\nepsilon = 0.25  ; cell size\n[domain]\nbounds = -4,4\n"
                 "points_per_cell = 8\n[time]\nt_end = 3\noutput_times = 1,3\n[output]\ndir = out\n")
    cfg = load_config(p)
    assert (cfg.alpha, cfg.epsilon, cfg.cell_points, cfg.points_per_cell) == (2, 0.25, 64, 8)
    assert cfg.output_times == (1.0, 3.0) and cfg.t_end == 3.0
    assert cfg.output_dir == str((tmp_path / "out").resolve())
    big = load_config(p, paper_scale=True)
    assert big.bounds == ((-84.0, 84.0),) and big.t_end == 1e4
    assert big.dt == pytest.approx(0.25 / 16 / 16) and big.points_per_cell == 16


def test_load_config_defaults(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text("[experiment]\n")
    cfg = load_config(p)
    assert cfg == replace(ExperimentConfig(), output_dir=cfg.output_dir)
    assert cfg.points_per_cell == 16 and cfg.bounds == ((-21.0, 21.0),)


@pytest.mark.parametrize("body,exc", [
    ("[model]\nalpha = two\n", ConfigError),
    ("[experiment]\nkind = other\n", ConfigError),
    ("[medium]\nspec = missing.bin\n", ConfigError),
    ("[domain]\nbounds = -21,21.05\n", IncompatibleDomain),
])
def test_bad_configs(tmp_path, body, exc):
    p = tmp_path / "exp.ini"
    p.write_text(body)
    with pytest.raises(exc):
        load_config(p)


def test_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_paper_scale_preset_keeps_medium():
    cfg = paper_scale_preset(ExperimentConfig(medium="cos1d", epsilon=0.1))
    assert cfg.medium == "cos1d" and cfg.grid().shape == (1680 * 16,)


# runs ----------------------------------------------------------------------------

def test_run_outputs(small_run):
    cfg, res = small_run
    out = cfg.output_dir
    man = json.load(open(f"{out}/manifest.json"))
    assert man["complete"] and set(man["stages"]) == {"tensors", "fine", "effective", "curves"}
    times, errors = read_curves(f"{out}/curves.csv")
    assert times == pytest.approx([1.0, 2.0, 4.0])
    assert sorted(errors) == [0, 1, 2]
    assert errors[1] == res.errors[1]
    assert [m.s for m in res.models] == [0, 1, 2]
    for s in range(3):
        assert EffectiveModel.load(f"{out}/model_s{s}.txt") == res.models[s]
    info, u = read_field(f"{out}/fine_final.bin")
    assert info["t"] == pytest.approx(4.0) and u.shape == cfg.grid().shape


def test_errors_small_at_short_times(small_run):
    _, res = small_run
    for s, errs in res.errors.items():
        assert max(errs) < 0.2, s


def test_runs_are_deterministic(tmp_path, small_run):
    cfg, res = small_run
    again = run(replace(cfg, output_dir=str(tmp_path / "again"), dump_fields=False))
    assert again.errors == res.errors
    a = open(f"{cfg.output_dir}/curves.csv").read()
    assert a == open(tmp_path / "again" / "curves.csv").read()


def test_truncated_models_match_direct_runs(tmp_path, small_run):
    cfg, res = small_run
    for s in (0, 1):
        direct = build_models(replace(cfg, alpha=2 * s, output_dir=str(tmp_path / f"a{s}")))
        assert direct[-1] == res.models[s]


def test_constant_medium_all_orders_agree(tmp_path):
    cfg = small_cfg(tmp_path, medium="constant:1.5", cell_points=8, t_end=2.0, output_times=(2.0,))
    res = run(cfg)
    e = [res.errors[s][-1] for s in range(3)]
    assert e[0] == e[1] == e[2]
    # leapfrog time error only
    assert e[0] < 1e-4


def test_curves_round_trip(tmp_path):
    p = tmp_path / "c.csv"
    write_curves(p, [0.5, 1.0], {0: [0.1, 0.2], 2: [0.01, 1 / 3]})
    times, errors = read_curves(p)
    assert times == [0.5, 1.0] and errors == {0: [0.1, 0.2], 2: [0.01, 1 / 3]}
    p.write_text("x,y\n")
    with pytest.raises(ConfigError):
        read_curves(p)


def test_failed_run_leaves_partial_manifest(tmp_path):
    cfg = small_cfg(tmp_path, dt=10.0)
    with pytest.raises(ConfigError):
        run(cfg)
    man = json.load(open(tmp_path / "run" / "manifest.json"))
    assert not man["complete"]
    assert man["stages"]["tensors"]["status"] == "done"
    assert man["stages"]["fine"]["status"] == "failed"
    text = report(tmp_path / "run")
    assert "incomplete: fine" in text


def test_highfreq_small(tmp_path):
    cfg = ExperimentConfig(medium="laminate2d", cell_points=32, alpha=2, epsilon=0.5,
                           bounds=((-2.0, 2.0), (-2.0, 2.0)), points_per_cell=8, beta=1.0, nu=1.0,
                           t_end=0.5, kind="highfreq", output_dir=str(tmp_path / "hf")).check()
    res = run(cfg)
    rows = (tmp_path / "hf" / "cut.csv").read_text().splitlines()
    assert rows[0] == "x2,fine,eff_s0,eff_s1"
    assert len(rows) == 1 + cfg.grid().shape[1]
    assert set(res.manifest["cut_rms"]) == {"eff_s0", "eff_s1"}
    assert (tmp_path / "hf" / "effective_s1.bin").exists()
    assert "cut rms" in report(tmp_path / "hf")


def test_highfreq_needs_2d(tmp_path):
    with pytest.raises(ConfigError):
        run(small_cfg(tmp_path, kind="highfreq"))


# reporting --------------------------------------------------------------------------

def test_report_complete(small_run):
    cfg, _ = small_run
    text = report(cfg.output_dir)
    assert "cell problems: 3 solved / 5 naive / 2 spared" in text
    assert "stage 2: deltastar" in text
    assert "incomplete" not in text
    assert text.splitlines()[-1].startswith("wall clock")


def test_report_homogenized_only(tmp_path):
    res = run(small_cfg(tmp_path, alpha=0, t_end=1.0, output_times=(1.0,)))
    text = report(tmp_path / "run")
    assert "homogenized only" in text and "solved" not in text
    assert res.models[0].s == 0


def test_report_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        report(tmp_path)


# command line ------------------------------------------------------------------------

def test_cli_tensors(tmp_path, capsys):
    out = tmp_path / "m.txt"
    assert main(["tensors", "--medium", "builtin:cos1d", "--alpha", "4", "--epsilon", "0.1",
                 "--grid", "256", "--out", str(out), "--naive-check"]) == 0
    text = capsys.readouterr().out
    assert "stage 2: deltastar" in text and "naive_gap_2" in text
    assert EffectiveModel.load(out).s == 2


def test_cli_simulations(tmp_path, capsys):
    model = tmp_path / "m.txt"
    main(["tensors", "--medium", "cos1d", "--alpha", "2", "--epsilon", "0.25", "--grid", "64", "--out", str(model)])
    fine = tmp_path / "fine.bin"
    assert main(["simulate-fine", "--medium", "cos1d", "--grid", "64", "--epsilon", "0.25", "--t-end", "1",
                 "--bounds=-2,2", "--out", str(fine), "--times", "0.5,1"]) == 0
    assert (tmp_path / "fine_t0.5.bin").exists()
    eff = tmp_path / "eff.bin"
    assert main(["simulate-effective", "--model", str(model), "--t", "1", "--bounds=-2,2",
                 "--out", str(eff)]) == 0
    (_, uf), (_, ue) = read_field(fine), read_field(eff)
    assert uf.shape == ue.shape
    assert np.linalg.norm(uf - ue) / np.linalg.norm(uf) < 0.2


def test_cli_bloch(tmp_path, capsys):
    model = tmp_path / "m.txt"
    main(["tensors", "--medium", "cos1d", "--alpha", "2", "--epsilon", "0.1", "--out", str(model)])
    capsys.readouterr()
    assert main(["bloch", "--medium", "cos1d", "--k", "0.01,0.1", "--model", str(model)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "k omega2_bloch omega2_model"
    k, wb, wm = map(float, lines[2].split())
    assert abs(wb - wm) < 1e-6 * k ** 2


def test_cli_compare_and_report(tmp_path, capsys):
    p = tmp_path / "exp.ini"
    p.write_text("[medium]\nspec = cos1d\ncell_points = 64\n[model]\nalpha = 2\nepsilon = 0.25\n"
                 "[domain]\nbounds = -2,2\n[time]\nt_end = 1\noutput_times = 0.5,1\n[output]\ndir = run\n")
    assert main(["compare", "--config", str(p), "--out", str(tmp_path / "copy.csv")]) == 0
    assert "err_s1" in capsys.readouterr().out
    assert (tmp_path / "copy.csv").read_text() == (tmp_path / "run" / "curves.csv").read_text()
    assert main(["report", "--manifest", str(tmp_path / "run" / "manifest.json")]) == 0
    assert "1 solved" not in capsys.readouterr().out


def test_cli_exit_code_config_error(tmp_path, capsys):
    assert main(["tensors", "--medium", "missing.bin", "--alpha", "2", "--epsilon", "0.1",
                 "--out", str(tmp_path / "m.txt")]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["simulate-fine", "--medium", "cos1d", "--epsilon", "0.1", "--t-end", "1",
                 "--bounds=-1,1.05", "--out", str(tmp_path / "f.bin")]) == 2
    assert "axis 1" in capsys.readouterr().err


def test_cli_exit_code_numerical_error(tmp_path, capsys):
    model = tmp_path / "m.txt"
    main(["tensors", "--medium", "cos1d", "--alpha", "2", "--epsilon", "0.25", "--grid", "64", "--out", str(model)])
    m = EffectiveModel.load(model)
    st = m.stages[0]
    bad = replace(m, stages=(replace(st, b2r=st.b2r * -1000.0),))
    model.write_text(bad.dumps())
    assert main(["simulate-effective", "--model", str(model), "--t", "1", "--bounds=-2,2",
                 "--out", str(tmp_path / "e.bin")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "longwave.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate-fine" in proc.stdout
