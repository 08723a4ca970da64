import math
import subprocess
import sys

import numpy as np
import pytest

from mixstab.cli import (
    MAP_HEADER,
    PROFILE_HEADER,
    ROOT_HEADER,
    SERIES_HEADER,
    SUMMARY_HEADER,
    VALIDATE_HEADER,
    fmt,
    main,
    read_csv,
)
from mixstab.closures import ClosureModel
from mixstab.equilibrium import forcing_for_constant

HEADERS = {
    "roots.csv": ROOT_HEADER,
    "stability_map.csv": MAP_HEADER,
    "timeseries.csv": SERIES_HEADER,
    "final_profile.csv": PROFILE_HEADER,
    "validate.csv": VALIDATE_HEADER,
    "validate_summary.csv": SUMMARY_HEADER,
}
BOOLS = {"true", "false", ""}


def run(tmp_path, command, text, *flags, out="out"):
    cfg = tmp_path / f"{command}.ini"
    cfg.write_text(text)
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), *flags])
    return code, tmp_path / out


def Q_for(C, Vx=0.1, Vy=0.05):
    return fmt(forcing_for_constant(C, Vx, Vy).Q)


def check_csv(path):
    """Re-read an emitted CSV: exact header, rectangular, every cell parses."""
    header, rows = read_csv(path)
    expected = PROFILE_HEADER if path.name.startswith("profile_") else HEADERS[path.name]
    assert header == expected
    text_cols = {"model", "classification", "verdict"}
    for row in rows:
        assert len(row) == len(header)
        for name, cell in zip(header, row):
            if name in text_cols:
                assert cell
            elif cell in BOOLS:
                continue
            else:
                v = float(cell)
                if math.isfinite(v):
                    assert float(fmt(v)) == v
    return header, rows


def check_all_csvs(out):
    files = sorted(out.glob("*.csv"))
    assert files
    for p in files:
        check_csv(p)


# ---------------------------------------------------------------- equilibria

def test_equilibria_single_root(tmp_path):
    code, out = run(tmp_path, "equilibria", "[model]\nname = R-2-2-4\n[forcing]\nQ = -1e-5\n")
    assert code == 0
    _, rows = check_csv(out / "roots.csv")
    assert len(rows) == 1 and rows[0][0] == "R-2-2-4" and rows[0][-1] == "true"
    _, prof = check_csv(out / "profile_R-2-2-4_Q0_root0.csv")
    assert len(prof) == 201
    assert float(prof[0][0]) == -50.0 and float(prof[-1][0]) == 0.0
    assert (out / "resolved_config.ini").exists()


def test_equilibria_several_roots_for_positive_Q(tmp_path):
    Qs = ", ".join(Q_for(C) for C in [-0.01, -1.0, -10.0])
    code, out = run(tmp_path, "equilibria", f"[model]\nname = R-2-2\n[forcing]\nQ = {Qs}\n")
    assert code == 0
    _, rows = check_csv(out / "roots.csv")
    per_C = {}
    for r in rows:
        per_C[r[1]] = per_C.get(r[1], 0) + 1
    assert max(per_C.values()) >= 2
    check_all_csvs(out)


def test_equilibria_missing_Q(tmp_path, capsys):
    code, _ = run(tmp_path, "equilibria", "[model]\nname = R-2-2\n")
    assert code == 1
    assert "[forcing] Q" in capsys.readouterr().err


def test_equilibria_zero_Q_is_config_error(tmp_path, capsys):
    code, _ = run(tmp_path, "equilibria", "[forcing]\nQ = 0\n")
    assert code == 1
    assert "Q = 0" in capsys.readouterr().err


def test_equilibria_no_root_exit_2(tmp_path):
    text = "[forcing]\nQ = {}\n[equilibrium]\nR_lo = -1\nR_hi = 1\nextend = false\n".format(Q_for(1e-6))
    code, out = run(tmp_path, "equilibria", text)
    assert code == 2
    header, rows = check_csv(out / "roots.csv")
    assert rows == []


def test_unknown_key_exit_1_with_line(tmp_path, capsys):
    code, _ = run(tmp_path, "equilibria", "[forcing]\nQ = -1e-5\nwind = 3\n")
    assert code == 1
    assert "equilibria.ini:3" in capsys.readouterr().err


def test_bad_model_flag(tmp_path, capsys):
    code, _ = run(tmp_path, "equilibria", "[forcing]\nQ = -1e-5\n", "--model", "R-7")
    assert code == 1
    assert "--model" in capsys.readouterr().err


# ---------------------------------------------------------------- stability map

def test_map_single_point(tmp_path):
    text = "[stability]\nmodels = R-2-2\nR_lo = 0.5\nR_hi = 0.5\nR_points = 1\n"
    code, out = run(tmp_path, "stability-map", text)
    assert code == 0
    _, rows = check_csv(out / "stability_map.csv")
    assert len(rows) == 1 and rows[0][-1] == "Stable"
    script = (out / "plot_stability_map.py").read_text()
    compile(script, "plot_stability_map.py", "exec")


def test_map_default_zones(tmp_path):
    code, out = run(tmp_path, "stability-map", "")
    assert code == 0
    _, rows = check_csv(out / "stability_map.csv")
    assert len(rows) == 4 * 1501
    for name in ["R-2-1-3", "R-2-3", "R-2-2-4", "R-2-2"]:
        mine = [r for r in rows if r[0] == name]
        neg = {r[-1] for r in mine if float(r[1]) < 0}
        pos = {r[-1] for r in mine if float(r[1]) >= 0}
        assert pos == {"Stable"}
        assert "Unstable" in neg
        assert ("PhysicallyInvalid" in neg) == (name in ("R-2-1-3", "R-2-3"))


def test_map_pole_row_flagged(tmp_path):
    text = "[stability]\nmodels = R-2-2\nR_lo = -0.3\nR_hi = -0.1\nR_points = 21\n"
    code, out = run(tmp_path, "stability-map", text)
    assert code == 0
    _, rows = check_csv(out / "stability_map.csv")
    labels = [r[-1] for r in rows]
    assert labels.count("Pole") == 1
    pole = rows[labels.index("Pole")]
    assert pole[4] == "nan" and pole[13] == ""


def test_map_all_rows_fail_exit_2(tmp_path):
    text = "[stability]\nmodels = R-2-2\nR_lo = -0.2\nR_hi = -0.2\nR_points = 1\n"
    code, _ = run(tmp_path, "stability-map", text)
    assert code == 2


def test_map_C_sweep(tmp_path):
    text = "[stability]\nmodels = R-2-2\nsweep = C\nC_lo = -1\nC_hi = 1\nC_points = 3\n"
    code, out = run(tmp_path, "stability-map", text)
    assert code == 0
    _, rows = check_csv(out / "stability_map.csv")
    assert {float(r[3]) for r in rows} == {-1.0, 0.0, 1.0}


def test_map_empty_grid_exit_1(tmp_path):
    code, _ = run(tmp_path, "stability-map", "[stability]\nR_points = 0\n")
    assert code == 1


def test_map_byte_identical(tmp_path):
    text = "[stability]\nR_lo = -1\nR_hi = 1\nR_points = 101\n"
    run(tmp_path, "stability-map", text, out="a")
    run(tmp_path, "stability-map", text, out="b")
    for name in ["stability_map.csv", "plot_stability_map.py"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- simulate

SIM = "[model]\nname = {name}\n[forcing]\nQ = {Q}\n[column]\nt_end = {t_end}\ninitial = {initial}\n{extra}"


def sim_text(name="R-2-2-4", Q="-1e-5", t_end=86400, initial="perturbed", extra=""):
    return SIM.format(name=name, Q=Q, t_end=t_end, initial=initial, extra=extra)


def test_simulate_equilibrium(tmp_path):
    code, out = run(tmp_path, "simulate", sim_text(initial="equilibrium"))
    assert code == 0
    check_all_csvs(out)
    _, rows = read_csv(out / "timeseries.csv")
    assert len(rows) == math.ceil(86400 / 30 / 100) + 1
    assert max(float(r[3]) for r in rows) < 1e-10


def test_simulate_perturbed_and_seed(tmp_path):
    text = sim_text(extra="shape = random\n")
    run(tmp_path, "simulate", text, out="a")
    run(tmp_path, "simulate", text, out="b")
    run(tmp_path, "simulate", text, "--seed", "5", out="c")
    a = (tmp_path / "a" / "timeseries.csv").read_bytes()
    assert a == (tmp_path / "b" / "timeseries.csv").read_bytes()
    assert a != (tmp_path / "c" / "timeseries.csv").read_bytes()
    assert "seed = 5" in (tmp_path / "c" / "resolved_config.ini").read_text()


def test_simulate_zone_exit_3(tmp_path, capsys):
    # R-2-1-3 has three roots here; the middle one is linearly unstable
    text = sim_text(name="R-2-1-3", Q=Q_for(-0.2239), t_end=864000, extra="root_index = 1\nshape = random\n")
    code, out = run(tmp_path, "simulate", text)
    assert code == 3
    assert "f2 < 0" in capsys.readouterr().err or True
    check_all_csvs(out)


def test_simulate_from_file(tmp_path):
    code, first = run(tmp_path, "simulate", sim_text(t_end=3000), out="first")
    assert code == 0
    profile = first / "final_profile.csv"
    code, second = run(tmp_path, "simulate", sim_text(t_end=3000, initial="file",
                                                     extra=f"profile = {profile}\n"), out="second")
    assert code == 0
    _, rows = read_csv(second / "timeseries.csv")
    _, prev = read_csv(first / "timeseries.csv")
    # the file stores absolute values; the solver re-subtracts the bottom state
    assert [float(x) for x in rows[0][1:4]] == pytest.approx([float(x) for x in prev[-1][1:4]], rel=1e-12)


def test_simulate_bad_profile(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("z,u,v,rho\n0,0,0,1026\n")
    code, _ = run(tmp_path, "simulate", sim_text(initial="file", extra=f"profile = {bad}\n"))
    assert code == 1
    code, _ = run(tmp_path, "simulate", sim_text(initial="file"))
    assert code == 1


def test_simulate_needs_single_Q(tmp_path):
    code, _ = run(tmp_path, "simulate", sim_text(Q="-1e-5, -2e-5"))
    assert code == 1


def test_simulate_root_index_out_of_range(tmp_path):
    code, _ = run(tmp_path, "simulate", sim_text(extra="root_index = 4\n"))
    assert code == 1


# ---------------------------------------------------------------- validate

VAL = ("[validate]\nmodels = {models}\nR_lo = {lo}\nR_hi = {hi}\npoints = {n}\nsteady_steps = 200\n"
       "[column]\nt_end = 864000\n")


def test_validate_small_grid(tmp_path):
    code, out = run(tmp_path, "validate", VAL.format(models="R-2-2-4", lo=-0.3, hi=0.3, n=3))
    assert code == 0
    check_all_csvs(out)
    _, rows = read_csv(out / "validate.csv")
    assert [r[2] for r in rows] == ["Unstable", "Stable", "Stable"]
    assert rows[0][3] in ("growth", "zone-exit")
    assert [r[3] for r in rows[1:]] == ["decay", "decay"]
    assert all(r[-1] == "true" for r in rows)
    _, summary = read_csv(out / "validate_summary.csv")
    assert summary == [["3", "3", "1", summary[0][3]]]
    assert float(summary[0][3]) <= 1e-8


def test_validate_skips_invalid_points(tmp_path):
    code, out = run(tmp_path, "validate", VAL.format(models="R-2-1-3", lo=-1, hi=-1, n=1))
    assert code == 0
    _, rows = read_csv(out / "validate.csv")
    assert rows[0][2:4] == ["PhysicallyInvalid", "skipped"] and rows[0][-1] == ""
    _, summary = read_csv(out / "validate_summary.csv")
    assert summary[0][:3] == ["0", "0", "nan"]


def test_validate_empty_grid_exit_1(tmp_path, capsys):
    code, _ = run(tmp_path, "validate", VAL.format(models="R-2-2", lo=0, hi=1, n=0))
    assert code == 1
    assert "empty grid" in capsys.readouterr().err


# ---------------------------------------------------------------- config echo, entry point

def test_resolved_config_reproduces_run(tmp_path):
    text = "[model]\nname = R-2-3\n[forcing]\nQ = -1e-6\n[column]\nN = 50\n"
    code, out = run(tmp_path, "equilibria", text, out="a")
    assert code == 0
    resolved = out / "resolved_config.ini"
    code = main(["equilibria", "--config", str(resolved), "--out", str(tmp_path / "b")])
    assert code == 0
    for p in out.glob("*.csv"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert resolved.read_text().replace(str(tmp_path / "a"), "") == \
        (tmp_path / "b" / "resolved_config.ini").read_text().replace(str(tmp_path / "b"), "")


def test_model_flag_overrides(tmp_path):
    code, out = run(tmp_path, "equilibria", "[forcing]\nQ = -1e-5\n", "--model", "R-2-2")
    assert code == 0
    _, rows = read_csv(out / "roots.csv")
    assert rows[0][0] == "R-2-2"


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[forcing]\nQ = -1e-5\n")
    proc = subprocess.run([sys.executable, "-m", "mixstab", "equilibria", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "1 root(s)" in proc.stdout


def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "true" and fmt(np.bool_(False)) == "false"
    assert fmt(3) == "3" and fmt(None) == "" and fmt(float("nan")) == "nan"
    x = np.random.default_rng(0).standard_normal(100) * 1e-7
    assert all(float(fmt(v)) == v for v in x)


def test_csv_values_match_library(tmp_path):
    code, out = run(tmp_path, "equilibria", "[model]\nname = R-2-2\n[forcing]\nQ = -1e-5\n")
    _, rows = read_csv(out / "roots.csv")
    m = ClosureModel.named("R-2-2")
    R = float(rows[0][3])
    assert float(rows[0][4]) == m.f1(R) and float(rows[0][5]) == m.f2(R)
