import math

import pytest

import octomini


def test_parse_config_flags():
    c = octomini.parse_config(["--problem", "sedov", "--subgrid", "8", "--level", "3"])
    assert c.problem == "sedov"
    assert c.subgrid == 8
    assert c.level == 3


def test_invalid_subgrid_names_the_field():
    with pytest.raises(octomini.ConfigError, match="subgrid"):
        octomini.parse_config(["--subgrid", "9"])


def test_zero_step_run():
    c = octomini.RunConfig()
    c.level = 1
    c.steps = 0
    r = octomini.run(c)
    assert r.steps_completed == 0
    assert len(r.rows) == 1
    assert r.rows[0].totals.mass == pytest.approx(1.0, rel=1e-13)
    assert r.cells == 4096


def test_short_blast_conserves_mass(tmp_path):
    c = octomini.RunConfig()
    c.level = 1
    c.steps = 3
    c.out_dir = str(tmp_path)
    r = octomini.run(c)
    assert r.steps_completed == 3
    assert r.mass_drift() <= 1e-12
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,time,dt,wall_seconds")
    assert r.csv().splitlines()[0] == header


def test_sedov_helpers():
    assert octomini.sedov_xi0(5.0 / 3.0) == pytest.approx(1.1517, rel=1e-4)
    R = octomini.sedov_shock_radius(0.1)
    rho, v, p = octomini.sedov_analytic(0.1, 0.5 * R)
    assert 0 < rho < 6 and v > 0 and p > 0
    assert octomini.sedov_analytic(0.1, 2 * R) == (1.0, 0.0, 0.0)
    assert octomini.dynamical_time(4.0) == 0.5
    assert math.isfinite(octomini.sedov_xi0(1.4))


def test_resume_from_missing_checkpoint():
    c = octomini.RunConfig()
    c.level = 1
    c.resume = "/nonexistent/octomini.ck"
    with pytest.raises(octomini.IoError):
        octomini.run(c)
