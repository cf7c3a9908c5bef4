"""Sup increments, Garsia sums and Hölder fits."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shehit import field as gf
from shehit import modulus as mo


def _path(fn, times, sites):
    grid = gf.GridSpec(np.asarray(times, float), np.asarray(sites, float))
    tt, xx = np.meshgrid(grid.times, grid.sites, indexing="ij")
    return gf.SamplePath(fn(tt, xx)[None], grid)


# ---------------------------------------------------------------------------
# sup increments
# ---------------------------------------------------------------------------

def test_sup_increment_linear_in_space():
    p = _path(lambda t, x: x, [0.5], np.linspace(0, 1, 65))
    # Delta-ball of radius eps^2 reaches eps^2 in x
    assert mo.sup_increment(p, (0.5, 0.5), 0.25) == pytest.approx(1 / 16, abs=1e-15)


def test_sup_increment_linear_in_time():
    p = _path(lambda t, x: t, np.linspace(0.25, 0.75, 33), [0.5])
    assert mo.sup_increment(p, (0.5, 0.5), 0.5) == pytest.approx(1 / 16, abs=1e-15)


@given(st.floats(0.17, 0.6), st.floats(1.01, 1.5))
def test_sup_increment_monotone_in_radius(eps, grow):
    rng = np.random.default_rng(4)
    grid_t = np.linspace(0.3, 0.7, 41)
    grid_x = np.linspace(0.0, 1.0, 41)
    vals = rng.standard_normal((2, 41, 41))
    p = gf.SamplePath(vals, gf.GridSpec(grid_t, grid_x))
    a = mo.sup_increment(p, (0.5, 0.5), eps)
    b = mo.sup_increment(p, (0.5, 0.5), eps * grow)
    assert b >= a


def test_sup_increment_single_identical_neighbour():
    p = _path(lambda t, x: np.full_like(x, 2.5), [0.5], [0.5, 0.52])
    assert mo.sup_increment(p, (0.5, 0.5), 0.15) == 0.0


def test_sup_increment_refusals():
    p = _path(lambda t, x: x, [0.5], np.linspace(0, 1, 5))
    with pytest.raises(mo.ModulusError, match="only its center"):
        mo.sup_increment(p, (0.5, 0.5), 0.1)
    with pytest.raises(mo.ModulusError, match="grid node"):
        mo.sup_increment(p, (0.5, 0.4), 0.9)
    with pytest.raises(ValueError):
        mo.sup_increment(p, (0.5, 0.5), 0.0)


def test_local_grid_reach():
    g = mo.local_grid((0.5, 0.5), 0.25)
    assert g.times[0] == pytest.approx(0.5 - 0.25 ** 4)
    assert g.sites[-1] == pytest.approx(0.5 + 0.25 ** 2)
    with pytest.raises(mo.ModulusError):
        mo.local_grid((0.001, 0.5), 0.5)


@pytest.mark.parametrize("p", [1, 2, 4])
def test_moment_band_and_scaling(p):
    spec = gf.FieldSpec.isotropic(1)
    eps = [2.0 ** -k for k in range(2, 7)]
    mr = mo.moment_ratios(spec, (0.5, 0.5), eps, p=p, replicas=1000, seed=3)
    ratios = [r for r, _ in mr]
    assert max(ratios) / min(ratios) <= 4.0
    assert all(0.3 < r < 5 for r in ratios)


# ---------------------------------------------------------------------------
# Garsia functional
# ---------------------------------------------------------------------------

def _small_grid(n=5, L=0.25):
    return gf.GridSpec.box(0.5, 0.5 + L * L, 0.5 - L / 2, 0.5 + L / 2, (n - 1) ** 2 + 1, n)


def test_garsia_constant_path_is_zero():
    g = _small_grid()
    p = gf.SamplePath(np.full((1, g.nt, g.nx), 3.0), g)
    assert mo.garsia_functional(p, 8, 0.1) == 0.0


def test_garsia_brute_force():
    g = gf.GridSpec(np.array([0.5, 0.51, 0.53]), np.array([0.2, 0.3]), uniform=False)
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((1, 3, 2))
    p = gf.SamplePath(vals, g)
    tt, xx = np.meshgrid(g.times, g.sites, indexing="ij")
    wt = np.array([0.005, 0.015, 0.01])
    ws = np.array([0.05, 0.05])
    m = np.outer(wt, ws).ravel()
    f, t, x = vals[0].ravel(), tt.ravel(), xx.ravel()
    want = 0.0
    for i in range(6):
        for j in range(6):
            if i != j:
                dl = math.sqrt(abs(t[i] - t[j])) + abs(x[i] - x[j])
                want += m[i] * m[j] * abs(f[i] - f[j]) ** 8 / dl ** (6 + 0.1 * 8)
    assert mo.garsia_functional(p, 8, 0.1) == pytest.approx(want, rel=1e-12)


def test_garsia_needs_p_above_six():
    g = _small_grid()
    p = gf.SamplePath(np.zeros((1, g.nt, g.nx)), g)
    with pytest.raises(ValueError):
        mo.garsia_functional(p, 6, 0.1)


def test_garsia_backends_agree(both_backends):
    g = _small_grid(9)
    path = gf.sample_grid_exact(gf.FieldSpec.isotropic(1), g, 5, 1).path(0)
    out = both_backends(lambda: mo.garsia_functional(path, 8, 0.05))
    vals = list(out.values())
    assert vals[0] == pytest.approx(vals[-1], rel=1e-10)


def test_garsia_sample_mean_matches_exact_expectation():
    g = _small_grid(5)
    spec = gf.FieldSpec.isotropic(1)
    ens = gf.sample_grid_exact(spec, g, 11, 4096)
    c = np.array([mo.garsia_functional(ens.path(r), 8, 0.05) for r in range(len(ens))])
    exact = mo.garsia_expectation(g, 8, 0.05)
    se = c.std(ddof=1) / math.sqrt(c.size)
    assert abs(c.mean() - exact) < 4 * se


def test_garsia_expectation_sigma_scaling():
    g = _small_grid(5)
    base = mo.garsia_expectation(g, 8, 0.05)
    sig = np.diag([2.0, 1.0])
    assert mo.garsia_expectation(g, 8, 0.05, sigma=sig) == pytest.approx(2.0 ** 8 * base, rel=1e-12)


def test_garsia_expectation_under_parabolic_refinement():
    # halving the space step and quartering the time step
    coarse, fine = _small_grid(5), _small_grid(9)
    low = [mo.garsia_expectation(g, 8, 0.05) for g in (coarse, fine)]
    assert abs(low[1] / low[0] - 1) < 0.1
    # above the critical alpha = 1/2 - 3/p the sum keeps growing
    for alpha in (0.3, 0.6):
        high = [mo.garsia_expectation(g, 8, alpha) for g in (coarse, fine)]
        assert high[1] / high[0] > 2.0


@pytest.mark.xfail(strict=True, reason="alpha = 0.1 sits just below the critical 1/8 for p = 8; "
                   "the sum converges slowly and still moves by >10% per refinement at "
                   "affordable grids (0.427, 0.548, 0.621)")
def test_garsia_alpha_tenth_within_ten_percent():
    coarse, fine = _small_grid(5), _small_grid(9)
    vals = [mo.garsia_expectation(g, 8, 0.1) for g in (coarse, fine)]
    assert abs(vals[1] / vals[0] - 1) < 0.1


def test_garsia_alpha_tenth_bounded_growth():
    # subcritical, so growth per refinement must shrink
    vals = [mo.garsia_expectation(_small_grid(n), 8, 0.1) for n in (3, 5, 9)]
    steps = np.diff(vals)
    assert np.all(steps > 0) and steps[1] < steps[0]


def test_garsia_bound_holds_pathwise():
    g = _small_grid(5)
    ens = gf.sample_grid_exact(gf.FieldSpec.isotropic(1), g, 2, 20)
    rng = np.random.default_rng(1)
    for r in range(len(ens)):
        path = ens.path(r)
        C = mo.garsia_functional(path, 8, 0.05)
        for _ in range(5):
            i, j = rng.integers(g.nt, size=2)
            k, m = rng.integers(g.nx, size=2)
            a, b = (g.times[i], g.sites[k]), (g.times[j], g.sites[m])
            lhs = abs(path.values[0, i, k] - path.values[0, j, m])
            assert lhs <= mo.garsia_bound(path, a, b, 8, 0.05, C=C) + 1e-12


# ---------------------------------------------------------------------------
# Hölder fits
# ---------------------------------------------------------------------------

def _random_walk_ensemble(axis, R=1200, n=129, seed=0):
    rng = np.random.default_rng(seed)
    steps = rng.standard_normal((R, n - 1))
    walk = np.concatenate([np.zeros((R, 1)), np.cumsum(steps, axis=1)], axis=1) / math.sqrt(n)
    coord = np.linspace(0.4, 0.6, n)
    if axis == "time":
        grid = gf.GridSpec(coord, np.array([0.5]))
        vals = walk[:, None, :, None]
    else:
        grid = gf.GridSpec(np.array([0.5]), coord)
        vals = walk[:, None, None, :]
    return gf.SampleEnsemble(vals, grid)


@pytest.mark.parametrize("axis", ["time", "space"])
def test_holder_fit_brownian(axis):
    fit = mo.holder_fit(_random_walk_ensemble(axis), axis, index=0)
    assert fit.alpha == pytest.approx(0.5, abs=0.03)


def test_holder_fit_refusals():
    ens = _random_walk_ensemble("time", R=50)
    with pytest.raises(mo.ModulusError, match="paths"):
        mo.holder_fit(ens, "time", index=0)
    with pytest.raises(mo.ModulusError, match="lags"):
        mo.holder_fit(ens, "time", lags=[1, 2], index=0, min_paths=10)
    with pytest.raises(ValueError):
        mo.holder_fit(ens, "diagonal", index=0, min_paths=10)
    bent = gf.SampleEnsemble(ens.values, gf.GridSpec(np.linspace(0.4, 0.6, 129) ** 2, np.array([0.5]), uniform=False))
    with pytest.raises(mo.ModulusError, match="uniform"):
        mo.holder_fit(bent, "time", index=0, min_paths=10)


def test_field_exponents_half_and_quarter():
    rep = mo.modulus_report(gf.FieldSpec.isotropic(1), 5, eps_grid=[0.25, 0.125, 0.0625],
                            replicas=500, holder_replicas=1000)
    assert rep.alpha_x == pytest.approx(0.5, abs=0.05)
    assert rep.alpha_t == pytest.approx(0.25, abs=0.05)
    assert rep.band <= 4
    joint = math.hypot(rep.alpha_t_se, rep.alpha_x_se / 2)
    assert abs(rep.alpha_t - rep.alpha_x / 2) <= 2 * joint


def test_report_validation(tmp_path):
    with pytest.raises(ValueError):
        mo.ModulusReport([0.1], [0.0], 0.25, 0.0, 0.5, 0.0, 2)
    with pytest.raises(ValueError):
        mo.ModulusReport([0.1], [1.0], 1.2, 0.0, 0.5, 0.0, 2)
    rep = mo.ModulusReport([0.1, 0.05], [1.0, 1.5], 0.25, 0.01, 0.5, 0.01, 2, [0.1, 0.1])
    rep.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "quantity,eps,value,stderr" and len(lines) == 5
    assert rep.band == 1.5
