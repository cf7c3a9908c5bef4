import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from shehit import field as gf
from shehit import hitting as ht
from shehit import rng


# -- dyadic boxes -------------------------------------------------------------------------

def test_dyadic_box_counts_and_shape():
    boxes = ht.dyadic_boxes(1)
    assert len(boxes) == 64
    b = boxes[0]
    assert b.time_side == b.space_side**2
    fine = ht.dyadic_boxes(2, b.time_interval, b.space_interval)
    assert len(fine) == 2**4 * 2**2
    assert all(f.k // 16 == b.k and f.l // 4 == b.l for f in fine)
    with pytest.raises(ValueError):
        ht.dyadic_boxes(0)


@given(st.integers(1, 6), st.floats(0, 0.999), st.floats(0, 0.999))
def test_containing_box_is_half_open(n, t, x):
    b = ht.DyadicBox.containing(n, t, x)
    assert b.contains(t, x)
    assert not b.contains(b.time_interval[1], x)
    assert b.contains(b.time_interval[0], b.space_interval[0])


# -- estimates -------------------------------------------------------------------------------

def test_wilson_interval():
    lo, hi = ht.wilson_interval(0, 100)
    assert lo == 0 and 0 < hi < 0.05
    lo, hi = ht.wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)
    with pytest.raises(ValueError):
        ht.wilson_interval(1, 0)


def _ensemble(d=2, n=400, seed=1):
    spec = gf.FieldSpec.isotropic(d)
    grid = gf.GridSpec.box(0.5, 0.6, 0.2, 0.4, 5, 9)
    return gf.sample_grid_exact(spec, grid, seed, n)


def test_trivial_targets():
    ens = _ensemble()
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    big = ht.hit_probability(ens, ht.Ball(np.zeros(2), 1e6), region, floor_factor=0)
    assert big.p_hat == 1.0 and big.n_hits == big.n_trials
    far = ht.hit_probability(ens, ht.Ball(np.full(2, 1e6 / math.sqrt(2)), 1.0), region,
                             floor_factor=0)
    assert far.p_hat == 0.0 and far.ci_low == 0.0


def test_resolution_floor_refuses():
    ens = _ensemble()
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    with pytest.raises(ht.ResolutionError, match="refine"):
        ht.hit_probability(ens, ht.Ball(np.zeros(2), 1e-3), region)


def test_monotone_in_target_and_region():
    ens = _ensemble(n=1000)
    full = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    sec = ht.Region.t_section(0.55, (0.2, 0.4))
    node = ht.Region.node(0.55, 0.3)
    prev = -1.0
    for eps in (0.1, 0.2, 0.3, 0.5):
        p = ht.hit_probability(ens, ht.Ball(np.zeros(2), eps), full, floor_factor=0).p_hat
        assert p >= prev
        prev = p
    tg = ht.Ball(np.zeros(2), 0.3)
    pf, ps, pn = (ht.hit_probability(ens, tg, r, floor_factor=0).p_hat for r in (full, sec, node))
    assert pf >= ps >= pn


def test_symmetry_of_levels():
    ens = _ensemble(d=1, n=4000, seed=3)
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    a = ht.hit_probability(ens, ht.Ball([0.6], 0.1), region, floor_factor=0)
    b = ht.hit_probability(ens, ht.Ball([-0.6], 0.1), region, floor_factor=0)
    assert abs(a.p_hat - b.p_hat) <= 3 * math.hypot(a.se, b.se)


def test_bias_bound_reported():
    ens = _ensemble()
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    est = ht.hit_probability(ens, ht.Ball(np.zeros(2), 0.3), region, floor_factor=0)
    assert est.increment > 0 and est.bias_bound is not None and est.bias_bound >= 0


def test_point_target():
    ens = _ensemble(n=200)
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    tgt = ht.PointTarget(np.array([[0.0, 0.0], [5.0, 5.0]]), 0.3)
    ball = ht.Ball(np.zeros(2), 0.3)
    a = ht.hit_probability(ens, tgt, region, floor_factor=0, widen=False)
    b = ht.hit_probability(ens, ball, region, floor_factor=0, widen=False)
    assert a.p_hat >= b.p_hat


# -- conditional estimator ------------------------------------------------------------------------

def _union_of_intervals(lo_hi, v):
    # exact Gaussian mass of a union of intervals, N(0, v)
    ivs = sorted(lo_hi)
    merged = [list(ivs[0])]
    for a, b in ivs[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    s = math.sqrt(v)
    return sum(norm.cdf(b / s) - norm.cdf(a / s) for a, b in merged)


def test_karp_luby_single_ball_is_exact():
    from scipy.stats import ncx2
    gen = rng.stream(0, 0, 0, rng.AUXILIARY)
    w = np.array([[0.3, -0.1, 0.2]])
    tgt = ht.Ball(np.zeros(3), 0.4)
    v = 0.2
    got = ht.conditional_hit_prob(w, tgt, v, gen)
    c = tgt.center - w[0]
    ref = ncx2.cdf(0.16 / v, 3, c @ c / v)
    assert got == pytest.approx(ref, rel=1e-12)


def test_karp_luby_union_unbiased_d1():
    w = np.array([[0.0], [0.15], [0.5], [0.52]])
    tgt = ht.Ball([0.1], 0.1)
    v = 0.3
    exact = _union_of_intervals([(0.1 - wi - 0.1, 0.1 - wi + 0.1) for wi in w[:, 0]], v)
    gen = rng.stream(7, 0, 0, rng.AUXILIARY)
    centers = np.broadcast_to((tgt.center - w)[None], (20_000, 4, 1)).copy()
    ys = ht._karp_luby_block(centers, tgt.eps, v, gen, 1)
    assert abs(ys.mean() - exact) <= 3 * ys.std() / math.sqrt(ys.size)
    assert np.all(ys >= 0) and np.all(ys <= 4 * ys.max())


def test_conditional_agrees_with_grid_estimate():
    spec = gf.FieldSpec.isotropic(2)
    grid = gf.GridSpec.box(0.5, 0.52, 0.3, 0.4, 3, 5)
    region = ht.Region.full((0.5, 0.52), (0.3, 0.4))
    tg = ht.Ball(np.array([0.4, 0.0]), 0.25)
    n = 4096
    plain = gf.sample_grid_exact(spec, grid, 1, n)
    g = ht.hit_probability(plain, tg, region, floor_factor=0, widen=False)
    free = ht.level_free_ensemble(spec, grid, 2, n, exact=True)
    c = ht.hit_probability(free, tg, region, floor_factor=0, method="conditional", seed=2,
                          widen=False)
    assert c.se < g.se
    assert abs(c.p_hat - g.p_hat) <= 3 * math.hypot(c.se, g.se)
    swept, = ht.conditional_sweep(spec, grid, region, [tg], 2, n, exact=True)
    assert swept.p_hat == pytest.approx(c.p_hat, rel=1e-12)


def test_conditional_sweep_chunk_independent():
    spec = gf.FieldSpec.isotropic(3)
    grid = gf.GridSpec(np.array([1.0]), np.linspace(0, 1, 9))
    region = ht.Region.t_section(1.0)
    tgs = [ht.Ball(np.zeros(3), e) for e in (0.2, 0.3)]
    a = ht.conditional_sweep(spec, grid, region, tgs, 5, 2048, chunk=1024)
    b = ht.conditional_sweep(spec, grid, region, tgs, 5, 2048, chunk=2048)
    assert [e.p_hat for e in a] == [e.p_hat for e in b]
    with pytest.raises(ValueError):
        ht.conditional_sweep(spec, grid, region, tgs, 5, 10, chunk=100)


def test_conditional_needs_level_free_ensemble():
    ens = _ensemble()
    region = ht.Region.full((0.5, 0.6), (0.2, 0.4))
    with pytest.raises(ValueError):
        ht.hit_probability(ens, ht.Ball(np.zeros(2), 0.3), region, floor_factor=0,
                           method="conditional")


# -- exponent fit ---------------------------------------------------------------------------------

def _synthetic(ps, eps, hits=1000):
    return [(e, ht.HitEstimate(p, p * 0.95, p * 1.05, 10**6, hits, e)) for e, p in zip(eps, ps)]


def test_exponent_fit_synthetic():
    eps = [0.4, 0.3, 0.2, 0.1]
    fit = ht.exponent_fit(_synthetic([e**2 for e in eps], eps))
    assert fit.slope == pytest.approx(2.0, abs=1e-12) and fit.stderr < 1e-10
    fit = ht.exponent_fit(_synthetic([0.3] * 4, eps))
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_exponent_fit_drops_and_refuses():
    eps = [0.5, 0.4, 0.3, 0.2, 0.1]
    ests = _synthetic([e**2 for e in eps], eps)
    ests[-1] = (0.1, ht.HitEstimate(0.01, 0.0, 0.05, 100, 1, 0.1))
    with pytest.warns(RuntimeWarning, match="too few hits"):
        fit = ht.exponent_fit(ests)
    assert fit.dropped_eps == [0.1] and len(fit.used_eps) == 4
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ht.FitError):
            ht.exponent_fit(ests[1:])


def test_estimates_csv_dialect(tmp_path):
    ests = [e for _, e in _synthetic([0.1, 0.05], [0.3, 0.2])]
    ht.write_estimates_csv(tmp_path / "e.csv", ests)
    raw = (tmp_path / "e.csv").read_bytes()
    assert raw.startswith(b"eps,p_hat,ci_low,ci_high,n_trials,n_hits")
    assert b"\r\n" not in raw and raw.count(b"\n") == 3


# -- level sets and box counting ----------------------------------------------------------------

def _path(values, times, sites):
    grid = gf.GridSpec(np.asarray(times, float), np.asarray(sites, float), uniform=False)
    return gf.SamplePath(np.asarray(values, float), grid)


def test_level_set_examples():
    p = _path(np.full((1, 3, 4), 2.0), [0.1, 0.2, 0.3], [0, 0.3, 0.6, 1])
    assert p.values.shape == (1, 3, 4)
    full = ht.level_set(p, 2.0, tol=1e-9)
    assert full.coords.shape[0] == 12
    assert ht.level_set(p, 100.0, tol=1e-3).coords.shape[0] == 0


def test_level_set_crossings_and_sections():
    x = np.linspace(0, 1, 11)
    vals = np.sin(2 * np.pi * x - 0.3)[None, None, :] * np.ones((1, 2, 1))
    p = _path(vals, [0.5, 1.0], x)
    cloud = ht.level_set(p, 0.0, None, ("t_section", 1.0))
    row = vals[0, 1]
    idx = {int(round(v * 10)) for v in cloud.coords[:, 0]}
    # every selected node sits next to a sign change of the row
    for j in idx:
        nbrs = [k for k in (j - 1, j + 1) if 0 <= k < row.size]
        assert any(row[j] * row[k] <= 0 for k in nbrs)
    # and every sign change contributes both of its nodes
    for j in range(row.size - 1):
        if row[j] * row[j + 1] < 0:
            assert {j, j + 1} <= idx
    proj = ht.level_set(p, 0.0, None, "X_projection")
    assert proj.coords.shape[0] == cloud.coords.shape[0]


def test_level_set_tolerance_floor():
    p = _path(np.zeros((1, 2, 2)), [0.5, 1.0], [0, 1])
    with pytest.raises(ValueError):
        ht.level_set(p, 0.0, tol=1e-4, floor=1e-3)


def test_box_dimension_line():
    cloud = ht.LevelSetCloud(np.linspace(0, 1, 4097)[:, None], ("x",), "full", np.zeros(1), 0.0)
    fit = ht.box_dimension(cloud, levels=range(2, 10))
    assert fit.dim == pytest.approx(1.0, abs=0.05)


def test_box_dimension_plane_and_parabolic():
    g = np.linspace(0, 1, 257, endpoint=False)
    tt, xx = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([tt.ravel(), xx.ravel()])
    cloud = ht.LevelSetCloud(pts, ("t", "x"), "full", np.zeros(1), 0.0)
    assert ht.box_dimension(cloud, levels=range(1, 7)).dim == pytest.approx(2.0, abs=0.05)
    # parabolic boxes 4^-n x 2^-n: a filled square has dimension 3
    par = ht.box_dimension(cloud, "parabolic", levels=range(1, 5))
    assert par.dim == pytest.approx(3.0, abs=0.05)


def test_box_counts_monotone():
    gen = np.random.default_rng(0)
    pts = gen.uniform(0, 1, (500, 2))
    counts = ht.box_counts(pts, ("t", "x"), "euclidean", range(0, 8))
    assert all(a <= b for a, b in zip(counts, counts[1:]))


def test_box_dimension_refusals():
    few = ht.LevelSetCloud(np.linspace(0, 1, 50)[:, None], ("x",), "full", np.zeros(1), 0.0)
    with pytest.raises(ht.FitError):
        ht.box_dimension(few)
    many = ht.LevelSetCloud(np.linspace(0, 1, 500)[:, None], ("x",), "full", np.zeros(1), 0.0)
    with pytest.raises(ht.FitError):
        ht.box_dimension(many, levels=range(2, 5))


def test_resolved_levels():
    lv = ht.resolved_levels(1.0, 1.0 / 16384)
    assert lv[0] == 2 and 2.0 ** -lv[-1] >= 64 / 16384


def test_t_section_zero_set_nonempty_at_T():
    spec = gf.FieldSpec.isotropic(1)
    grid = gf.GridSpec(np.array([1.0]), np.linspace(0, 1, 257))
    hits = [ht.level_set(gf.sample_path(spec, grid, 3, 256, r), 0.0, None, ("t_section", 1.0))
            .coords.shape[0] > 0 for r in range(200)]
    # v(T, .) ranges over an interval of width ~ sqrt(T) around a N(0, T) level;
    # empty zero sets are possible but must not dominate
    assert np.mean(hits) > 0.2


def test_pooled_dimension_t_section_small():
    spec = gf.FieldSpec.isotropic(1)
    grid = gf.GridSpec(np.array([0.05]), np.linspace(0, 1, 4097))
    clouds = [ht.level_set(gf.sample_path(spec, grid, 7, 4096, r), 0.0, None, ("t_section", 0.05))
              for r in range(50)]
    fit = ht.pooled_box_dimension(clouds, levels=ht.resolved_levels(1.0, 1 / 4096))
    assert fit.dim == pytest.approx(0.5, abs=0.1)
