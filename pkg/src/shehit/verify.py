"""The acceptance suite: one function per criterion, quick and full sizes.

Each check returns a :class:`CriterionResult`; nothing here depends on
wall-clock time except the separately reported ``seconds`` field.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import drift as dr
from . import field as gf
from . import hitting as ht
from . import modulus as mo
from . import potential as pt
from . import rng


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    summary: str
    seconds: float = 0.0
    budget: float = math.inf

    @property
    def in_budget(self):
        return self.seconds <= self.budget

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] criterion {self.number:2d} {self.name}: {self.summary} ({self.seconds:.1f} s)"


def _fmt(x):
    return f"{x:.4g}"


# ---------------------------------------------------------------------------
# 1-3: covariance structure and sampler
# ---------------------------------------------------------------------------

def covariance_identity(mode="full", seed=1):
    n = 1000 if mode == "full" else 200
    gen = rng.stream(seed, 0, 0, rng.AUXILIARY)
    p = np.column_stack([gen.uniform(0.1, 1.0, n), gen.uniform(0.0, 1.0, n)])
    q = np.column_stack([gen.uniform(0.1, 1.0, n), gen.uniform(0.0, 1.0, n)])
    st = gf.pair_stats_array(p, q, gf.SpectralModel(512), tol=math.inf)
    worst = float(np.max(st["identity_residual"]))
    return CriterionResult(1, "covariance identity", worst < 1e-10,
                           f"max relative residual {_fmt(worst)} over {n} pairs (< 1e-10)", budget=10)


def increment_sweep(mode="full", seed=0):
    m = 100 if mode == "full" else 30
    tau = np.geomspace(1e-8, 0.25, m)
    h = np.geomspace(1e-4, 0.25, m)
    T, H = np.meshgrid(tau, h, indexing="ij")
    p = np.column_stack([np.full(T.size, 0.5), np.full(T.size, 0.35)])
    q = np.column_stack([0.5 + T.ravel(), 0.35 + H.ravel()])
    g2 = gf.pair_stats_array(p, q)["gamma2"]
    delta = np.sqrt(T.ravel()) + H.ravel()
    ratio = g2 / delta
    slope = float(np.polyfit(np.log(delta), np.log(g2), 1)[0])
    ok = ratio.min() >= 0.1 and ratio.max() <= 10 and abs(slope - 1) <= 0.05
    return CriterionResult(2, "increment two-sidedness", bool(ok),
                           f"E/Delta in [{_fmt(ratio.min())}, {_fmt(ratio.max())}], slope {_fmt(slope)}",
                           budget=30)


def sampler_fidelity(mode="full", seed=3):
    n = 10_000 if mode == "full" else 2000
    spec = gf.FieldSpec.isotropic(1)
    grid = gf.GridSpec.regular(spec, 5, 9)
    ens = gf.sample_ensemble(spec, grid, seed, n, k_max=512)
    vals = ens.values[:, 0].reshape(n, -1)
    nodes = grid.nodes()
    gen = rng.stream(seed, 0, 0, rng.AUXILIARY)
    pairs = gen.choice(nodes.shape[0], size=(20, 2), replace=True)
    worst = 0.0
    for a, b in pairs:
        prod = vals[:, a] * vals[:, b]
        exact = float(gf.heat_covariance(nodes[a], nodes[b]))
        z = abs(prod.mean() - exact) / (prod.std(ddof=1) / math.sqrt(n))
        worst = max(worst, z)
    j = int(np.argmin(np.abs(grid.sites - 0.5)))
    x = ens.values[:, 0, -1, j]
    var_exact = float(gf.heat_covariance(np.array([spec.T, 0.5]), np.array([spec.T, 0.5])))
    z_var = abs(np.mean(x * x) - var_exact) / (np.std(x * x, ddof=1) / math.sqrt(n))
    ok = worst <= 3 and z_var <= 3
    return CriterionResult(3, "sampler fidelity", bool(ok),
                           f"worst probe |z| {_fmt(worst)}, variance at (T, 1/2) |z| {_fmt(z_var)}",
                           budget=120)


# ---------------------------------------------------------------------------
# 4-6: hitting and level sets
# ---------------------------------------------------------------------------

def small_ball_exponent(mode="full", seed=100):
    replicas = 100_000 if mode == "full" else 10_000
    spec = gf.FieldSpec.isotropic(2)
    ests = []
    for n in range(2, 7):
        box = ht.DyadicBox.containing(n, 0.5, 0.5)
        (a, b), (c, d) = box.time_interval, box.space_interval
        grid = gf.GridSpec.box(a, b, c, d, 17, 9)
        eps = 2.0 ** -n
        est, = ht.conditional_sweep(spec, grid, ht.Region.from_box(box), [ht.Ball(np.zeros(2), eps)],
                                    seed + n, replicas, exact=True)
        ests.append((eps, est))
    fit = ht.exponent_fit(ests)
    return CriterionResult(4, "small-ball exponent (d=2)", abs(fit.slope - 2) <= 0.3,
                           f"slope {_fmt(fit.slope)} +- {_fmt(fit.stderr)} (target 2 +- 0.3)",
                           budget=600), ests


def _polarity_grid(kind, eps, c=2.0):
    dx = c * eps * eps
    dt = dx * dx
    if kind == "t_section":
        nx = int(math.floor(1.0 / dx)) + 1
        return gf.GridSpec(np.array([1.0]), np.arange(nx) * dx), ht.Region.t_section(1.0, (0.0, 1.0))
    if kind == "x_section":
        nt = int(math.floor(0.25 / dt)) + 1
        return (gf.GridSpec(0.75 + np.arange(nt) * dt, np.array([0.5])),
                ht.Region.x_section(0.5, (0.75, 1.0)))
    nt = int(math.floor(0.25 / dt)) + 1
    nx = int(math.floor(0.5 / dx)) + 1
    return (gf.GridSpec(0.75 + np.arange(nt) * dt, 0.25 + np.arange(nx) * dx),
            ht.Region.full((0.75, 1.0), (0.25, 0.75)))


def polarity_ordering(mode="full", seed=10):
    """d = 8 slopes for the full region, a fixed-x and a fixed-t section."""
    if mode == "full":
        eps_list, replicas = [0.4, 0.3, 0.2, 0.15, 0.1], 2048
    else:
        eps_list, replicas = [0.4, 0.3, 0.25, 0.2], 1024
    spec = gf.FieldSpec.isotropic(8)
    z = np.zeros(8)
    slopes, all_ests = {}, {}
    for kind in ("full", "x_section", "t_section"):
        ests = []
        for i, eps in enumerate(eps_list):
            grid, region = _polarity_grid(kind, eps)
            exact = kind != "full"
            k_max = int(math.ceil(4.0 / (2.0 * eps * eps)))
            est, = ht.conditional_sweep(spec, grid, region, [ht.Ball(z, eps)], seed + i, replicas,
                                        k_max=k_max, exact=exact)
            ests.append((eps, est))
        slopes[kind] = ht.exponent_fit(ests)
        all_ests[kind] = ests
    s_f, s_x, s_t = (slopes[k].slope for k in ("full", "x_section", "t_section"))
    ok = s_f < s_x < s_t and abs(s_f - 2) <= 1 and abs(s_x - 4) <= 1 and abs(s_t - 6) <= 1
    return CriterionResult(5, "polarity ordering (d=8)", bool(ok),
                           f"full {_fmt(s_f)} < fixed-x {_fmt(s_x)} < fixed-t {_fmt(s_t)} "
                           "(targets 2, 4, 6 +- 1)", budget=1800), all_ests


def level_set_dimensions(mode="full", seed=7):
    spec = gf.FieldSpec.isotropic(1)
    paths = 64 if mode == "full" else 50
    if mode == "full":
        nx, nt, kx, kt = 2**14 + 1, 2**16, 2**14, 1024
    else:
        nx, nt, kx, kt = 2**12 + 1, 2**13, 2**12, 256
    t_sec = 0.05
    g_t = gf.GridSpec(np.array([t_sec]), np.linspace(0.0, 1.0, nx))
    clouds = [ht.level_set(gf.sample_path(spec, g_t, seed, kx, r), 0.0, None, ("t_section", t_sec))
              for r in range(paths)]
    lv = ht.resolved_levels(1.0, 1.0 / (nx - 1))
    d_t = ht.pooled_box_dimension(clouds, levels=lv)
    g_x = gf.GridSpec(np.linspace(0.5, 1.0, nt), np.array([0.5]))
    clouds = [ht.level_set(gf.sample_path(spec, g_x, seed + 1, kt, r, tail=True), 0.0, None,
                           ("x_section", 0.5)) for r in range(paths)]
    lv = ht.resolved_levels(0.5, 0.5 / (nt - 1))
    d_x = ht.pooled_box_dimension(clouds, levels=lv)
    ok = abs(d_t.dim - 0.5) <= 0.1 and abs(d_x.dim - 0.75) <= 0.1
    return CriterionResult(6, "level-set dimensions (d=1)", bool(ok),
                           f"fixed-t {_fmt(d_t.dim)} (0.5 +- 0.1), fixed-x {_fmt(d_x.dim)} "
                           f"(0.75 +- 0.1), {paths} paths each", budget=900)


# ---------------------------------------------------------------------------
# 7-9: potential theory
# ---------------------------------------------------------------------------

def capacity_oracle(mode="full", seed=0):
    n = 256 if mode == "full" else 64
    worst = 0.0
    for beta in (0.25, 0.5, 0.75):
        order = pt.KernelOrder.for_diameter(beta, 1.0)
        g = pt.GridSet.interval(0.0, 1.0, n)
        fw = pt.capacity_solve(g, order).value
        pg = pt.capacity_projected_gradient(g, order).value
        worst = max(worst, abs(fw / pg - 1))
    single = pt.capacity_solve(np.array([[0.3]]), pt.KernelOrder.for_diameter(0.5, 1.0)).value
    neg = pt.capacity_solve(np.array([[0.3], [0.7]]), pt.KernelOrder.for_diameter(-1.0, 1.0)).value
    ok = worst <= 0.05 and single == 0.0 and neg == 1.0
    return CriterionResult(7, "capacity oracle", bool(ok),
                           f"max FW/oracle deviation {_fmt(worst)} (< 5%), singleton {single}, "
                           f"beta<0 {neg}", budget=60)


def random_measures(count, seed, width=0.2, per_axis=9):
    """Random atoms on the mollifier-cell lattice in [-1, 1]^2."""
    gen = rng.stream(seed, 0, 0, rng.AUXILIARY)
    h = width / per_axis
    m = int(math.floor(2.0 / h))
    out = []
    for _ in range(count):
        k = int(gen.integers(2, 9))
        idx = gen.choice(m * m, size=k, replace=False)
        atoms = np.column_stack([idx // m, idx % m]) * h - 1.0
        out.append(pt.DiscreteMeasure(atoms, gen.dirichlet(np.ones(k))))
    return out


def smoothing_inequality(mode="full", seed=8):
    count = 100 if mode == "full" else 10
    viol = 0
    worst = 0.0
    for mu in random_measures(count, seed):
        for alpha in (0.5, 1.0, 1.5):
            r = pt.smoothing_check(mu, 0.2, alpha, semantics="cell")
            worst = max(worst, r.ratio)
            viol += r.after > r.before * (1 + 1e-12)
    return CriterionResult(8, "smoothing inequality", viol == 0,
                           f"{viol} violations in {3 * count} checks, max after/before {_fmt(worst)}",
                           budget=60)


def integral_ratios(mode="full", seed=0):
    n = 21 if mode == "full" else 7
    spreads = {}
    a_vals = np.geomspace(1e-2, 1.0, n)
    for beta in (4, 6, 8):
        for variant in ("space_time", "time_only"):
            r = np.array([pt.heat_integral_ratio(beta, a, variant) for a in a_vals])
            spreads[f"beta={beta} {variant}"] = float(r.max() / r.min())
    for nu in (0.5, 1, 2, 4):
        _, r = pt.psi_bound_ratios(nu, n=41 if mode == "full" else 11)
        spreads[f"nu={nu}"] = float(r.max() / r.min())
    worst = max(spreads.values())
    return CriterionResult(9, "integral-bound ratios", worst < 1e3,
                           f"max spread {_fmt(worst)} over {len(spreads)} sweeps (< 1e3)", budget=120)


# ---------------------------------------------------------------------------
# 10-11: modulus and Girsanov
# ---------------------------------------------------------------------------

def modulus_check(mode="full", seed=20):
    spec = gf.FieldSpec.isotropic(2)
    rep = mo.modulus_report(spec, seed, p=2, replicas=2000 if mode == "full" else 500,
                            holder_replicas=1000)
    ok = rep.band <= 4 and abs(rep.alpha_x - 0.5) <= 0.05 and abs(rep.alpha_t - 0.25) <= 0.05
    return CriterionResult(10, "modulus and Hölder exponents", bool(ok),
                           f"band {_fmt(rep.band)} (<= 4), alpha_x {_fmt(rep.alpha_x)}, "
                           f"alpha_t {_fmt(rep.alpha_t)}", budget=600), rep


def _girsanov_runs(spec, drift, grid, seed, n, k_max):
    w, probe_free, probe_drift = [], [], []
    j = int(np.argmin(np.abs(grid.sites - 0.5)))
    for r in range(n):
        path, noise = dr.simulate_drift(spec, drift, grid, seed, k_max, r)
        w.append(dr.girsanov_weight(path, noise, drift, spec, "to_free"))
        probe_drift.append(path.values[0, -1, j])
        free, noise_f = dr.simulate_drift(spec, dr.DriftSpec.zero(), grid, seed + 1, k_max, r)
        probe_free.append((free.values[0, -1, j],
                           dr.girsanov_weight(free, noise_f, drift, spec, "to_drift")))
    return np.array(w), np.array(probe_drift), np.array(probe_free)


def girsanov_consistency(mode="full", seed=7):
    n = 10_000 if mode == "full" else 2000
    spec = gf.FieldSpec.isotropic(1)
    grid = gf.GridSpec.regular(spec, 11, 17)
    k_max = 16
    zero_path, zero_noise = dr.simulate_drift(spec, dr.DriftSpec.zero(), grid, seed, k_max)
    w0 = dr.girsanov_weight(zero_path, zero_noise, dr.DriftSpec.zero(), spec)
    drift = dr.DriftSpec.constant(0.5)
    w, probe_drift, free = _girsanov_runs(spec, drift, grid, seed, n, k_max)
    w_mean, w_se = float(w.mean()), float(w.std(ddof=1) / math.sqrt(n))
    z_w = abs(w_mean - 1) / w_se
    rew = free[:, 0] * free[:, 1]
    diff = rew.mean() - probe_drift.mean()
    se = math.sqrt(rew.var(ddof=1) / n + probe_drift.var(ddof=1) / n)
    z_p = abs(diff) / se
    ok = w0 == 1.0 and z_w <= 3 and z_p <= 3
    return CriterionResult(11, "Girsanov consistency", bool(ok),
                           f"zero-drift weight {w0!r}, mean weight {_fmt(w_mean)} (|z| {_fmt(z_w)}), "
                           f"reweighted probe |z| {_fmt(z_p)}", budget=300)


CRITERIA = {
    1: covariance_identity,
    2: increment_sweep,
    3: sampler_fidelity,
    4: lambda mode="full", seed=100: small_ball_exponent(mode, seed)[0],
    5: lambda mode="full", seed=10: polarity_ordering(mode, seed)[0],
    6: level_set_dimensions,
    7: capacity_oracle,
    8: smoothing_inequality,
    9: integral_ratios,
    10: lambda mode="full", seed=20: modulus_check(mode, seed)[0],
    11: girsanov_consistency,
}


def run_criterion(number, mode="full"):
    t0 = time.perf_counter()
    res = CRITERIA[number](mode)
    res.seconds = time.perf_counter() - t0
    return res


def run_all(mode="quick", numbers=None, log=None):
    out = []
    for k in numbers or sorted(CRITERIA):
        res = run_criterion(k, mode)
        if log:
            log(res.line())
        out.append(res)
    return out
