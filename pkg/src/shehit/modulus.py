"""Sup-increment moments, the Garsia functional and Hölder-exponent fits."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import field as gf
from . import kernels


class ModulusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Grid-cell increments
# ---------------------------------------------------------------------------

def _neighbour_pairs(grid, mask=None, limit=4096):
    nt, nx = grid.nt, grid.nx
    idx = np.argwhere(mask) if mask is not None else np.argwhere(np.ones((nt, nx), bool))
    if idx.shape[0] > limit:
        idx = idx[np.linspace(0, idx.shape[0] - 1, limit).astype(int)]
    ps, qs = [], []
    for dn, dj in ((1, 0), (0, 1), (1, 1)):
        ok = (idx[:, 0] + dn < nt) & (idx[:, 1] + dj < nx)
        a = idx[ok]
        ps.append(np.column_stack([grid.times[a[:, 0]], grid.sites[a[:, 1]]]))
        qs.append(np.column_stack([grid.times[a[:, 0] + dn], grid.sites[a[:, 1] + dj]]))
    return np.concatenate(ps), np.concatenate(qs)


def cell_increment(spec, grid, region=None):
    """Predicted rms increment of ``u`` across one grid cell.

    ``sqrt(tr(sigma sigma^T) * max gamma^2)`` over neighbouring node pairs
    (time, space and diagonal) inside ``region``; exact covariance.
    """
    if grid.nt == 1 and grid.nx == 1:
        return 0.0
    mask = region.mask(grid) if region is not None else None
    p, q = _neighbour_pairs(grid, mask)
    if p.shape[0] == 0:
        p, q = _neighbour_pairs(grid, None)
    if p.shape[0] == 0:
        return 0.0
    g2 = gf.pair_stats_array(p, q)["gamma2"]
    tr = float(np.trace(spec.sigma @ spec.sigma.T))
    return math.sqrt(tr * float(np.max(g2)))


# ---------------------------------------------------------------------------
# Sup increments over parabolic balls
# ---------------------------------------------------------------------------

def delta_ball_mask(grid, center, radius):
    """Nodes with ``sqrt|t - t_c| + |x - x_c| <= radius``."""
    t, x = center
    dd = np.sqrt(np.abs(grid.times[:, None] - t)) + np.abs(grid.sites[None, :] - x)
    return dd <= radius * (1 + 1e-12)


def _center_index(grid, center):
    n = int(np.argmin(np.abs(grid.times - center[0])))
    j = int(np.argmin(np.abs(grid.sites - center[1])))
    if abs(grid.times[n] - center[0]) > 1e-12 * max(1.0, center[0]) or abs(grid.sites[j] - center[1]) > 1e-12:
        raise ModulusError("center must be a grid node")
    return n, j


def sup_increment(path, center, eps):
    """``max ||u(node) - u(center)||`` over grid nodes with ``Delta <= eps^2``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    grid = path.grid
    n, j = _center_index(grid, center)
    ball = delta_ball_mask(grid, (grid.times[n], grid.sites[j]), eps * eps)
    if ball.sum() < 2:
        raise ModulusError("the Delta-ball holds only its center")
    vals = np.asarray(path.values)
    diff = vals[:, ball] - vals[:, n, j][:, None]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=0))))


def local_grid(center, eps, n=9):
    """Uniform ``n x n`` grid spanning the ``Delta <= eps^2`` ball about ``center``."""
    t, x = center
    reach_t, reach_x = eps ** 4, eps ** 2
    t_lo, t_hi = t - reach_t, t + reach_t
    if t_lo <= 0:
        raise ModulusError("ball reaches t <= 0")
    x_lo, x_hi = max(0.0, x - reach_x), min(1.0, x + reach_x)
    return gf.GridSpec.box(t_lo, t_hi, x_lo, x_hi, n, n)


def sup_increment_samples(spec, center, eps, replicas, seed, n=9):
    """Sup increments over ``replicas`` exact samples on a local grid."""
    grid = local_grid(center, eps, n)
    ens = gf.sample_grid_exact(spec, grid, seed, replicas)
    c = (grid.times[n // 2], grid.sites[n // 2]) if grid.sites[0] > 0 and grid.sites[-1] < 1 else center
    ci, cj = _center_index(grid, c)
    ball = delta_ball_mask(grid, (grid.times[ci], grid.sites[cj]), eps * eps)
    diff = ens.values[:, :, ball] - ens.values[:, :, ci, cj][:, :, None]
    return np.sqrt(np.max(np.sum(diff * diff, axis=1), axis=1))


def moment_ratios(spec, center, eps_list, p=2, replicas=2000, seed=0, n=9):
    """``E[sup^p]^{1/p} / eps`` and its standard error per radius."""
    out = []
    for i, eps in enumerate(eps_list):
        s = sup_increment_samples(spec, center, eps, replicas, seed + i, n)
        mp = float(np.mean(s ** p))
        se_mp = float(np.std(s ** p, ddof=1) / math.sqrt(len(s)))
        ratio = mp ** (1.0 / p) / eps
        out.append((ratio, ratio * se_mp / (p * mp)))
    return out


# ---------------------------------------------------------------------------
# Garsia functional
# ---------------------------------------------------------------------------

def _cell_masses(grid):
    """Trapezoid-style cell areas: each node owns half of each adjacent gap."""
    def own(a):
        if a.size == 1:
            return np.ones(1)
        gaps = np.diff(a)
        w = np.zeros(a.size)
        w[:-1] += gaps / 2
        w[1:] += gaps / 2
        return w
    return np.outer(own(grid.times), own(grid.sites))


def _flat_nodes(grid, region):
    mask = region.mask(grid) if region is not None else np.ones((grid.nt, grid.nx), bool)
    tt, xx = np.meshgrid(grid.times, grid.sites, indexing="ij")
    return mask, tt[mask], xx[mask], _cell_masses(grid)[mask]


def garsia_functional(path, p, alpha, region=None, component=0):
    """Grid sum of ``|u_i(a) - u_i(b)|^p / Delta(a, b)^(6 + alpha p)``.

    Each node carries its cell area as mass. Raises ``FloatingPointError``
    when the sum is not finite or exceeds 1e300.
    """
    if p <= 6:
        raise ValueError("need p > 6")
    mask, tt, xx, mass = _flat_nodes(path.grid, region)
    vals = np.asarray(path.values)[component][mask]
    c = kernels.garsia_sum(vals, tt, xx, mass, p, 6.0 + alpha * p)
    if not math.isfinite(c) or c > 1e300:
        raise FloatingPointError(f"Garsia sum diverged ({c!r})")
    return c


def _abs_moment_factor(p):
    # E|N(0,1)|^p
    return math.exp(0.5 * p * math.log(2.0) + gammaln((p + 1) / 2) - 0.5 * math.log(math.pi))


def garsia_expectation(grid, p, alpha, sigma=None, region=None, component=0):
    """Exact ``E`` of :func:`garsia_functional` from the closed-form covariance."""
    mask, tt, xx, mass = _flat_nodes(grid, region)
    s2 = 1.0 if sigma is None else float((np.asarray(sigma) @ np.asarray(sigma).T)[component, component])
    pts = np.column_stack([tt, xx])
    var = gf.heat_covariance(pts, pts)
    cp = _abs_moment_factor(p)
    expo = 6.0 + alpha * p
    n = pts.shape[0]
    rows = max(1, 2_000_000 // n)
    total = []
    for i0 in range(0, n, rows):
        blk = pts[i0:i0 + rows]
        cov = gf.heat_covariance(blk[:, None, :], pts[None, :, :])
        g2 = np.maximum(var[i0:i0 + rows, None] + var[None, :] - 2.0 * cov, 0.0)
        dl = np.sqrt(np.abs(blk[:, None, 0] - tt[None, :])) + np.abs(blk[:, None, 1] - xx[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = mass[i0:i0 + rows, None] * mass[None, :] * cp * (s2 * g2) ** (p / 2) / dl ** expo
        terms[dl == 0] = 0.0
        total.append(math.fsum(terms.sum(axis=1)))
    return math.fsum(total)


def garsia_bound(path, a, b, p, alpha, C=None, region=None, component=0):
    """Right side of the Garsia modulus inequality for nodes ``a`` and ``b``.

    The ball masses are the exact discrete masses, so the integral over the
    radius is a finite sum over the radii where a ball gains a node.
    """
    mask, tt, xx, mass = _flat_nodes(path.grid, region)
    if C is None:
        C = garsia_functional(path, p, alpha, region, component)
    ex = alpha + 6.0 / p
    rho = math.sqrt(abs(a[0] - b[0])) + abs(a[1] - b[1])
    upper = 2.0 * rho

    def side(c):
        dd = np.sqrt(np.abs(tt - c[0])) + np.abs(xx - c[1])
        order = np.argsort(dd, kind="stable")
        dd, ms = dd[order], np.cumsum(mass[order])
        # B(c, u/2) is open: it holds nodes with dd < u/2, i.e. u > 2 dd
        brk = 2.0 * dd
        first = np.searchsorted(brk, 0.0, side="right")
        if first == 0:
            raise ModulusError("ball center is not a grid node")
        acc = []
        lo = 0.0
        k = first - 1
        while lo < upper:
            hi = brk[k + 1] if k + 1 < brk.size else math.inf
            hi = min(hi, upper)
            if hi > lo:
                acc.append((C / ms[k] ** 2) ** (1.0 / p) * (hi ** ex - lo ** ex))
            lo = hi
            k += 1
            while k + 1 < brk.size and brk[k + 1] <= lo:
                k += 1
        return math.fsum(acc)

    return 4.0 * (side(a) + side(b))


# ---------------------------------------------------------------------------
# Hölder fits
# ---------------------------------------------------------------------------

@dataclass
class HolderFit:
    alpha: float
    stderr: float
    lags: list
    means: list

    def __iter__(self):
        return iter((self.alpha, self.stderr))


def holder_fit(ensemble, axis, lags=None, min_lags=4, min_paths=1000, index=None):
    """Fit ``E||u(a) - u(b)|| ~ lag^alpha`` along one grid axis.

    ``axis="space"`` uses the row at time index ``index`` (default: last),
    ``axis="time"`` the column at site index ``index`` (default: middle).
    All overlapping pairs at each lag are used; the spread of per-path
    averages gives the standard error, which accounts for their correlation.
    """
    vals = np.asarray(ensemble.values)
    R = vals.shape[0]
    if R < min_paths:
        raise ModulusError(f"{R} paths, need at least {min_paths}")
    grid = ensemble.grid
    if axis == "space":
        coord = grid.sites
        line = vals[:, :, grid.nt - 1 if index is None else index, :]
    elif axis == "time":
        coord = grid.times
        line = vals[:, :, :, grid.nx // 2 if index is None else index]
    else:
        raise ValueError("axis must be 'time' or 'space'")
    step = np.diff(coord)
    if step.size == 0 or np.ptp(step) > 1e-9 * step.mean():
        raise ModulusError("need a uniform axis")
    h = float(step.mean())
    n = coord.size
    if lags is None:
        lags = [2 ** k for k in range(20) if 2 ** k <= (n - 1) // 4]
    lags = [int(L) for L in lags if 0 < L < n]
    if len(lags) < min_lags:
        raise ModulusError(f"{len(lags)} usable lags, need {min_lags}")
    means, ses = [], []
    for L in lags:
        inc = np.sqrt(np.sum((line[:, :, L:] - line[:, :, :-L]) ** 2, axis=1))
        per_path = inc.mean(axis=1)
        m = float(per_path.mean())
        means.append(m)
        ses.append(float(per_path.std(ddof=1) / math.sqrt(R)) / m)
    x = np.log(np.array(lags) * h)
    y = np.log(means)
    w = 1.0 / np.square(ses)
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    chi2 = float(np.sum(w * resid ** 2)) / max(len(x) - 2, 1)
    # scale by the residual spread but never below the sampling error
    se = math.sqrt(cov[1, 1] * max(chi2, 1.0))
    return HolderFit(float(beta[1]), se, [L * h for L in lags], means)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ModulusReport:
    eps_grid: list
    moment_ratios: list
    alpha_t: float
    alpha_t_se: float
    alpha_x: float
    alpha_x_se: float
    p: float
    ratio_se: list = field(default_factory=list)

    def __post_init__(self):
        if any(not r > 0 for r in self.moment_ratios):
            raise ValueError("moment ratios must be positive")
        for a in (self.alpha_t, self.alpha_x):
            if not 0 < a < 1:
                raise ValueError("Hölder exponents must lie in (0, 1)")

    @property
    def band(self):
        return max(self.moment_ratios) / min(self.moment_ratios)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["quantity", "eps", "value", "stderr"])
            ses = self.ratio_se or [""] * len(self.eps_grid)
            for e, r, s in zip(self.eps_grid, self.moment_ratios, ses):
                wr.writerow([f"moment_ratio_p{self.p:g}", repr(e), repr(r), repr(s) if s != "" else ""])
            wr.writerow(["alpha_t", "", repr(self.alpha_t), repr(self.alpha_t_se)])
            wr.writerow(["alpha_x", "", repr(self.alpha_x), repr(self.alpha_x_se)])


def holder_ensembles(spec, seed, replicas=1000, n=129, center=(0.5, 0.5),
                     time_step=1e-4, space_step=1.0 / 512):
    """Exact samples on a time column and a space row through ``center``."""
    t, x = center
    half_t = time_step * (n - 1) / 2
    half_x = space_step * (n - 1) / 2
    col = gf.GridSpec.box(t - half_t, t + half_t, x, x, n, 1)
    row = gf.GridSpec.box(t, t, x - half_x, x + half_x, 1, n)
    ens_t = gf.sample_grid_exact(spec, col, seed, replicas)
    ens_x = gf.sample_grid_exact(spec, row, seed + 1, replicas)
    return ens_t, ens_x


def modulus_report(spec, seed, eps_grid=None, p=2, replicas=2000, center=(0.5, 0.5),
                   holder_replicas=1000):
    eps_grid = eps_grid or [2.0 ** -k for k in range(2, 7)]
    mr = moment_ratios(spec, center, eps_grid, p, replicas, seed)
    ens_t, ens_x = holder_ensembles(spec, seed + 100, holder_replicas, center=center)
    at = holder_fit(ens_t, "time", index=0)
    ax = holder_fit(ens_x, "space", index=0)
    return ModulusReport(list(eps_grid), [r for r, _ in mr], at.alpha, at.stderr,
                         ax.alpha, ax.stderr, p, [s for _, s in mr])
