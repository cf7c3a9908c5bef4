"""Hitting probabilities, scaling-exponent fits, level sets and box counting."""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import chndtr

from . import rng
from .potential import MetricKind

Z95 = 1.959963984540054


class ResolutionError(ValueError):
    """Target radius below the grid-resolution floor."""


class FitError(ValueError):
    """Too few usable scales or levels for a regression."""


# ---------------------------------------------------------------------------
# Dyadic boxes and regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DyadicBox:
    """``[k 2^{-4n}, (k+1) 2^{-4n}] x [l 2^{-2n}, (l+1) 2^{-2n}]``."""

    n: int
    k: int
    l: int

    @property
    def time_side(self):
        return 2.0 ** (-4 * self.n)

    @property
    def space_side(self):
        return 2.0 ** (-2 * self.n)

    @property
    def time_interval(self):
        return (self.k * self.time_side, (self.k + 1) * self.time_side)

    @property
    def space_interval(self):
        return (self.l * self.space_side, (self.l + 1) * self.space_side)

    def contains(self, t, x):
        """Half-open membership ``[a, b) x [c, d)``."""
        a, b = self.time_interval
        c, d = self.space_interval
        return a <= t < b and c <= x < d

    @classmethod
    def containing(cls, n, t, x):
        return cls(n, int(math.floor(t * 2 ** (4 * n))), int(math.floor(x * 2 ** (2 * n))))


def dyadic_boxes(n, I=(0.0, 1.0), J=(0.0, 1.0), T=1.0):
    """All level-``n`` boxes whose half-open cell meets ``I x J``."""
    if n < 1:
        raise ValueError("level n must be >= 1")
    if I[0] < 0 or I[1] > T or J[0] < 0 or J[1] > 1 or I[1] <= I[0] or J[1] <= J[0]:
        raise ValueError("need 0 <= I within [0, T] and J within [0, 1], both non-degenerate")
    nt, nx = 2 ** (4 * n), 2 ** (2 * n)
    k0 = int(math.floor(I[0] * nt))
    k1 = int(math.ceil(I[1] * nt))
    l0 = int(math.floor(J[0] * nx))
    l1 = int(math.ceil(J[1] * nx))
    return [DyadicBox(n, k, l) for k in range(k0, k1) for l in range(l0, l1)]


@dataclass(frozen=True)
class Region:
    """Where hits count: ``full`` (I x J), ``t_section``, ``x_section`` or ``node``."""

    kind: str
    I: tuple = (0.0, 1.0)
    J: tuple = (0.0, 1.0)
    t: float = None
    x: float = None

    @classmethod
    def full(cls, I, J):
        return cls("full", tuple(I), tuple(J))

    @classmethod
    def t_section(cls, t, J=(0.0, 1.0)):
        return cls("t_section", (t, t), tuple(J), t=t)

    @classmethod
    def x_section(cls, x, I):
        return cls("x_section", tuple(I), (x, x), x=x)

    @classmethod
    def node(cls, t, x):
        return cls("node", (t, t), (x, x), t=t, x=x)

    @classmethod
    def from_box(cls, box):
        return cls.full(box.time_interval, box.space_interval)

    @property
    def start_time(self):
        return self.I[0]

    def describe(self):
        if self.kind == "full":
            return f"full[{self.I[0]:.6g},{self.I[1]:.6g}]x[{self.J[0]:.6g},{self.J[1]:.6g}]"
        if self.kind == "t_section":
            return f"t={self.t:.6g}"
        if self.kind == "x_section":
            return f"x={self.x:.6g}"
        return f"node({self.t:.6g},{self.x:.6g})"

    def mask(self, grid):
        """Boolean (nt, nx) mask of grid nodes in the region."""
        tt, xx = grid.times, grid.sites
        slack_t = 1e-12 * max(1.0, abs(tt[-1]))
        slack_x = 1e-12
        if self.kind in ("t_section", "node"):
            i = int(np.argmin(np.abs(tt - self.t)))
            if abs(tt[i] - self.t) > 1e-9 * max(1.0, abs(self.t)):
                raise ValueError(f"time {self.t} is not a grid time")
            tm = np.zeros(tt.size, bool)
            tm[i] = True
        else:
            tm = (tt >= self.I[0] - slack_t) & (tt <= self.I[1] + slack_t)
        if self.kind in ("x_section", "node"):
            j = int(np.argmin(np.abs(xx - self.x)))
            if abs(xx[j] - self.x) > 1e-9:
                raise ValueError(f"site {self.x} is not a grid site")
            xm = np.zeros(xx.size, bool)
            xm[j] = True
        else:
            xm = (xx >= self.J[0] - slack_x) & (xx <= self.J[1] + slack_x)
        m = tm[:, None] & xm[None, :]
        if not m.any():
            raise ValueError(f"region {self.describe()} contains no grid node")
        return m


# ---------------------------------------------------------------------------
# Targets and estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=np.float64)))
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def distance(self, vals):
        """Distance of value vectors (..., d) to the ball centre."""
        return np.sqrt(np.sum((vals - self.center) ** 2, axis=-1))

    def widened(self, extra):
        return Ball(self.center, self.eps + extra)


@dataclass(frozen=True, eq=False)
class PointTarget:
    """Union of ``eps``-balls about a point cloud."""

    points: np.ndarray
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=np.float64)))

    def distance(self, vals):
        flat = vals.reshape(-1, vals.shape[-1])
        best = np.full(flat.shape[0], np.inf)
        for p in self.points:
            best = np.minimum(best, np.sqrt(np.sum((flat - p) ** 2, axis=-1)))
        return best.reshape(vals.shape[:-1])

    def widened(self, extra):
        return PointTarget(self.points, self.eps + extra)


def wilson_interval(hits, n, z=Z95):
    if n <= 0:
        raise ValueError("need at least one trial")
    p = hits / n
    den = 1.0 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if hits == 0 else max(0.0, mid - half)
    hi = 1.0 if hits == n else min(1.0, mid + half)
    return lo, hi


@dataclass
class HitEstimate:
    p_hat: float
    ci_low: float
    ci_high: float
    n_trials: int
    n_hits: int
    eps: float
    region: str = ""
    method: str = "grid"
    se: float = 0.0
    increment: float = 0.0
    p_widened: float = None

    def __post_init__(self):
        if not (self.ci_low <= self.p_hat <= self.ci_high):
            raise ValueError("confidence interval must bracket the estimate")
        if self.n_hits > self.n_trials:
            raise ValueError("more hits than trials")

    @property
    def bias_bound(self):
        """``p(eps + increment) - p(eps)`` on the same ensemble, if computed."""
        if self.p_widened is None:
            return None
        return max(0.0, self.p_widened - self.p_hat)

    @classmethod
    def from_counts(cls, hits, n, eps, region="", **kw):
        lo, hi = wilson_interval(hits, n)
        p = hits / n
        return cls(p, min(lo, p), max(hi, p), int(n), int(hits), float(eps), region, "grid",
                   math.sqrt(p * (1 - p) / n), **kw)


def _values_and_grid(ensemble):
    vals = np.asarray(ensemble.values)
    if vals.ndim == 3:
        vals = vals[None]
    return vals, ensemble.grid


def _region_values(vals, mask):
    # (R, d, nt, nx) -> (R, M, d) at masked nodes
    sel = vals[:, :, mask]
    return np.transpose(sel, (0, 2, 1))


def hit_probability(ensemble, target, region, floor_factor=4.0, increment=None,
                    method="grid", seed=0, inner=4, widen=True):
    """Estimate ``P{u(region) meets target}`` from an ensemble.

    ``method="grid"`` counts paths with a region node inside the target
    (Wilson interval). ``method="conditional"`` expects an ensemble sampled
    without the constant-mode level at the region start time (see
    :func:`level_free_ensemble`) and integrates that independent Gaussian
    level out exactly, giving an unbiased per-path hitting probability via
    the Karp-Luby union-of-balls estimator.

    ``increment`` is the predicted rms increment over one grid cell; when
    omitted it is computed from the exact covariance. Targets with
    ``eps < floor_factor * increment`` are refused. With ``widen`` the same
    estimate at ``eps + increment`` is stored, bounding the grid bias.
    """
    vals, grid = _values_and_grid(ensemble)
    mask = region.mask(grid)
    if increment is None:
        from .modulus import cell_increment
        increment = cell_increment(ensemble.spec, grid, region)
    if target.eps < floor_factor * increment:
        need = math.ceil((floor_factor * increment / target.eps) ** 2)
        raise ResolutionError(
            f"eps = {target.eps:.4g} is below {floor_factor:g} x the predicted cell increment "
            f"{increment:.4g}; refine the grid about {need}x in each parabolic direction")
    pts = _region_values(vals, mask)
    if method == "grid":
        est = _grid_estimate(pts, target, region)
        if widen and increment > 0:
            est.p_widened = _grid_estimate(pts, target.widened(increment), region).p_hat
    elif method == "conditional":
        level_var = _level_variance(ensemble, region)
        est = _conditional_estimate(pts, target, level_var, region, seed, inner)
        if widen and increment > 0:
            est.p_widened = _conditional_estimate(pts, target.widened(increment), level_var,
                                                  region, seed, inner).p_hat
    else:
        raise ValueError(f"unknown method {method!r}")
    est.increment = float(increment)
    return est


def _grid_estimate(pts, target, region):
    dist = target.distance(pts)
    hit = np.min(dist, axis=1) <= target.eps
    return HitEstimate.from_counts(int(hit.sum()), hit.size, target.eps, region.describe())


def _level_variance(ensemble, region):
    meta = getattr(ensemble, "meta", {}) or {}
    lt = meta.get("level_time")
    if lt is None:
        raise ValueError("conditional method needs an ensemble sampled without its level")
    if abs(lt - region.start_time) > 1e-12 and lt > region.start_time:
        raise ValueError("level removed after the region starts")
    scale = ensemble.spec.isotropic_scale()
    if scale is None:
        raise ValueError("conditional method needs sigma sigma^T proportional to the identity")
    return scale * scale * lt


CONDITIONAL_BLOCK = 1024


def _ball_proposals(gen, n, d, eps):
    g = gen.standard_normal((n, d))
    dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
    return dirs * (eps * gen.random(n) ** (1.0 / d))[:, None]


def _karp_luby_block(centers, eps, v, gen, inner):
    """Per-row Karp-Luby estimates of ``P{g in union_j B(centers[r, j], eps)}``.

    ``g ~ N(0, v I)``; ``centers`` has shape (R, M, d).
    """
    R, M, d = centers.shape
    nc = np.einsum("rmd,rmd->rm", centers, centers)
    masses = chndtr(eps * eps / v, d, nc / v)
    total = np.array([math.fsum(row) for row in masses])
    cdf = np.cumsum(masses, axis=1)
    live = np.nonzero(total > 0)[0]
    acc = np.zeros(R)
    for _ in range(inner):
        u = gen.random(R)
        J = np.minimum(np.count_nonzero(cdf <= (u * cdf[:, -1])[:, None], axis=1), M - 1)
        cj = centers[live, J[live]]
        r_min = np.maximum(np.sqrt(nc[live, J[live]]) - eps, 0.0)
        x = np.empty((live.size, d))
        pending = np.arange(live.size)
        # rejection: uniform proposal in the ball, Gaussian acceptance factor
        while pending.size:
            prop = cj[pending] + _ball_proposals(gen, pending.size, d, eps)
            logacc = -(np.sum(prop * prop, axis=1) - r_min[pending] ** 2) / (2.0 * v)
            ok = np.log(gen.random(pending.size)) < logacc
            x[pending[ok]] = prop[ok]
            pending = pending[~ok]
        # |c - x|^2 expanded to avoid an (R, M, d) temporary
        xf = np.zeros((R, d))
        xf[live] = x
        d2 = nc - 2.0 * np.einsum("rmd,rd->rm", centers, xf) + np.sum(xf * xf, axis=1)[:, None]
        cover = np.count_nonzero(d2[live] <= eps * eps * (1 + 1e-12), axis=1)
        acc[live] += total[live] / np.maximum(cover, 1)
    return acc / inner


def conditional_hit_prob(w_pts, target, v, gen, inner=4):
    """Karp-Luby estimate of ``P{g in union_j B(c - w_j, eps)}``, ``g ~ N(0, v I)``."""
    centers = (target.center[None, :] - w_pts)[None]
    return float(_karp_luby_block(centers, target.eps, v, gen, inner)[0])


def _conditional_ys(pts, target, v, seed, first_block, inner):
    R = pts.shape[0]
    ys = np.empty(R)
    for b0 in range(0, R, CONDITIONAL_BLOCK):
        gen = rng.stream(seed, first_block + b0 // CONDITIONAL_BLOCK, 0, rng.AUXILIARY)
        blk = pts[b0:b0 + CONDITIONAL_BLOCK]
        ys[b0:b0 + blk.shape[0]] = _karp_luby_block(target.center[None, None, :] - blk,
                                                    target.eps, v, gen, inner)
    return ys


def _estimate_from_ys(ys, target, region):
    R = ys.size
    p = float(np.mean(ys))
    se = float(np.std(ys, ddof=1) / math.sqrt(R)) if R > 1 else math.inf
    lo = max(0.0, p - Z95 * se)
    hi = min(1.0, p + Z95 * se)
    eff = int(round((p / se) ** 2)) if se > 0 else R
    return HitEstimate(p, min(lo, p), max(hi, p), R, min(eff, R), target.eps,
                       region.describe(), "conditional", se)


def _conditional_estimate(pts, target, v, region, seed, inner):
    if not isinstance(target, Ball):
        raise ValueError("conditional method supports ball targets only")
    return _estimate_from_ys(_conditional_ys(pts, target, v, seed, 0, inner), target, region)


def conditional_sweep(spec, grid, region, targets, seed, replicas, k_max=None, exact=True,
                      inner=4, chunk=CONDITIONAL_BLOCK):
    """Streamed conditional estimates for several ball targets on one grid.

    Paths are sampled ``chunk`` at a time (a multiple of the rng block size)
    with the level at the first grid time removed; only the per-path
    estimates are kept, so memory does not grow with ``replicas``. Results
    do not depend on ``chunk``.
    """
    from . import field as gf
    if chunk % CONDITIONAL_BLOCK or chunk % gf.NODAL_BLOCK:
        raise ValueError("chunk must be a multiple of the rng block size")
    scale = spec.isotropic_scale()
    if scale is None:
        raise ValueError("conditional method needs sigma sigma^T proportional to the identity")
    t_a = float(grid.times[0])
    if region.start_time < t_a - 1e-12:
        raise ValueError("region starts before the grid")
    v = scale * scale * t_a
    mask = region.mask(grid)
    factor = None
    if exact:
        factor = gf._sqrt_factor(gf.node_covariance(grid.nodes(), t_a))
    ys = [np.empty(replicas) for _ in targets]
    for r0 in range(0, replicas, chunk):
        nb = min(chunk, replicas - r0)
        if exact:
            vals = gf.sample_grid_exact(spec, grid, seed, nb, t_a, r0, factor).values
        else:
            vals = gf.sample_ensemble(spec, grid, seed, nb, k_max or 512, r0,
                                      include_level=False).values
        pts = _region_values(vals, mask)
        del vals
        for tg, y in zip(targets, ys):
            y[r0:r0 + nb] = _conditional_ys(pts, tg, v, seed, r0 // CONDITIONAL_BLOCK, inner)
    return [_estimate_from_ys(y, tg, region) for y, tg in zip(ys, targets)]


def level_free_ensemble(spec, grid, seed, replicas, k_max=None, exact=False):
    """Ensemble of ``sigma w`` with ``w = v - A^0_{t_a}``, ``t_a`` = first grid time.

    ``exact=True`` samples the grid nodes jointly from the closed-form
    covariance; otherwise the spectral sampler is used with the constant mode
    started from zero.
    """
    from . import field as gf
    t_a = float(grid.times[0])
    if exact:
        ens = gf.sample_grid_exact(spec, grid, seed, replicas, level_time=t_a)
    else:
        ens = gf.sample_ensemble(spec, grid, seed, replicas, k_max=k_max or 512,
                                 include_level=False)
    ens.meta["level_time"] = t_a
    return ens


def write_estimates_csv(path, estimates):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["eps", "p_hat", "ci_low", "ci_high", "n_trials", "n_hits",
                     "region", "method", "increment", "bias_bound"])
        for e in estimates:
            bb = e.bias_bound
            wr.writerow([repr(e.eps), repr(e.p_hat), repr(e.ci_low), repr(e.ci_high), e.n_trials,
                         e.n_hits, e.region, e.method, repr(e.increment),
                         "" if bb is None else repr(bb)])


# ---------------------------------------------------------------------------
# Exponent fit
# ---------------------------------------------------------------------------

@dataclass
class ExponentFit:
    slope: float
    stderr: float
    intercept: float
    used_eps: list = field(default_factory=list)
    dropped_eps: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.slope, self.stderr))


def _wls(x, y, w):
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    dof = max(len(x) - 2, 1)
    chi2 = float(np.sum(w * resid * resid))
    return beta, np.sqrt(np.diag(cov) * chi2 / dof)


def exponent_fit(estimates, min_hits=10, min_scales=4):
    """Weighted least squares of ``log p_hat`` on ``log eps``.

    Weights are inverse squared log-widths of the confidence intervals; the
    standard error is scaled by the residual variance, so exact power laws
    give zero error. Scales with fewer than ``min_hits`` hits are dropped.
    """
    used, dropped = [], []
    for eps, est in estimates:
        if est.n_hits < min_hits or est.p_hat <= 0:
            dropped.append(eps)
        else:
            used.append((eps, est))
    if dropped:
        warnings.warn(f"dropping scales with too few hits: {dropped}", RuntimeWarning)
    if len(used) < min_scales:
        raise FitError(f"only {len(used)} usable scales, need {min_scales}")
    x = np.log([e for e, _ in used])
    y = np.log([est.p_hat for _, est in used])
    sig = []
    for _, est in used:
        lo = max(est.ci_low, est.p_hat * 1e-3)
        width = (math.log(max(est.ci_high, est.p_hat)) - math.log(lo)) / (2 * Z95)
        sig.append(max(width, 1e-12))
    w = 1.0 / np.square(sig)
    beta, se = _wls(x, y, w)
    return ExponentFit(float(beta[1]), float(se[1]), float(beta[0]),
                       [e for e, _ in used], dropped)


def write_fit_csv(path, fits):
    """``fits`` maps a label to an :class:`ExponentFit`."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "slope", "stderr", "intercept", "n_scales"])
        for label, f in fits.items():
            wr.writerow([label, repr(f.slope), repr(f.stderr), repr(f.intercept), len(f.used_eps)])


# ---------------------------------------------------------------------------
# Level sets
# ---------------------------------------------------------------------------

SELECTORS = ("full", "t_section", "x_section", "T_projection", "X_projection")


@dataclass(eq=False)
class LevelSetCloud:
    """Grid nodes with ``|u - z| <= tol``; ``coords`` columns follow ``axes``."""

    coords: np.ndarray
    axes: tuple
    selector: str
    z: np.ndarray
    tol: float

    def __len__(self):
        return self.coords.shape[0]


def _parse_selector(selector):
    if isinstance(selector, str):
        name, arg = selector, None
    else:
        name, arg = selector
    if name not in SELECTORS:
        raise ValueError(f"unknown selector {name!r}")
    if name in ("t_section", "x_section") and arg is None:
        raise ValueError(f"{name} needs a coordinate")
    return name, arg


def _crossings(f, axis):
    """Nodes on either side of a sign change of ``f`` along ``axis``."""
    f = np.moveaxis(f, axis, -1)
    a, b = f[..., :-1], f[..., 1:]
    cross = (a == 0) | (b == 0) | (np.sign(a) != np.sign(b))
    out = np.zeros(f.shape, bool)
    out[..., :-1] |= cross
    out[..., 1:] |= cross
    return np.moveaxis(out, -1, axis)


def level_set(path, z, tol=None, selector="full", floor=0.0):
    """Grid approximation of ``{u = z}``, sectioned or projected.

    With ``tol=None`` (scalar fields only) the set is the nodes next to a
    sign change of ``u - z`` along the grid lines; otherwise it is the nodes
    with ``||u - z|| <= tol``, and ``tol`` below ``floor`` is refused.
    """
    name, arg = _parse_selector(selector)
    vals = np.asarray(path.values)
    grid = path.grid
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.size != vals.shape[0]:
        raise ValueError("level has the wrong dimension")
    if tol is None:
        if vals.shape[0] != 1:
            raise ValueError("crossing level sets need a scalar field; pass tol")
        f = vals[0] - z[0]
        # full and projections use sign changes along both grid directions
        close = _crossings(f, 0) | _crossings(f, 1)
        if name == "t_section":
            n = int(np.argmin(np.abs(grid.times - arg)))
            close = np.zeros_like(close)
            close[n] = _crossings(f[n], 0)
        elif name == "x_section":
            j = int(np.argmin(np.abs(grid.sites - arg)))
            close = np.zeros_like(close)
            close[:, j] = _crossings(f[:, j], 0)
        tol_used = 0.0
    else:
        if tol < floor:
            raise ResolutionError(f"tol {tol:g} below the resolution floor {floor:g}")
        close = np.sqrt(np.sum((vals - z[:, None, None]) ** 2, axis=0)) <= tol
        tol_used = float(tol)
    if name == "t_section":
        n = int(np.argmin(np.abs(grid.times - arg)))
        return LevelSetCloud(grid.sites[close[n]][:, None], ("x",), name, z, tol_used)
    if name == "x_section":
        j = int(np.argmin(np.abs(grid.sites - arg)))
        return LevelSetCloud(grid.times[close[:, j]][:, None], ("t",), name, z, tol_used)
    if name == "T_projection":
        return LevelSetCloud(grid.times[close.any(axis=1)][:, None], ("t",), name, z, tol_used)
    if name == "X_projection":
        return LevelSetCloud(grid.sites[close.any(axis=0)][:, None], ("x",), name, z, tol_used)
    n_idx, j_idx = np.nonzero(close)
    coords = np.column_stack([grid.times[n_idx], grid.sites[j_idx]])
    return LevelSetCloud(coords, ("t", "x"), name, z, tol_used)


def crossing_tolerance(values, z=0.0):
    """Smallest ``tol`` that keeps a node next to every sign change of ``values - z``.

    ``values`` is a 1-D profile along one grid axis.
    """
    f = np.asarray(values, dtype=np.float64) - z
    a, b = f[:-1], f[1:]
    cross = (a == 0) | (b == 0) | (np.sign(a) != np.sign(b))
    if not cross.any():
        return 0.0
    return float(np.max(np.minimum(np.abs(a[cross]), np.abs(b[cross]))))


# ---------------------------------------------------------------------------
# Box counting
# ---------------------------------------------------------------------------

def box_counts(coords, axes, kind, levels):
    """Occupied half-open boxes at each level.

    Euclidean boxes have side ``2^-n``; parabolic boxes have time side
    ``2^-2n`` and space side ``2^-n``.
    """
    kind = MetricKind(kind)
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    counts = []
    for n in levels:
        sides = np.array([2.0 ** (-2 * n) if (kind is MetricKind.PARABOLIC and a == "t")
                          else 2.0 ** (-n) for a in axes])
        idx = np.floor(coords / sides).astype(np.int64)
        counts.append(np.unique(idx, axis=0).shape[0])
    return np.array(counts)


@dataclass
class DimensionFit:
    dim: float
    stderr: float
    levels: list
    counts: list

    def __iter__(self):
        return iter((self.dim, self.stderr))


def box_dimension(cloud, kind=MetricKind.EUCLIDEAN, levels=range(2, 12), axes=None,
                  min_points=100, min_levels=4):
    """Slope of ``log N(2^-n)`` against ``n log 2``.

    When the finest level adds fewer than 5 boxes over the previous one the
    two finest levels are dropped (occupancy plateau).
    """
    if isinstance(cloud, LevelSetCloud):
        coords, axes = cloud.coords, cloud.axes
    else:
        coords = np.atleast_2d(np.asarray(cloud, dtype=np.float64))
        if coords.shape[0] == 1 and coords.shape[1] > 1 and axes is None:
            coords = coords.T
        if axes is None:
            axes = ("t", "x") if coords.shape[1] == 2 else tuple(f"x{i}" for i in range(coords.shape[1]))
    if coords.shape[0] < min_points:
        raise FitError(f"{coords.shape[0]} points, need at least {min_points}")
    levels = list(levels)
    if len(levels) < min_levels:
        raise FitError(f"{len(levels)} levels, need at least {min_levels}")
    counts = box_counts(coords, axes, kind, levels)
    if np.any(np.diff(counts) < 0):
        raise AssertionError("box counts must be non-increasing in the box size")
    if len(levels) - 2 >= min_levels and counts[-1] - counts[-2] < 5:
        levels, counts = levels[:-2], counts[:-2]
    x = np.array(levels, dtype=np.float64) * math.log(2.0)
    y = np.log(counts.astype(np.float64))
    X = np.column_stack([np.ones_like(x), x])
    beta, res, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    s2 = float(resid @ resid) / max(len(x) - 2, 1)
    se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    return DimensionFit(float(beta[1]), se, list(levels), counts.tolist())


def resolved_levels(extent, step, kind=MetricKind.EUCLIDEAN, coarsest=2, min_steps=64):
    """Box levels whose side lies between ``extent / 2^coarsest`` and ``min_steps`` grid steps.

    Sign changes between grid nodes go unseen, so boxes only a few steps wide
    undercount the level set; the ``min_steps`` margin keeps that bias small.
    """
    kind = MetricKind(kind)
    finest = int(math.floor(math.log2(1.0 / (min_steps * step))))
    if kind is MetricKind.PARABOLIC:
        finest = int(math.floor(0.5 * math.log2(1.0 / (min_steps * step))))
    first = max(1, int(math.ceil(math.log2(1.0 / extent))) + coarsest)
    return list(range(first, finest + 1))


def pooled_box_dimension(clouds, kind=MetricKind.EUCLIDEAN, levels=None, min_levels=4,
                         min_paths=50):
    """Slope of ``log E[N(2^-n)]`` with the mean count taken over all paths.

    Empty clouds count as zero boxes; pooling avoids both the selection bias
    of discarding sparse paths and the clustering bias of per-path slopes.
    """
    clouds = list(clouds)
    if len(clouds) < min_paths:
        raise FitError(f"{len(clouds)} paths, need at least {min_paths}")
    levels = list(levels)
    if len(levels) < min_levels:
        raise FitError(f"{len(levels)} levels, need at least {min_levels}")
    counts = np.zeros((len(clouds), len(levels)))
    for i, c in enumerate(clouds):
        if len(c):
            counts[i] = box_counts(c.coords, c.axes, kind, levels)
    mean = counts.mean(axis=0)
    if np.any(mean <= 0):
        raise FitError("no path meets the level set")
    x = np.array(levels, dtype=np.float64) * math.log(2.0)
    y = np.log(mean)
    # per-level standard errors of log mean counts
    se = counts.std(axis=0, ddof=1) / math.sqrt(len(clouds)) / mean
    w = 1.0 / np.maximum(se, 1e-12) ** 2
    beta, sd = _wls(x, y, w)
    return DimensionFit(float(beta[1]), float(sd[1]), levels, mean.tolist())
