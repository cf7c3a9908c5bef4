"""Drift-free solution of the Neumann stochastic heat system.

The field ``v`` solves ``dv = v_xx dt + dW`` on ``[0, 1]`` with Neumann
boundary conditions and zero initial data; ``u = sigma v`` couples the
components. In the cosine basis ``phi_0 = 1``, ``phi_k = sqrt(2) cos(k pi x)``
each coefficient ``A^k`` is an Ornstein-Uhlenbeck process with rate
``pi^2 k^2`` (a Brownian motion for ``k = 0``), which gives an exact sampler
on any time grid and closed-form second moments.

Two independent routes to the covariance are provided:

* :func:`field_covariance` / :func:`pair_stats` with a :class:`SpectralModel`
  sum the truncated mode series;
* the same functions with ``model=None`` use the method of images for the
  Neumann heat kernel and integrate it in closed form (no truncation).
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as sp_fft
from scipy.special import erfcx, polygamma

from . import kernels, rng

PI2 = np.pi**2


class ConsistencyError(ArithmeticError):
    """A closed-form identity failed beyond its tolerance."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FieldSpec:
    """System size, coupling matrix, horizon and warm-up time."""

    d: int
    sigma: np.ndarray
    T: float = 1.0
    t0: float = 0.1
    drift: object = None

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=np.float64, copy=True)
        if sigma.ndim == 0:
            sigma = sigma * np.eye(self.d)
        if int(self.d) < 1:
            raise ValueError("d must be a positive integer")
        if sigma.shape != (self.d, self.d):
            raise ValueError(f"sigma must be {self.d}x{self.d}, got {sigma.shape}")
        if abs(np.linalg.det(sigma)) <= 1e-12:
            raise ValueError("sigma must be invertible (|det| > 1e-12)")
        if not 0.0 < self.t0 < self.T:
            raise ValueError(f"need 0 < t0 < T, got t0={self.t0}, T={self.T}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "d", int(self.d))

    @classmethod
    def isotropic(cls, d, scale=1.0, T=1.0, t0=0.1, drift=None):
        return cls(d, scale * np.eye(d), T=T, t0=t0, drift=drift)

    @property
    def sigma_inv(self):
        return np.linalg.inv(self.sigma)

    def isotropic_scale(self):
        """Return ``s`` if ``sigma sigma^T = s^2 I``, else ``None``."""
        ss = self.sigma @ self.sigma.T
        s2 = ss[0, 0]
        if np.allclose(ss, s2 * np.eye(self.d), rtol=1e-12, atol=1e-14):
            return float(np.sqrt(s2))
        return None


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Space-time grid: strictly increasing times and sites."""

    times: np.ndarray
    sites: np.ndarray
    uniform: bool = True

    def __post_init__(self):
        times = np.atleast_1d(np.array(self.times, dtype=np.float64))
        sites = np.atleast_1d(np.array(self.sites, dtype=np.float64))
        if times.size < 1 or sites.size < 1:
            raise ValueError("grid needs at least one time and one site")
        if np.any(np.diff(times) <= 0) or np.any(np.diff(sites) <= 0):
            raise ValueError("grid times and sites must be strictly increasing")
        if times[0] <= 0:
            raise ValueError("grid times must be positive")
        if sites[0] < 0 or sites[-1] > 1:
            raise ValueError("grid sites must lie in [0, 1]")
        if self.uniform:
            for arr, name in ((times, "times"), (sites, "sites")):
                if arr.size > 2:
                    step = np.diff(arr)
                    if np.ptp(step) > 1e-9 * max(step.mean(), 1e-300) + 1e-15:
                        raise ValueError(f"{name} not uniform; pass uniform=False")
        times.setflags(write=False)
        sites.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sites", sites)

    @classmethod
    def regular(cls, spec, nt, nx):
        """Uniform grid from ``t0`` to ``T`` and over ``[0, 1]``."""
        if nt < 1 or nx < 1:
            raise ValueError("nt and nx must be positive")
        times = np.linspace(spec.t0, spec.T, nt) if nt > 1 else np.array([spec.T])
        sites = np.linspace(0.0, 1.0, nx) if nx > 1 else np.array([0.5])
        return cls(times, sites)

    @classmethod
    def box(cls, t_lo, t_hi, x_lo, x_hi, nt, nx):
        times = np.linspace(t_lo, t_hi, nt) if nt > 1 else np.array([t_lo])
        sites = np.linspace(x_lo, x_hi, nx) if nx > 1 else np.array([x_lo])
        return cls(times, sites)

    @property
    def nt(self):
        return self.times.size

    @property
    def nx(self):
        return self.sites.size

    def nodes(self):
        """All (t, x) nodes, time-major, shape (nt*nx, 2)."""
        tt, xx = np.meshgrid(self.times, self.sites, indexing="ij")
        return np.column_stack([tt.ravel(), xx.ravel()])

    def same_as(self, other):
        return (self.times.shape == other.times.shape
                and self.sites.shape == other.sites.shape
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.sites, other.sites))


@dataclass(frozen=True)
class SpectralModel:
    """Cosine modes ``k = 0..k_max`` with decay rates ``pi^2 k^2``."""

    k_max: int = 512

    def __post_init__(self):
        if int(self.k_max) < 1:
            raise ValueError("k_max must be >= 1")
        object.__setattr__(self, "k_max", int(self.k_max))
        err = orthonormality_error(min(self.k_max, 64))
        if err > 1e-8:
            raise ConsistencyError(f"eigenfunction orthonormality error {err:.3e}")

    @property
    def modes(self):
        return np.arange(self.k_max + 1)

    @property
    def rates(self):
        return PI2 * self.modes.astype(np.float64) ** 2

    def phi(self, x):
        return eigenfunctions(x, self.k_max)

    def tail_bound(self):
        """Bound on the omitted variance: ``sum_{k > k_max} 1/(pi^2 k^2)``."""
        return 1.0 / (PI2 * self.k_max)


@dataclass(eq=False)
class SamplePath:
    """One realisation ``values[i, n, j] = u_i(times[n], sites[j])``."""

    values: np.ndarray
    grid: GridSpec
    spec: FieldSpec = None
    seed: int = 0
    k_max: int = 0
    replica: int = 0
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class SampleEnsemble:
    """Independent replicas on one grid, ``values`` of shape (R, d, nt, nx)."""

    values: np.ndarray
    grid: GridSpec
    spec: FieldSpec = None
    seed: int = 0
    k_max: int = 0
    first_replica: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.values.shape[0]

    def path(self, r):
        return SamplePath(self.values[r], self.grid, self.spec, self.seed, self.k_max,
                          self.first_replica + r, dict(self.meta))

    @classmethod
    def from_paths(cls, paths):
        paths = list(paths)
        if not paths:
            raise ValueError("empty path collection")
        g = paths[0].grid
        for p in paths[1:]:
            if not p.grid.same_as(g):
                raise TypeError("paths live on different grids")
        vals = np.stack([p.values for p in paths])
        return cls(vals, g, paths[0].spec, paths[0].seed, paths[0].k_max, paths[0].replica)


@dataclass(frozen=True)
class PairStats:
    var_p: float
    var_q: float
    cov: float
    gamma2: float
    tau2: float
    m: float
    rho: float
    det2: float
    identity_residual: float

    def matrix(self):
        return np.array([[self.var_p, self.cov], [self.cov, self.var_q]])


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def mode_variance(k, t):
    """Variance of ``A^k_t``: ``t`` for ``k = 0``, else ``(1 - e^{-2 pi^2 k^2 t}) / (2 pi^2 k^2)``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("mode_variance needs t > 0")
    k = np.asarray(k)
    lam = PI2 * k.astype(np.float64) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(k == 0, t, -np.expm1(-2.0 * lam * t) / (2.0 * lam))
    return out[()] if out.ndim == 0 else out


def _mode_variance0(k, t):
    # same as mode_variance but t = 0 allowed (returns 0)
    k = np.asarray(k)
    t = np.asarray(t, dtype=np.float64)
    lam = PI2 * k.astype(np.float64) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(k == 0, t, -np.expm1(-2.0 * lam * t) / (2.0 * np.where(k == 0, 1.0, lam)))


def mode_covariance(k, s, t):
    """``Cov(A^k_s, A^k_t) = e^{-lam |t - s|} Var(A^k_{min(s, t)})``."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s <= 0) or np.any(t <= 0):
        raise ValueError("mode_covariance needs s, t > 0")
    lo = np.minimum(s, t)
    hi = np.maximum(s, t)
    k = np.asarray(k)
    lam = PI2 * k.astype(np.float64) ** 2
    out = np.exp(-lam * (hi - lo)) * mode_variance(k, lo)
    return out[()] if np.ndim(out) == 0 else out


def eigenfunctions(x, k_max):
    """Matrix ``phi[j, k] = phi_k(x_j)`` of shape (len(x), k_max + 1)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    k = np.arange(k_max + 1, dtype=np.float64)
    out = np.sqrt(2.0) * np.cos(np.pi * np.outer(x, k))
    out[:, 0] = 1.0
    return out


@lru_cache(maxsize=16)
def orthonormality_error(k_max):
    """Max deviation of the Gauss-Legendre Gram matrix from the identity."""
    nodes, weights = np.polynomial.legendre.leggauss(max(64, 2 * k_max + 32))
    x = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    phi = eigenfunctions(x, k_max)
    gram = phi.T @ (w[:, None] * phi)
    return float(np.max(np.abs(gram - np.eye(k_max + 1))))


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------

def _as_points(p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise TypeError("space-time points must be (t, x) pairs")
    return p


def _unit_series(tp, xp, tq, xq, k_max, what):
    """Vectorised mode sums for the unit-coupling field.

    ``what`` is 'cov', 'var_p', 'var_q' or 'gamma2'; all arrays share shape (P,).
    """
    out = np.empty(tp.shape)
    k = np.arange(k_max + 1)
    lam = PI2 * k.astype(np.float64) ** 2
    chunk = max(1, 2_000_000 // (k_max + 1))
    for a in range(0, tp.size, chunk):
        sl = slice(a, a + chunk)
        t1, x1, t2, x2 = tp[sl, None], xp[sl, None], tq[sl, None], xq[sl, None]
        f1 = np.sqrt(2.0) * np.cos(np.pi * x1 * k)
        f2 = np.sqrt(2.0) * np.cos(np.pi * x2 * k)
        f1[:, 0] = 1.0
        f2[:, 0] = 1.0
        if what == "var_p":
            terms = f1 * f1 * mode_variance(k, t1)
        elif what == "var_q":
            terms = f2 * f2 * mode_variance(k, t2)
        elif what == "cov":
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            terms = f1 * f2 * np.exp(-lam * (hi - lo)) * mode_variance(k, lo)
        else:
            # cancellation-free: split the later value into its regression on
            # the earlier one plus independent OU noise
            early = t1 <= t2
            lo = np.where(early, t1, t2)
            h = np.abs(t2 - t1)
            f_lo = np.where(early, f1, f2)
            f_hi = np.where(early, f2, f1)
            terms = ((f_hi * np.exp(-lam * h) - f_lo) ** 2 * mode_variance(k, lo)
                     + f_hi**2 * _mode_variance0(k, h))
        out[sl] = terms.sum(axis=1)
    return out


def _heat_antiderivative(u, z):
    """``F(u, z) = int_0^u (4 pi r)^{-1/2} exp(-z^2 / 4r) dr``."""
    u = np.asarray(u, dtype=np.float64)
    z = np.abs(np.asarray(z, dtype=np.float64))
    u, z = np.broadcast_arrays(u, z)
    out = np.zeros(u.shape)
    m = u > 0
    w = z[m] / (2.0 * np.sqrt(u[m]))
    out[m] = np.exp(-w * w) * (np.sqrt(u[m] / np.pi) - 0.5 * z[m] * erfcx(w))
    return out


def heat_covariance(p, q):
    """Exact ``Cov(v_i(p), v_i(q))`` from the Neumann image expansion.

    ``Cov = (1/2) int_{|t-s|}^{t+s} G_r(x, y) dr`` with
    ``G_r(x, y) = sum_n g_r(x - y + 2n) + g_r(x + y + 2n)``.
    Accepts arrays of points of shape (..., 2).
    """
    p = _as_points(p)
    q = _as_points(q)
    t, x = p[..., 0], p[..., 1]
    s, y = q[..., 0], q[..., 1]
    if np.any(t <= 0) or np.any(s <= 0):
        raise ValueError("times must be positive")
    hi = np.maximum(t, s)
    lo = np.minimum(t, s)
    n_img = int(np.ceil(4.0 * np.sqrt(2.0 * float(np.max(hi))))) + 3
    acc = np.zeros(np.broadcast(t, s).shape)
    for n in range(-n_img, n_img + 1):
        for z in (x - y + 2 * n, x + y + 2 * n):
            acc = acc + (_heat_antiderivative(hi + lo, z) - _heat_antiderivative(hi - lo, z))
    out = 0.5 * acc
    return out[()] if out.ndim == 0 else out


def covariance_tail_bound(k_max):
    return 1.0 / (PI2 * k_max)


def field_covariance(i, j, p, q, model=None, sigma=None):
    """``Cov(u_i(p), u_j(q))`` and the truncation tail bound.

    ``i`` and ``j`` are 1-based component indices. With ``model=None`` the
    exact image route is used and the tail bound is 0.
    """
    p = _as_points(p)
    q = _as_points(q)
    if sigma is None:
        coupling = 1.0 if i == j else 0.0
    else:
        sigma = np.asarray(sigma, dtype=np.float64)
        coupling = float((sigma @ sigma.T)[i - 1, j - 1])
    if model is None:
        unit = heat_covariance(p, q)
        tail = 0.0
    else:
        pp, qq = np.broadcast_arrays(p, q)
        unit = _unit_series(pp[..., 0].ravel(), pp[..., 1].ravel(), qq[..., 0].ravel(),
                            qq[..., 1].ravel(), model.k_max, "cov").reshape(pp.shape[:-1])
        unit = unit[()] if unit.ndim == 0 else unit
        tail = model.tail_bound()
    return coupling * unit, abs(coupling) * tail


def _unit_stats(p, q, model):
    p = _as_points(p)
    q = _as_points(q)
    pp, qq = np.broadcast_arrays(p, q)
    tp, xp = pp[..., 0].ravel(), pp[..., 1].ravel()
    tq, xq = qq[..., 0].ravel(), qq[..., 1].ravel()
    if model is None:
        var_p = heat_covariance(np.column_stack([tp, xp]), np.column_stack([tp, xp]))
        var_q = heat_covariance(np.column_stack([tq, xq]), np.column_stack([tq, xq]))
        cov = heat_covariance(np.column_stack([tp, xp]), np.column_stack([tq, xq]))
        var_p, var_q, cov = (np.atleast_1d(a) for a in (var_p, var_q, cov))
        gamma2 = np.maximum(var_p + var_q - 2.0 * cov, 0.0)
    else:
        var_p = _unit_series(tp, xp, tp, xp, model.k_max, "var_p")
        var_q = _unit_series(tq, xq, tq, xq, model.k_max, "var_q")
        cov = _unit_series(tp, xp, tq, xq, model.k_max, "cov")
        gamma2 = _unit_series(tp, xp, tq, xq, model.k_max, "gamma2")
    return var_p, var_q, cov, gamma2, pp.shape[:-1]


def _two_prod_diff(a, b, c):
    """``a*b - c*c`` with Dekker products to limit cancellation."""
    def split(v):
        f = 134217729.0 * v
        hi = f - (f - v)
        return hi, v - hi

    def two_prod(x, y):
        prod = x * y
        xh, xl = split(x)
        yh, yl = split(y)
        err = ((xh * yh - prod) + xh * yl + xl * yh) + xl * yl
        return prod, err

    p1, e1 = two_prod(a, b)
    p2, e2 = two_prod(c, c)
    return (p1 - p2) + (e1 - e2)


def pair_stats_array(p, q, model=None, tol=1e-10):
    """Vectorised :func:`pair_stats`; returns a dict of arrays."""
    var_p, var_q, cov, gamma2, shape = _unit_stats(p, q, model)
    sp = np.sqrt(var_p)
    sq = np.sqrt(var_q)
    det_direct = _two_prod_diff(var_p, var_q, cov)
    diff_sd = (var_p - var_q) / (sp + sq)
    det_factored = 0.25 * (gamma2 - diff_sd**2) * ((sp + sq) ** 2 - gamma2)
    scale = np.maximum(np.abs(det_direct), np.abs(det_factored))
    # below this level the direct determinant is pure rounding noise
    floor = 1e3 * np.finfo(float).eps * var_p * var_q
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = np.where(scale > floor, np.abs(det_direct - det_factored) / scale, 0.0)
    if np.any(resid > tol):
        worst = int(np.argmax(resid))
        raise ConsistencyError(
            f"covariance identity residual {resid[worst]:.3e} exceeds {tol:g}")
    det2 = np.maximum(det_factored, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = cov / var_q
        tau2 = det2 / var_q
        rho = np.clip(cov / (sp * sq), -1.0, 1.0)
    out = dict(var_p=var_p, var_q=var_q, cov=cov, gamma2=gamma2, tau2=tau2, m=m,
               rho=rho, det2=det2, identity_residual=resid)
    return {k: v.reshape(shape) for k, v in out.items()}


def pair_stats(p, q, model=None, tol=1e-10):
    """Second-order structure of ``(v_i(p), v_i(q))`` for one component."""
    arrs = pair_stats_array(np.asarray(p, dtype=float)[None], np.asarray(q, dtype=float)[None],
                            model, tol)
    return PairStats(**{k: float(v[0]) for k, v in arrs.items()})


def parabolic_distance(p, q):
    p = _as_points(p)
    q = _as_points(q)
    return np.sqrt(np.abs(p[..., 0] - q[..., 0])) + np.abs(p[..., 1] - q[..., 1])


def increment_second_moment(p, q, model=None):
    """``E[(v_i(p) - v_i(q))^2]`` and its ratio to the parabolic distance.

    The ratio is ``None`` when ``p == q``.
    """
    st = pair_stats(p, q, model)
    delta = float(parabolic_distance(p, q))
    if delta == 0:
        return 0.0, None
    return st.gamma2, st.gamma2 / delta


def _log_factor(h):
    with np.errstate(divide="ignore"):
        return np.maximum(1.0, np.log(1.0 / h))


def std_dev_modulus(p, q, model=None):
    """``|sigma_p - sigma_q|`` and its ratio to ``|t-s|^{1/2} + |x-y| log(1/|x-y|)``.

    The log factor is floored at 1. The ratio is ``None`` when ``p == q``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    var_p, var_q, _, _, _ = _unit_stats(p, q, model)
    value = float(abs(var_p[0] - var_q[0]) / (np.sqrt(var_p[0]) + np.sqrt(var_q[0])))
    h = abs(p[1] - q[1])
    bound = np.sqrt(abs(p[0] - q[0])) + (h * _log_factor(h) if h > 0 else 0.0)
    if bound == 0:
        return value, None
    return value, value / bound


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def one_point_density(z, p, sigma, model=None):
    """Density of ``u(p)`` at ``z``."""
    sigma = np.asarray(sigma, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = sigma.shape[0]
    var = float(np.atleast_1d(field_covariance(1, 1, p, p, model)[0]).ravel()[0])
    y = np.linalg.solve(sigma, z)
    log_dens = -0.5 * np.dot(y, y) / var - 0.5 * d * np.log(2 * np.pi * var)
    return float(np.exp(log_dens) / abs(np.linalg.det(sigma)))


def two_point_density(z1, z2, p, q, sigma, model=None, c=None):
    """Joint density of ``(u(p), u(q))`` at ``(z1, z2)``.

    Components of ``v = sigma^{-1} u`` are independent with the bivariate law
    from :func:`pair_stats`. Returns ``(density, envelope)`` where the envelope
    ``c Delta^{-d/2} exp(-|z1 - z2|^2 / (c Delta))`` is ``None`` unless ``c`` is
    given.
    """
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))
    st = pair_stats(p, q, model)
    if st.det2 <= 0:
        raise ValueError("degenerate pair: the two-point law has no density")
    y1 = np.linalg.solve(sigma, z1)
    y2 = np.linalg.solve(sigma, z2)
    quad = (st.var_q * y1 * y1 - 2 * st.cov * y1 * y2 + st.var_p * y2 * y2) / st.det2
    log_dens = -0.5 * np.sum(quad) - d * np.log(2 * np.pi) - 0.5 * d * np.log(st.det2)
    dens = float(np.exp(log_dens) / abs(np.linalg.det(sigma)) ** 2)
    env = None
    if c is not None:
        delta = float(parabolic_distance(p, q))
        r2 = float(np.sum((z1 - z2) ** 2))
        env = c * delta ** (-d / 2) * np.exp(-r2 / (c * delta))
    return dens, env


def envelope_threshold(density, delta, r2, d):
    """Smallest ``c`` with ``c Delta^{-d/2} exp(-r2/(c Delta)) >= density``.

    The envelope is increasing in ``c``, so bisection on ``log c`` is exact up
    to the final bracket width.
    """
    target = np.log(density) + 0.5 * d * np.log(delta)

    def g(logc):
        c = np.exp(logc)
        return logc - r2 / (c * delta) - target

    lo, hi = -50.0, 50.0
    if g(lo) >= 0:
        return float(np.exp(lo))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return float(np.exp(hi))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

MODE_BLOCK = 256


def _uniform_unit_sites(sites):
    n = sites.size
    return (n >= 64 and sites[0] == 0.0 and sites[-1] == 1.0
            and np.allclose(sites, np.linspace(0.0, 1.0, n), rtol=0, atol=1e-14))


def _assemble_dct(traj_full, nx):
    """Evaluate ``sum_k a_k phi_k`` at ``j/(nx-1)`` for every row via a DCT-I."""
    n_modes = traj_full.shape[1]
    m = max(1, int(np.ceil((n_modes - 1) / (nx - 1))))
    n_ext = m * (nx - 1) + 1
    coef = np.zeros((traj_full.shape[0], n_ext))
    coef[:, :n_modes] = traj_full
    # DCT-I: y_j = x_0 + (-1)^j x_{N-1} + 2 sum_{k=1}^{N-2} x_k cos(pi k j/(N-1))
    coef[:, 1:] *= np.sqrt(2.0) / 2.0
    coef[:, n_ext - 1] *= 2.0
    vals = sp_fft.dct(coef, type=1, axis=1)
    return vals[:, ::m]


def _mode_tables(times, k_max):
    k = np.arange(k_max + 1)
    lam = PI2 * k.astype(np.float64) ** 2
    dt = np.diff(times)
    decay = np.exp(-np.outer(dt, lam))
    scale = np.sqrt(_mode_variance0(k[None, :], dt[:, None]))
    return decay, scale


@lru_cache(maxsize=16)
def _cached_tables(times_key, k_max, include_level):
    times = np.frombuffer(times_key, dtype=np.float64)
    decay, scale = _mode_tables(times, k_max)
    sd0 = np.sqrt(mode_variance(np.arange(k_max + 1), times[0]))
    if not include_level:
        sd0[0] = 0.0
    for a in (decay, scale, sd0):
        a.setflags(write=False)
    return decay, scale, sd0


@lru_cache(maxsize=16)
def _cached_phi(sites_key, k_max):
    phi = eigenfunctions(np.frombuffer(sites_key, dtype=np.float64), k_max)
    phi.setflags(write=False)
    return phi


def unit_field(grid, seed, replica, component, k_max, include_level=True, tail=False):
    """Sample one component of ``v`` on ``grid``; shape (nt, nx).

    With ``include_level=False`` the constant mode starts from 0 at the first
    grid time instead of from its N(0, t) marginal. ``tail=True`` adds the
    omitted modes as white noise, exact when they decorrelate within one
    step (single-site grids only).
    """
    times, sites = grid.times, grid.sites
    nt = times.size
    decay, scale, sd0 = _cached_tables(times.tobytes(), int(k_max), bool(include_level))
    use_dct = _uniform_unit_sites(sites)
    phi = None if use_dct else _cached_phi(sites.tobytes(), int(k_max))
    out = np.zeros((nt, sites.size))
    trajs = [] if use_dct else None
    # keep a block of trajectories near 1e7 doubles for long time grids
    block = max(16, min(MODE_BLOCK, 10_000_000 // nt))
    for k0, xi in rng.mode_normals(seed, replica, component, k_max + 1, nt, block=block):
        kb = xi.shape[0]
        ks = slice(k0, k0 + kb)
        traj = kernels.ou_recursion(sd0[ks] * xi[:, 0], decay[:, ks], scale[:, ks], xi, 1)
        if use_dct:
            trajs.append(traj)
        else:
            out += traj @ phi[:, ks].T
    if use_dct:
        out = _assemble_dct(np.concatenate(trajs, axis=1), sites.size)
    if tail:
        out += _white_tail(grid, seed, replica, component, k_max)
    return out


# decorrelation of the first omitted mode over one step; e^-36 is below 1e-15
TAIL_DECORRELATION = 36.0


def tail_variance(x, k_max):
    """``sum_{k > k_max} phi_k(x)^2 / (2 lambda_k)``: stationary variance of the omitted modes."""
    theta = 2.0 * np.pi * (np.asarray(x, dtype=np.float64) % 1.0)
    k = np.arange(1, k_max + 1, dtype=np.float64)
    # sum_{k>=1} cos(k theta)/k^2 on [0, 2 pi]
    full = np.pi ** 2 / 6 - np.pi * theta / 2 + theta ** 2 / 4
    head = np.cos(np.multiply.outer(theta, k)) @ (1.0 / k ** 2)
    s_cos = full - head
    s_one = float(polygamma(1, k_max + 1))
    return (0.5 * s_one + 0.5 * s_cos) / np.pi ** 2


def _white_tail(grid, seed, replica, component, k_max):
    if grid.nx != 1:
        raise ValueError("white tail correction needs a single site")
    dt = np.diff(grid.times)
    lam = PI2 * (k_max + 1) ** 2
    if dt.size and lam * dt.min() < TAIL_DECORRELATION:
        raise ValueError("time steps too short for omitted modes to decorrelate; raise k_max")
    if lam * grid.times[0] < TAIL_DECORRELATION:
        raise ValueError("first grid time too small for the stationary tail variance")
    sd = float(np.sqrt(tail_variance(grid.sites[0], k_max)))
    xi = rng.stream(seed, replica, component, rng.TAIL).standard_normal(grid.nt)
    return (sd * xi)[:, None]


def sample_path(spec, grid, seed, k_max=512, replica=0, include_level=True, tail=False):
    """Exact spectral sample of ``u = sigma v`` on ``grid``.

    Each mode is initialised from its exact law at the first grid time and
    then advanced with the exact OU transition between grid times.
    Deterministic in ``(spec, grid, seed, k_max, replica)``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    v = np.stack([unit_field(grid, seed, replica, i, k_max, include_level, tail)
                  for i in range(spec.d)])
    u = np.einsum("ij,jtx->itx", spec.sigma, v)
    return SamplePath(u, grid, spec, int(seed), int(k_max), int(replica))


def sample_ensemble(spec, grid, seed, replicas, k_max=512, first_replica=0,
                    include_level=True):
    vals = np.empty((replicas, spec.d, grid.nt, grid.nx))
    for r in range(replicas):
        vals[r] = sample_path(spec, grid, seed, k_max, first_replica + r, include_level).values
    return SampleEnsemble(vals, grid, spec, int(seed), int(k_max), int(first_replica))


def node_covariance(points, level_time=None):
    """Exact covariance matrix of ``v_i`` at the given (t, x) points.

    With ``level_time`` the independent constant-mode value at that time is
    removed, which subtracts ``level_time`` from every entry.
    """
    pts = _as_points(points)
    cov = heat_covariance(pts[:, None, :], pts[None, :, :])
    cov = 0.5 * (cov + cov.T)
    if level_time is not None:
        cov = cov - float(level_time)
    return cov


def _sqrt_factor(cov):
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


NODAL_BLOCK = 1024


def sample_grid_exact(spec, grid, seed, replicas, level_time=None, first_replica=0, factor=None):
    """Exact finite-dimensional sample on a (small) grid via the image covariance.

    Replicas are drawn in blocks of ``NODAL_BLOCK`` from streams keyed on
    ``(seed, block)``, one stream per component; ``first_replica`` must start
    a block. ``factor`` may pass a precomputed covariance square root.
    """
    if first_replica % NODAL_BLOCK:
        raise ValueError(f"first_replica must be a multiple of {NODAL_BLOCK}")
    nodes = grid.nodes()
    if factor is None:
        factor = _sqrt_factor(node_covariance(nodes, level_time))
    m = nodes.shape[0]
    out = np.empty((replicas, spec.d, grid.nt, grid.nx))
    for b0 in range(0, replicas, NODAL_BLOCK):
        nb = min(NODAL_BLOCK, replicas - b0)
        block = (first_replica + b0) // NODAL_BLOCK
        v = np.empty((nb, spec.d, m))
        for i in range(spec.d):
            z = rng.stream(seed, block, i, rng.NODAL).standard_normal((NODAL_BLOCK, m))
            v[:, i, :] = z[:nb] @ factor.T
        u = np.einsum("ij,rjm->rim", spec.sigma, v)
        out[b0:b0 + nb] = u.reshape(nb, spec.d, grid.nt, grid.nx)
    ens = SampleEnsemble(out, grid, spec, int(seed), 0, int(first_replica))
    ens.meta["sampler"] = "exact-nodal"
    return ens
