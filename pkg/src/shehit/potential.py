"""Kernels, energies, capacities, covers and integral-bound checks.

Energies come in three flavours selected by ``diagonal``:

``"include"``
    point masses; every atom with positive weight has infinite self-energy
    when ``beta >= 0``.
``"exclude"``
    the off-diagonal double sum only.
``"cell"``
    every atom stands for the uniform distribution on a cell (interval,
    rectangle, box) of given side lengths centred on it; each term is the
    exact mean kernel between two such cells. This is the energy of an
    absolutely continuous measure, so it is a convex quadratic form in the
    weights and the capacity problem over it is well posed.
"""

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import integrate

from . import kernels


class NormalizationError(ValueError):
    """The log kernel was evaluated at a distance ``>= n0``."""


class QuadratureError(ArithmeticError):
    """Adaptive quadrature did not reach the requested accuracy."""


class MetricKind(str, Enum):
    EUCLIDEAN = "euclidean"
    PARABOLIC = "parabolic"


@dataclass(frozen=True)
class KernelOrder:
    beta: float
    n0: float = math.e

    def __post_init__(self):
        if not self.n0 > 0:
            raise ValueError("n0 must be positive")

    @classmethod
    def for_diameter(cls, beta, diameter):
        """Order with ``n0 = e (1 + diameter)``, so ``K_0 >= 1`` on the domain."""
        return cls(float(beta), default_n0(diameter))


def default_n0(diameter):
    return math.e * (1.0 + float(diameter))


# ---------------------------------------------------------------------------
# Kernel and metric
# ---------------------------------------------------------------------------

def k_beta(order, r):
    """``r^-beta`` (beta > 0), ``log(n0 / r)`` (beta = 0) or 1 (beta < 0)."""
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(~(r_arr > 0)):
        raise ValueError("k_beta needs r > 0")
    b = order.beta
    if b > 0:
        out = r_arr ** (-b)
    elif b == 0:
        if np.any(r_arr >= order.n0):
            raise NormalizationError(
                f"log kernel needs r < n0 = {order.n0:g}; enlarge n0")
        out = np.log(order.n0 / r_arr)
    else:
        out = np.ones_like(r_arr)
    return float(out) if out.ndim == 0 else out


def _kind(kind):
    return MetricKind(kind)


def metric(kind, p, q):
    """Euclidean norm or ``|t - s|^{1/2} + |x - y|`` on (t, x...) points."""
    kind = _kind(kind)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1:] != q.shape[-1:]:
        raise TypeError(f"points live in different spaces: {p.shape} vs {q.shape}")
    diff = p - q
    if kind is MetricKind.PARABOLIC:
        if p.shape[-1] < 2:
            raise TypeError("parabolic metric needs space-time points (t, x)")
        out = np.sqrt(np.abs(diff[..., 0])) + np.sqrt(np.sum(diff[..., 1:] ** 2, axis=-1))
    else:
        out = np.sqrt(np.sum(diff**2, axis=-1))
    return float(out) if out.ndim == 0 else out


def diameter(points, kind):
    """Largest pairwise distance of a finite point set."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 2:
        return 0.0
    best = 0.0
    chunk = max(1, 2_000_000 // pts.shape[0])
    for i0 in range(0, pts.shape[0], chunk):
        best = max(best, float(np.max(metric(kind, pts[i0:i0 + chunk, None, :], pts[None]))))
    return best


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.array(self.weights, dtype=np.float64).ravel()
        if atoms.ndim != 2 or atoms.shape[0] != w.size:
            raise TypeError("atoms must be (n, k) with one weight per atom")
        if w.size == 0:
            raise ValueError("a probability measure needs at least one atom")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {math.fsum(w)!r}, not 1")
        if np.unique(atoms, axis=0).shape[0] != atoms.shape[0]:
            raise ValueError("atoms must be pairwise distinct")
        self.atoms = atoms
        self.weights = w

    @classmethod
    def uniform(cls, atoms):
        atoms = np.asarray(atoms, dtype=np.float64)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @property
    def dim(self):
        return self.atoms.shape[1]

    def __len__(self):
        return self.weights.size

    def sorted(self):
        """Copy with atoms in lexicographic order (the summation order)."""
        order = np.lexsort(self.atoms.T[::-1])
        return DiscreteMeasure(self.atoms[order], self.weights[order])


def write_measure_csv(path, mu, names=None):
    k = mu.dim
    names = list(names) if names else [f"x{i}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names + ["weight"])
        for a, w in zip(mu.atoms, mu.weights):
            wr.writerow([repr(float(v)) for v in a] + [repr(float(w))])


def read_measure_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    try:
        [float(v) for v in header]
    except ValueError:
        pass
    else:
        raise ValueError(f"{path}: header row is mandatory")
    data = np.array([[float(v) for v in r] for r in body if r], dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: need coordinate columns plus a weight column")
    return DiscreteMeasure(data[:, :-1], data[:, -1])


# ---------------------------------------------------------------------------
# Cell-averaged kernel
# ---------------------------------------------------------------------------
# All cell integrals are done in normalised units where the (first) space
# side is 1; a power kernel then scales by s^-beta and the log kernel shifts
# by -log s.

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _tent_rule(c, h, branch):
    """Nodes ``y = c + z`` and weights for ``int tent_h(z) f(c + z) dz``.

    ``tent_h(z) = (1 - |z|/h)/h`` on ``[-h, h]``. The interval is split at the
    tent kink and at ``z = -c``; with ``branch`` each piece is mapped through
    ``c + z = +-tau^2`` so that ``sqrt|c + z|`` becomes polynomial.
    """
    cuts = {-h, 0.0, h}
    if -h < -c < h:
        cuts.add(-c)
    cuts = sorted(cuts)
    ys, ws = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 0:
            continue
        if branch:
            ya, yb = c + a, c + b
            sgn = 1.0 if ya + yb > 0 else -1.0
            ta, tb = sorted((math.sqrt(abs(ya)), math.sqrt(abs(yb))))
            tau = 0.5 * (tb - ta) * GL_NODES + 0.5 * (tb + ta)
            wt = 0.5 * (tb - ta) * GL_WEIGHTS
            y = sgn * tau * tau
            jac = 2.0 * tau
        else:
            z = 0.5 * (b - a) * GL_NODES + 0.5 * (b + a)
            y = c + z
            wt = 0.5 * (b - a) * GL_WEIGHTS
            jac = 1.0
        z = y - c
        ys.append(y)
        ws.append(wt * jac * (1.0 - np.abs(z) / h) / h)
    return np.concatenate(ys), np.concatenate(ws)


def _kernel_values(r, beta):
    if beta > 0:
        return r ** (-beta)
    return np.log(r)


def _cell_separated(c, sides, beta, parabolic):
    """Tensor Gauss-Legendre mean of ``r^-beta`` (or ``log r``) between two cells."""
    rules = [_tent_rule(c[i], sides[i], parabolic and i == 0) for i in range(len(c))]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wts = np.ones(())
    for r in rules:
        wts = np.multiply.outer(wts, r[1])
    if parabolic:
        r = np.sqrt(np.abs(grids[0]))
        if len(c) > 1:
            r = r + np.sqrt(sum(g * g for g in grids[1:]))
    else:
        r = np.sqrt(sum(g * g for g in grids))
    return float(np.sum(wts * _kernel_values(r, beta)))


def _radial_moment(n, beta, r0, r1):
    """``int_{r0}^{r1} r^n K(r) dr`` with ``K = r^-beta`` or ``log r``."""
    if beta > 0:
        e = n + 1.0 - beta
        return (r1**e - r0**e) / e
    m = n + 1.0

    def anti(r):
        return 0.0 if r == 0 else r**m * (math.log(r) / m - 1.0 / (m * m))
    return anti(r1) - anti(r0)


def _ray_range(e, lo, hi):
    r0, r1 = 0.0, math.inf
    for ei, a, b in zip(e, lo, hi):
        if ei > 0:
            r0, r1 = max(r0, a / ei), min(r1, b / ei)
        elif ei < 0:
            r0, r1 = max(r0, b / ei), min(r1, a / ei)
        elif not a <= 0.0 <= b:
            return 0.0, 0.0
    return r0, max(r0, r1)


def _cell_near_2d(c, sides, beta, parabolic):
    """Mean kernel between overlapping or touching cells in two dimensions.

    The integrand lives on ``w = c + z``; the box is cut along the tent kinks
    and the coordinate axes so the kernel singularity sits at a corner. Each
    piece is swept by rays from the origin: along a ray the tent weights are
    polynomial, so the radial integral is closed form and only the angular
    integral is adaptive. For the parabolic metric the time axis is first
    mapped through ``w_t = sign(tau) tau^2``, which makes the metric the
    1-homogeneous ``|tau| + |x|``.
    """
    P = np.polynomial.polynomial
    h0, h1 = sides
    cuts = []
    for ci, hi in zip(c, sides):
        pts = {ci - hi, ci, ci + hi, 0.0}
        cuts.append(sorted(p for p in pts if ci - hi <= p <= ci + hi))
    total = []
    for a0, b0 in zip(cuts[0][:-1], cuts[0][1:]):
        for a1, b1 in zip(cuts[1][:-1], cuts[1][1:]):
            if b0 <= a0 or b1 <= a1:
                continue
            s0 = 1.0 if a0 + b0 > 2 * c[0] else -1.0  # side of the tent kink
            s1 = 1.0 if a1 + b1 > 2 * c[1] else -1.0
            q0 = 1.0 if a0 + b0 > 0 else -1.0  # quadrant
            q1 = 1.0 if a1 + b1 > 0 else -1.0
            if parabolic:
                lo = (np.sign(a0) * math.sqrt(abs(a0)), a1)
                hi = (np.sign(b0) * math.sqrt(abs(b0)), b1)
            else:
                lo, hi = (a0, a1), (b0, b1)
            corners = [(x, y) for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                       if not (x == 0 and y == 0)]
            if parabolic:
                params = [abs(x) / (abs(x) + abs(y)) for x, y in corners]
            else:
                params = [math.atan2(abs(y), abs(x)) for x, y in corners]
            u0, u1 = min(params), max(params)
            if u1 <= u0:
                continue

            def direction(u):
                if parabolic:
                    return (q0 * u, q1 * (1.0 - u))
                return (q0 * math.cos(u), q1 * math.sin(u))

            def g(u):
                e = direction(u)
                r0, r1 = _ray_range(e, lo, hi)
                if r1 <= r0:
                    return 0.0
                # tent factors as polynomials in r
                if parabolic:
                    # w_t = q0 (u r)^2; dt = 2 |tau| dtau and the ray jacobian is r
                    t_poly = np.array([1.0 + s0 * c[0] / h0, 0.0, -s0 * q0 * u * u / h0]) / h0
                    jac = np.array([0.0, 0.0, 2.0 * u])
                else:
                    t_poly = np.array([1.0 + s0 * c[0] / h0, -s0 * e[0] / h0]) / h0
                    jac = np.array([0.0, 1.0])
                x_poly = np.array([1.0 + s1 * c[1] / h1, -s1 * e[1] / h1]) / h1
                poly = P.polymul(P.polymul(t_poly, x_poly), jac)
                return math.fsum(coef * _radial_moment(n, beta, r0, r1)
                                 for n, coef in enumerate(poly) if coef != 0.0)

            brk = sorted(set(params))
            brk = [p for p in brk if u0 < p < u1] or None
            total.append(_quad(g, u0, u1, "cell kernel", epsrel=1e-12, points=brk))
    return math.fsum(total)


def _cell_near(c, sides, beta, parabolic):
    if len(c) == 2:
        return _cell_near_2d(c, sides, beta, parabolic)
    k = len(c)

    def f(*z):
        w = 1.0
        for i in range(k):
            w *= (1.0 - abs(z[i]) / sides[i]) / sides[i]
        y = [c[i] + z[i] for i in range(k)]
        if parabolic:
            r = math.sqrt(abs(y[0])) + math.sqrt(sum(v * v for v in y[1:]))
        else:
            r = math.sqrt(sum(v * v for v in y))
        if r == 0.0:
            return 0.0
        return w * (r ** (-beta) if beta > 0 else math.log(r))

    opts = []
    for i in range(k):
        pts = [0.0]
        if -sides[i] < -c[i] < sides[i] and c[i] != 0:
            pts.append(-c[i])
        opts.append({"points": pts, "epsabs": 1e-14, "epsrel": 1e-11, "limit": 400})
    ranges = [(-s, s) for s in sides]
    val, err = integrate.nquad(f, ranges, opts=opts)
    if not np.isfinite(val) or err > 1e-8 * max(abs(val), 1.0):
        raise QuadratureError(f"cell kernel quadrature: value {val}, error {err}")
    return float(val)


def _closed_form_1d(c, beta):
    # unit cells; second difference of the double antiderivative of K
    if beta > 0:
        def phi(r):
            return abs(r) ** (2.0 - beta) / ((1.0 - beta) * (2.0 - beta))
        return phi(c + 1) - 2.0 * phi(c) + phi(c - 1)

    def phi(r):
        r = abs(r)
        return 0.0 if r == 0 else 0.5 * r * r * math.log(r) - 0.75 * r * r
    return phi(c + 1) - 2.0 * phi(c) + phi(c - 1)


@lru_cache(maxsize=200_000)
def _unit_cell_mean(key_c, key_s, beta, parabolic):
    c = np.array(key_c, dtype=np.float64)
    sides = np.array(key_s, dtype=np.float64)
    if c.size == 1 and not parabolic:
        return _closed_form_1d(float(c[0]), beta)
    return _cell_near(c, sides, beta, parabolic)


def _tent_rule_batch(c, h, branch):
    """Vectorised :func:`_tent_rule` for an array of offsets ``c`` (all >= 0).

    Always three pieces (some possibly empty) so the node count is fixed.
    """
    cut = np.clip(-c, -h, h)
    m1 = np.minimum(0.0, cut)
    m2 = np.maximum(0.0, cut)
    los = np.stack([np.full_like(c, -h), m1, m2], axis=1)
    his = np.stack([m1, m2, np.full_like(c, h)], axis=1)
    x = GL_NODES[None, None, :]
    gw = GL_WEIGHTS[None, None, :]
    lo, hi = los[:, :, None], his[:, :, None]
    cc = c[:, None, None]
    if branch:
        ya, yb = cc + lo, cc + hi
        sgn = np.where(ya + yb > 0, 1.0, -1.0)
        sa, sb = np.sqrt(np.abs(ya)), np.sqrt(np.abs(yb))
        ta, tb = np.minimum(sa, sb), np.maximum(sa, sb)
        tau = 0.5 * (tb - ta) * x + 0.5 * (tb + ta)
        y = sgn * tau * tau
        wt = 0.5 * (tb - ta) * gw * 2.0 * tau
    else:
        z = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        y = cc + z
        wt = 0.5 * (hi - lo) * gw
    wt = wt * np.clip(1.0 - np.abs(y - cc) / h, 0.0, None) / h
    n = c.size
    return y.reshape(n, -1), wt.reshape(n, -1)


def _cell_separated_batch(C, sides, beta, parabolic):
    n, k = C.shape
    rules = [_tent_rule_batch(C[:, i], sides[i], parabolic and i == 0) for i in range(k)]
    per = rules[0][0].shape[1] ** k
    chunk = max(1, 2_000_000 // per)
    out = np.empty(n)
    for a in range(0, n, chunk):
        sl = slice(a, a + chunk)
        ys, ws = [], []
        for i, (y, w) in enumerate(rules):
            shape = [y[sl].shape[0]] + [1] * k
            shape[1 + i] = y.shape[1]
            ys.append(y[sl].reshape(shape))
            ws.append(w[sl].reshape(shape))
        if parabolic:
            r = np.sqrt(np.abs(ys[0]))
            if k > 1:
                r = r + np.sqrt(sum(y * y for y in ys[1:]))
        else:
            r = np.sqrt(sum(y * y for y in ys))
        wt = ws[0]
        for w in ws[1:]:
            wt = wt * w
        vals = wt * _kernel_values(r, beta)
        out[sl] = vals.reshape(vals.shape[0], -1).sum(axis=1)
    return out


def _space_scale(sides, parabolic):
    return float(sides[1]) if parabolic and sides.size > 1 else float(sides[0])


def cell_kernels(offsets, sides, order, kind=MetricKind.EUCLIDEAN):
    """Mean of ``K_beta(dist(U, V))`` for ``U``, ``V`` uniform on two congruent
    axis-parallel cells whose centres differ by each row of ``offsets``.

    For the parabolic metric the first coordinate is time and ``sides[0]`` is
    the time side. Well-separated cells use tensor Gauss-Legendre rules;
    touching or overlapping cells use closed forms (1-D), a ray sweep (2-D)
    or nested adaptive quadrature.
    """
    parabolic = _kind(kind) is MetricKind.PARABOLIC
    sides = np.atleast_1d(np.asarray(sides, dtype=np.float64))
    C = np.abs(np.asarray(offsets, dtype=np.float64)).reshape(-1, sides.size)
    if np.any(sides <= 0):
        raise ValueError("cell sides must be positive")
    beta = float(order.beta)
    if beta < 0:
        return np.ones(C.shape[0])
    k = sides.size
    if beta >= (k + 1 if parabolic else k):
        return np.full(C.shape[0], math.inf)
    s = _space_scale(sides, parabolic)
    if parabolic:
        scale = np.concatenate([[s * s], np.full(k - 1, s)])
    else:
        scale = np.full(k, s)
    Cn = np.round(C / scale, 12)
    Sn = np.round(sides / scale, 12)
    key_s = tuple(Sn)
    separated = np.any(Cn >= 2.0 * Sn, axis=1)
    if k == 1 and not parabolic:
        separated = Cn[:, 0] >= 4.0
    unit = np.empty(C.shape[0])
    if np.any(separated):
        unit[separated] = _cell_separated_batch(Cn[separated], Sn, beta, parabolic)
    for i in np.nonzero(~separated)[0]:
        unit[i] = _unit_cell_mean(tuple(Cn[i]), key_s, beta, parabolic)
    if beta > 0:
        return s ** (-beta) * unit
    # log(n0 / r) = log n0 - log s - log(r / s)
    return math.log(order.n0) - math.log(s) - unit


def cell_kernel(offset, sides, order, kind=MetricKind.EUCLIDEAN):
    """Scalar form of :func:`cell_kernels`."""
    sides = np.atleast_1d(np.asarray(sides, dtype=np.float64))
    off = np.atleast_1d(np.asarray(offset, dtype=np.float64))
    if off.shape != sides.shape:
        raise ValueError("offset and sides must have the same length")
    return float(cell_kernels(off[None, :], sides, order, kind)[0])


def cell_gram(atoms, sides, order, kind=MetricKind.EUCLIDEAN):
    """Matrix of :func:`cell_kernel` over all atom pairs (exactly symmetric)."""
    sides = np.atleast_1d(np.asarray(sides, dtype=np.float64))
    atoms = np.asarray(atoms, dtype=np.float64).reshape(-1, sides.size)
    n = atoms.shape[0]
    iu, ju = np.triu_indices(n)
    q = np.abs(atoms[iu] - atoms[ju]) / sides
    lat = np.round(q)
    if q.size and np.max(np.abs(q - lat)) < 1e-9 and lat.max() < 2**20:
        # lattice offsets: pack each row into one integer, 1-D unique is far cheaper
        li = lat.astype(np.int64)
        code = np.zeros(li.shape[0], dtype=np.int64)
        for c in range(li.shape[1]):
            code = code * (2**20) + li[:, c]
        _, first, inv = np.unique(code, return_index=True, return_inverse=True)
        keys = lat[first]
    else:
        keys, inv = np.unique(np.round(q, 10), axis=0, return_inverse=True)
    inv = np.ravel(inv)
    vals = cell_kernels(keys * sides, sides, order, kind)
    G = np.empty((n, n))
    G[iu, ju] = vals[inv]
    G[ju, iu] = vals[inv]
    return G


def quad_form(G, w):
    """Compensated ``w^T G w`` summed in index order."""
    return math.fsum((w[:, None] * G * w[None, :]).ravel())


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def _check_n0(atoms, order, kind):
    if order.beta != 0 or atoms.shape[0] < 2:
        return
    lo, hi = atoms.min(axis=0), atoms.max(axis=0)
    ext = hi - lo
    if _kind(kind) is MetricKind.PARABOLIC:
        bound = math.sqrt(ext[0]) + float(np.linalg.norm(ext[1:]))
    else:
        bound = float(np.linalg.norm(ext))
    if bound >= order.n0 and diameter(atoms, kind) >= order.n0:
        raise NormalizationError(f"domain diameter reaches n0 = {order.n0:g}")


def energy(mu, order, kind=MetricKind.EUCLIDEAN, diagonal="include", cell=None):
    """``sum_i sum_j w_i w_j K_beta(dist(a_i, a_j))``.

    ``diagonal`` is ``"include"`` (point masses), ``"exclude"`` (off-diagonal
    sum only) or ``"cell"`` (atoms are uniform cells with side lengths
    ``cell``). Atoms are summed in lexicographic order with compensated
    accumulation, so the value is invariant under relabelling.
    """
    kind = _kind(kind)
    if diagonal not in ("include", "exclude", "cell"):
        raise ValueError(f"unknown diagonal mode {diagonal!r}")
    mu = mu.sorted()
    w = mu.weights
    if kind is MetricKind.PARABOLIC and mu.dim < 2:
        raise TypeError("parabolic energy needs space-time atoms")
    if order.beta < 0:
        total = math.fsum(w) ** 2
        if diagonal == "exclude":
            return total - math.fsum(w * w)
        return total
    _check_n0(mu.atoms, order, kind)
    if diagonal == "cell":
        if cell is None:
            raise ValueError("cell semantics needs the cell side lengths")
        sides = np.broadcast_to(np.asarray(cell, dtype=np.float64), (mu.dim,))
        return quad_form(cell_gram(mu.atoms, sides, order, kind), w)
    off = kernels.offdiag_energy(mu.atoms, w, order.beta, order.n0,
                                 kind is MetricKind.PARABOLIC)
    if diagonal == "exclude":
        return off
    if np.any(w > 0):
        return math.inf
    return off


# ---------------------------------------------------------------------------
# Capacity
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GridSet:
    """A set represented by congruent cells centred at ``points``."""

    points: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.cell = np.broadcast_to(np.asarray(self.cell, dtype=np.float64),
                                    (pts.shape[1],)).copy()
        if np.any(self.cell <= 0):
            raise ValueError("cell sides must be positive")

    @classmethod
    def interval(cls, a, b, n):
        """``n`` equal cells tiling ``[a, b]``."""
        h = (b - a) / n
        return cls(a + h * (np.arange(n) + 0.5), h)

    @classmethod
    def box(cls, lows, highs, counts):
        lows, highs = np.asarray(lows, float), np.asarray(highs, float)
        h = (highs - lows) / np.asarray(counts)
        axes = [lo + hh * (np.arange(c) + 0.5) for lo, hh, c in zip(lows, h, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.column_stack([m.ravel() for m in mesh]), h)

    def refine(self, factor):
        """Split every cell into ``factor`` pieces per axis."""
        k = self.points.shape[1]
        h = self.cell / factor
        offs = (np.arange(factor) + 0.5) * 1.0 / factor - 0.5
        mesh = np.meshgrid(*[offs * c for c in self.cell], indexing="ij")
        sub = np.column_stack([m.ravel() for m in mesh])
        pts = (self.points[:, None, :] + sub[None, :, :]).reshape(-1, k)
        return GridSet(pts, h)

    def __len__(self):
        return self.points.shape[0]


@dataclass(eq=False)
class CapacityResult:
    value: float
    energy: float
    weights: np.ndarray = None
    iterations: int = 0
    gap: float = 0.0
    converged: bool = True
    energies: np.ndarray = field(default=None, repr=False)
    gaps: np.ndarray = field(default=None, repr=False)
    n0: float = math.e

    def __float__(self):
        return float(self.value)


def _trivial_capacity(target, order):
    n = 0 if target is None else len(target)
    if n == 0:
        return CapacityResult(0.0, math.inf, np.zeros(0), n0=order.n0)
    if order.beta < 0:
        return CapacityResult(1.0, 1.0, np.full(n, 1.0 / n), n0=order.n0)
    return None


def capacity_solve(target, order, kind=MetricKind.EUCLIDEAN, tol=1e-8, max_iter=100_000):
    """Minimise the energy over probability weights on ``target``.

    A plain point array uses point semantics (so the answer is 0 whenever
    ``beta >= 0``); a :class:`GridSet` uses cell semantics and Frank-Wolfe
    with away steps and exact line search.
    """
    if target is not None and not isinstance(target, GridSet):
        target = np.atleast_2d(np.asarray(target, dtype=np.float64)) if len(target) else []
    triv = _trivial_capacity(target, order)
    if triv is not None:
        return triv
    if not isinstance(target, GridSet):
        n = len(target)
        return CapacityResult(0.0, math.inf, np.full(n, 1.0 / n), n0=order.n0)
    _check_n0(target.points, order, kind)
    G = cell_gram(target.points, target.cell, order, kind)
    n = len(target)
    w, energies, gaps = kernels.frank_wolfe(G, np.full(n, 1.0 / n), tol, max_iter)
    e = quad_form(G, w)
    return CapacityResult(1.0 / e, e, w, energies.size - 1, float(gaps[-1]),
                          bool(gaps[-1] <= tol), energies, gaps, order.n0)


def capacity(target, order, kind=MetricKind.EUCLIDEAN, tol=1e-8, max_iter=100_000):
    """``[min_mu I_beta(mu)]^-1`` over measures on ``target``; see :func:`capacity_solve`."""
    return capacity_solve(target, order, kind, tol, max_iter).value


def write_trace_csv(path, result):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "energy", "duality_gap"])
        if result.energies is None:
            return
        for i, (e, g) in enumerate(zip(result.energies, result.gaps)):
            wr.writerow([i, repr(float(e)), repr(float(g))])


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def capacity_projected_gradient(target, order, kind=MetricKind.EUCLIDEAN, refine=4,
                                tol=1e-8, max_iter=200_000):
    """Independent reference: accelerated projected gradient on a refined grid.

    Stops when the gradient-mapping norm ``L ||w - P(w - grad/L)||_inf`` drops
    below ``tol``. Returns a :class:`CapacityResult`.
    """
    grid = target.refine(refine) if refine > 1 else target
    G = cell_gram(grid.points, grid.cell, order, kind)
    n = len(grid)
    lip = 2.0 * float(np.linalg.eigvalsh(G)[-1])
    w = np.full(n, 1.0 / n)
    y = w.copy()
    t = 1.0
    stat = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        w_new = project_simplex(y - (2.0 * (G @ y)) / lip)
        if float((y - w_new) @ (w_new - w)) > 0:
            # gradient-based restart (O'Donoghue-Candes)
            t = 1.0
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, t = w_new, t_new
        if it % 10 == 0:
            stat = lip * float(np.max(np.abs(w - project_simplex(w - 2.0 * (G @ w) / lip))))
            if stat <= tol:
                break
    e = quad_form(G, w)
    return CapacityResult(1.0 / e, e, w, it, stat, stat <= tol, n0=order.n0)


# ---------------------------------------------------------------------------
# Hausdorff covers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CoverSet:
    centers: np.ndarray
    radii: np.ndarray
    kind: MetricKind
    eps: float

    def __post_init__(self):
        if np.any(self.radii <= 0) or np.any(self.radii > self.eps * (1 + 1e-12)):
            raise ValueError("cover radii must lie in (0, eps]")

    def covers(self, points):
        """True if every point lies in some ball."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        for i0 in range(0, pts.shape[0], 4096):
            block = pts[i0:i0 + 4096]
            d = metric(self.kind, block[:, None, :], self.centers[None, :, :])
            if not np.all(np.any(d <= self.radii[None, :] * (1 + 1e-12), axis=1)):
                return False
        return True

    def content(self, beta):
        """``sum (2 r_i)^beta``; ``+inf`` for ``beta < 0``."""
        if beta < 0:
            return math.inf
        return math.fsum((2.0 * self.radii) ** beta)


def greedy_cover(points, kind, eps):
    """Cover by cells of a lattice sized so that each cell fits in an eps-ball.

    Points are binned into half-open cells anchored at the minimum corner;
    each occupied cell gets the smallest ball about the cell centre that
    contains its points (floored at a tiny positive radius).
    """
    kind = _kind(kind)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        return CoverSet(np.zeros((0, pts.shape[1])), np.zeros(0), kind, eps)
    k = pts.shape[1]
    if kind is MetricKind.PARABOLIC:
        sides = np.concatenate([[eps * eps / 4.0],
                                np.full(k - 1, eps / math.sqrt(max(k - 1, 1)))])
    else:
        sides = np.full(k, 2.0 * eps / math.sqrt(k))
    origin = pts.min(axis=0)
    idx = np.floor((pts - origin) / sides).astype(np.int64)
    cells, inv = np.unique(idx, axis=0, return_inverse=True)
    inv = np.ravel(inv)
    centers = origin + (cells + 0.5) * sides
    d = metric(kind, pts, centers[inv])
    radii = np.zeros(cells.shape[0])
    np.maximum.at(radii, inv, d)
    radii = np.clip(radii, eps * 1e-9, eps)
    return CoverSet(centers, radii, kind, eps)


def hausdorff_upper(target, beta, kind, eps, cover=None):
    """Upper estimate of the ``beta``-Hausdorff content at mesh ``eps``."""
    if beta < 0:
        return math.inf
    if cover is None:
        pts = target.points if isinstance(target, GridSet) else target
        cover = greedy_cover(pts, kind, eps)
    return cover.content(beta)


# ---------------------------------------------------------------------------
# Integral bounds
# ---------------------------------------------------------------------------

def _quad(f, a, b, what, epsrel=1e-12, points=None):
    val, err, info = integrate.quad(f, a, b, epsabs=0.0, epsrel=epsrel, limit=500,
                                    points=points, full_output=1)[:3]
    if not np.isfinite(val) or err > max(1e-10 * abs(val), 1e-300):
        raise QuadratureError(
            f"{what}: value {val!r}, error estimate {err!r}, {info.get('neval')} evaluations")
    return val


def psi(a, nu, rho):
    """``int_0^a dx / (rho + x^nu)`` (closed forms for nu = 1, 2)."""
    if not (a > 0 and nu > 0 and rho > 0):
        raise ValueError("psi needs a, nu, rho > 0")
    if nu == 1:
        return math.log1p(a / rho)
    if nu == 2:
        return math.atan(a / math.sqrt(rho)) / math.sqrt(rho)
    # the integrand bends over at x ~ rho^(1/nu); split there
    knee = rho ** (1.0 / nu)
    cuts = [0.0] + [c for c in (knee / 8, knee, 8 * knee) if c < a] + [a]
    return math.fsum(_quad(lambda x: 1.0 / (rho + x**nu), lo, hi, "psi")
                     for lo, hi in zip(cuts[:-1], cuts[1:]))


def psi_bound_ratios(nu, a=1.0, T=1.0, rho_min=1e-4, n=41):
    """``Psi_{a,nu}(rho) / K_{(nu-1)/nu}(rho)`` on log-spaced ``rho`` in ``[rho_min, T]``."""
    rhos = np.geomspace(rho_min, T, n)
    order = KernelOrder.for_diameter((nu - 1.0) / nu, max(T, a))
    ratios = np.array([psi(a, nu, r) / k_beta(order, r) for r in rhos])
    return rhos, ratios


def _heat_integral_weight(rho, I, J):
    """``int 8 w (I - w^2)(J - rho + w) dw`` over the admissible ``w`` at fixed ``w + v = rho``."""
    lo = max(0.0, rho - J)
    hi = min(math.sqrt(I), rho)
    if hi <= lo:
        return 0.0

    def anti(w):
        return 8.0 * ((J - rho) * (I * w * w / 2.0 - w**4 / 4.0) + (I * w**3 / 3.0 - w**5 / 5.0))
    return anti(hi) - anti(lo)


def _geometric_cuts(scale, top):
    cuts = [0.0]
    c = scale / 1024.0
    while c < top:
        cuts.append(c)
        c *= 2.0
    cuts.append(top)
    return cuts


def heat_integral(beta, a, variant="space_time", alpha=1.0, I=1.0, J=1.0):
    """Quadruple (space_time) or double (time_only) Gaussian-weighted heat integral.

    ``space_time``: ``int_I int_I int_J int_J exp(-a^2/D) D^{-beta/2}`` with
    ``D = |t - s|^{1/2} + |x - y|``. The integrand depends on ``|t - s|`` and
    ``|x - y|`` only; with ``|t - s| = w^2`` and ``rho = w + |x - y|`` the
    inner integral is a polynomial, leaving one adaptive quadrature in
    ``rho``. ``time_only``: ``int_I int_I exp(-a^2/|t-s|^alpha) |t-s|^{-alpha beta/2}``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if a == 0:
        raise ValueError("a must be non-zero")
    a2 = float(a) ** 2
    if variant == "space_time":
        top = math.sqrt(I) + J

        def f(rho):
            if rho <= 0:
                return 0.0
            return _heat_integral_weight(rho, I, J) * math.exp(-a2 / rho) * rho ** (-beta / 2.0)
        cuts = sorted(set(_geometric_cuts(2.0 * a2 / beta, top) + [min(J, top), min(math.sqrt(I), top)]))
    elif variant == "time_only":
        top = I

        def f(u):
            if u <= 0:
                return 0.0
            ua = u**alpha
            return 2.0 * (I - u) * math.exp(-a2 / ua) * ua ** (-beta / 2.0)
        cuts = _geometric_cuts(a2 ** (1.0 / alpha), top)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    parts = [_quad(f, lo, hi, "heat integral") for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo]
    return math.fsum(parts)


def heat_integral_ratio(beta, a, variant="space_time", alpha=1.0, I=1.0, J=1.0, N=1.0):
    """Integral divided by ``K_{beta-6}(a)`` (space_time) or ``K_{beta-2/alpha}(a)``."""
    order_beta = beta - 6.0 if variant == "space_time" else beta - 2.0 / alpha
    order = KernelOrder.for_diameter(order_beta, N)
    return heat_integral(beta, a, variant, alpha, I, J) / k_beta(order, abs(a))


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothingResult:
    before: float
    after: float
    cell: float

    @property
    def ratio(self):
        if math.isinf(self.before):
            return 0.0
        return self.after / self.before


def mollify(mu, width, per_axis=9):
    """Split each atom uniformly over a ``width`` box at ``per_axis`` points per axis.

    Returns the refined measure; every sub-atom stands for a cell of side
    ``width / per_axis`` (coincident sub-atoms are merged).
    """
    k = mu.dim
    h = width / per_axis
    offs = (np.arange(per_axis) - (per_axis - 1) / 2.0) * h
    mesh = np.meshgrid(*([offs] * k), indexing="ij")
    sub = np.column_stack([m.ravel() for m in mesh])
    pts = (mu.atoms[:, None, :] + sub[None]).reshape(-1, k)
    wts = np.repeat(mu.weights / sub.shape[0], sub.shape[0])
    keys, inv = np.unique(np.round(pts / h, 9), axis=0, return_inverse=True)
    inv = np.ravel(inv)
    merged_w = np.zeros(keys.shape[0])
    np.add.at(merged_w, inv, wts)
    merged_p = np.zeros((keys.shape[0], k))
    merged_p[inv] = pts
    merged_w /= math.fsum(merged_w)
    return DiscreteMeasure(merged_p, merged_w)


def smoothing_check(mu, mollifier_width, alpha, semantics="point", per_axis=9, n0=None):
    """Energies of ``mu`` and of its box-mollified version.

    The mollified measure is realised by :func:`mollify` and always uses cell
    semantics with cell side ``width / per_axis``. With ``semantics="point"``
    the energy of ``mu`` keeps its diagonal (so it is infinite once
    ``alpha >= 0``); with ``"cell"`` each atom of ``mu`` is a cell of the same
    side, which makes both sides the energies of absolutely continuous
    measures discretised alike.
    """
    d = mu.dim
    if alpha >= d:
        raise ValueError(f"need alpha < d = {d}")
    h = mollifier_width / per_axis
    smooth = mollify(mu, mollifier_width, per_axis)
    if n0 is None:
        ext = np.ptp(smooth.atoms, axis=0) + h
        n0 = default_n0(float(np.linalg.norm(ext)))
    order = KernelOrder(float(alpha), n0)
    if semantics == "point":
        before = energy(mu, order, diagonal="include")
    elif semantics == "cell":
        before = energy(mu, order, diagonal="cell", cell=h)
    else:
        raise ValueError(f"unknown semantics {semantics!r}")
    after = energy(smooth, order, diagonal="cell", cell=h)
    return SmoothingResult(before, after, h)
