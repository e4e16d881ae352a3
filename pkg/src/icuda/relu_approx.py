"""Sums of ReLU ridge functions with measured sup-error certificates.

A ReluSum represents f(z) ~= sum_m c_m relu(a_m . z + b_m) with every
(a_m, b_m) normalized to |a_m|_1 + |b_m| <= 1 (positive homogeneity lets c_m
absorb the scale).  Fits report a sup-error witness measured on a dense grid
plus a curvature margin, so downstream error budgets can treat sup_error as an
upper bound over the whole fit box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReluSum:
    """f(z) = sum_m c[m] * relu(a[m] . (z - center) ... ); a has shape (M, k).

    The domain of validity is the box |z - center|_inf <= radius (axes may be
    restricted further, see FitReport.axis_values).  Terms are stored in the
    original input coordinates; center only shifts the validity box.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    input_dim: int
    radius: float
    sup_error: float
    center: np.ndarray | None = None

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.center is None:
            self.center = np.zeros(self.input_dim)
        else:
            self.center = np.asarray(self.center, dtype=float).ravel()

    @property
    def n_terms(self) -> int:
        return len(self.c)

    @property
    def coef_sum(self) -> float:
        """C = sum_m |c_m|, the coefficient budget of the approximability class."""
        return float(np.sum(np.abs(self.c)))

    @property
    def max_norm(self) -> float:
        return float(np.max(np.sum(np.abs(self.a), axis=1) + np.abs(self.b))) if self.n_terms else 0.0

    def in_domain(self, z) -> bool:
        z = np.asarray(z, dtype=float).ravel()
        if not np.isfinite(self.radius):
            return True
        return bool(np.all(np.abs(z - self.center) <= self.radius + 1e-12))

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float).ravel()
        return float(np.maximum(self.a @ z + self.b, 0.0) @ self.c)


def evaluate(rs: ReluSum, z) -> float:
    return rs(z)


def evaluate_flagged(rs: ReluSum, z) -> tuple[float, bool]:
    """Value plus an in-domain flag; out-of-domain evaluation is not an error."""
    return rs(z), rs.in_domain(z)


def eval_batch(rs: ReluSum, Z: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Evaluate at Z of shape (P, k) in chunks."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    out = np.empty(Z.shape[0])
    for i in range(0, Z.shape[0], chunk):
        block = Z[i : i + chunk]
        out[i : i + chunk] = np.maximum(block @ rs.a.T + rs.b, 0.0) @ rs.c
    return out


@dataclass
class FitReport:
    sup_error: float
    n_terms: int
    coef_sum: float
    max_norm: float
    radius: float
    center: np.ndarray
    grid_sup: float
    margin: float
    rank: int | None = None
    rank_deficient: bool = False
    axis_values: tuple | None = None
    breakpoints: np.ndarray | None = None


def _normalize_terms(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Rescale each term so |a|_1 + |b| <= 1, folding the scale into c."""
    a = np.atleast_2d(np.asarray(a, dtype=float)).copy()
    b = np.asarray(b, dtype=float).ravel().copy()
    c = np.asarray(c, dtype=float).ravel().copy()
    kappa = np.sum(np.abs(a), axis=1) + np.abs(b)
    keep = kappa > 0
    a, b, c, kappa = a[keep], b[keep], c[keep], kappa[keep]
    a /= kappa[:, None]
    b /= kappa
    c *= kappa
    return a, b, c


def _second_diff_margin(residual: np.ndarray) -> float:
    """Between-node deviation allowance from axiswise second differences."""
    margin = 0.0
    r = np.asarray(residual)
    for axis in range(r.ndim):
        if r.shape[axis] < 3:
            continue
        d2 = np.abs(np.diff(r, n=2, axis=axis))
        margin += 0.5 * float(np.max(d2))
    return margin


def fit_1d(f, R: float, M: int) -> tuple[ReluSum, FitReport]:
    """Exact piecewise-linear interpolant of f at M equispaced breakpoints on
    [-R, R], expressed as a sum of ReLUs.

    sup_error is measured on a 10x finer grid (at least 1001 points) and
    inflated by a curvature margin so it upper-bounds the true sup.
    """
    if M < 2:
        raise ValueError("need at least 2 breakpoints")
    knots = np.linspace(-R, R, M)
    vals = np.asarray(f(knots), dtype=float)
    if vals.shape != knots.shape:
        raise ValueError("f must map an array of points to an array of values")
    slopes = np.diff(vals) / np.diff(knots)
    deltas = np.empty(M - 1)
    deltas[0] = slopes[0]
    deltas[1:] = np.diff(slopes)
    # terms: constant f(t_0) plus slope changes relu(t - t_k), k = 0..M-2
    a = np.concatenate([[0.0], np.ones(M - 1)])[:, None]
    b = np.concatenate([[1.0], -knots[:-1]])
    c = np.concatenate([[vals[0]], deltas])
    a, b, c = _normalize_terms(a, b, c)
    rs = ReluSum(a, b, c, input_dim=1, radius=float(R), sup_error=0.0)

    n_fine = max(10 * (M - 1) + 1, 1001)
    fine = np.linspace(-R, R, n_fine)
    resid = eval_batch(rs, fine[:, None]) - np.asarray(f(fine), dtype=float)
    grid_sup = float(np.max(np.abs(resid)))
    margin = _second_diff_margin(resid)
    rs.sup_error = grid_sup + margin
    report = FitReport(
        sup_error=rs.sup_error,
        n_terms=rs.n_terms,
        coef_sum=rs.coef_sum,
        max_norm=rs.max_norm,
        radius=float(R),
        center=rs.center,
        grid_sup=grid_sup,
        margin=margin,
        breakpoints=knots,
    )
    return rs, report


def fit_interval(f, lo: float, hi: float, M: int) -> tuple[ReluSum, FitReport]:
    """fit_1d on an arbitrary interval [lo, hi] via an affine change of variable."""
    center = 0.5 * (lo + hi)
    R = 0.5 * (hi - lo)
    rs, report = fit_1d(lambda t: f(t + center), R, M)
    # shift terms back to the original coordinate: a*(t - center) + b
    b = rs.b - rs.a[:, 0] * center
    a, b, c = _normalize_terms(rs.a, b, rs.c)
    out = ReluSum(a, b, c, input_dim=1, radius=R, sup_error=rs.sup_error,
                  center=np.array([center]))
    report.center = out.center
    return out, report


def fit_knots(f, knots: np.ndarray) -> tuple[ReluSum, FitReport]:
    """Exact piecewise-linear interpolant of f at a custom sorted knot grid.

    Same representation as fit_1d (constant plus slope-change ReLUs, so the
    left extrapolation is flat at f(knots[0]) and interpolants of monotone
    data stay monotone on all of R).  Nonuniform grids let stiff functions
    (log near zero, fast exponentials) reach small errors with few knots.
    sup_error is measured on a dense per-interval grid plus a curvature
    margin computed interval by interval.
    """
    knots = np.asarray(knots, dtype=float).ravel()
    if knots.size < 2:
        raise ValueError("need at least 2 knots")
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be strictly increasing")
    M = knots.size
    vals = np.asarray(f(knots), dtype=float)
    if vals.shape != knots.shape:
        raise ValueError("f must map an array of points to an array of values")
    slopes = np.diff(vals) / np.diff(knots)
    deltas = np.empty(M - 1)
    deltas[0] = slopes[0]
    deltas[1:] = np.diff(slopes)
    a = np.concatenate([[0.0], np.ones(M - 1)])[:, None]
    b = np.concatenate([[1.0], -knots[:-1]])
    c = np.concatenate([[vals[0]], deltas])
    a, b, c = _normalize_terms(a, b, c)
    center = 0.5 * (knots[0] + knots[-1])
    R = 0.5 * (knots[-1] - knots[0])
    rs = ReluSum(a, b, c, input_dim=1, radius=float(R), sup_error=0.0,
                 center=np.array([center]))

    n_sub = 12
    frac = np.linspace(0.0, 1.0, n_sub)
    fine = (knots[:-1, None] + np.diff(knots)[:, None] * frac[None, :])
    resid = (eval_batch(rs, fine.ravel()[:, None])
             - np.asarray(f(fine.ravel()), dtype=float)).reshape(M - 1, n_sub)
    grid_sup = float(np.max(np.abs(resid)))
    margin = 0.5 * float(np.max(np.abs(np.diff(resid, n=2, axis=1))))
    rs.sup_error = grid_sup + margin
    report = FitReport(
        sup_error=rs.sup_error,
        n_terms=rs.n_terms,
        coef_sum=rs.coef_sum,
        max_norm=rs.max_norm,
        radius=float(R),
        center=rs.center,
        grid_sup=grid_sup,
        margin=margin,
        breakpoints=knots,
    )
    return rs, report


def _directions(k: int, n_random: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic canonical directions plus seeded quasi-random l1-sphere fill."""
    dirs = []
    if k == 2:
        for i in range(12):
            th = np.pi * i / 12.0
            d = np.array([np.cos(th), np.sin(th)])
            dirs.append(d / np.sum(np.abs(d)))
    else:
        for i in range(k):
            e = np.zeros(k)
            e[i] = 1.0
            dirs.append(e)
        for i in range(k):
            for j in range(i + 1, k):
                for sgn in (1.0, -1.0):
                    d = np.zeros(k)
                    d[i], d[j] = 0.5, 0.5 * sgn
                    dirs.append(d)
    for _ in range(n_random):
        g = rng.standard_normal(k)
        while np.sum(np.abs(g)) < 1e-12:
            g = rng.standard_normal(k)
        dirs.append(g / np.sum(np.abs(g)))
    return np.array(dirs)


def _axis_grid(R: float, axis_values, k: int, n_cont: int, midpoints: bool = False):
    axes = []
    for i in range(k):
        if axis_values is not None and axis_values[i] is not None:
            axes.append(np.asarray(axis_values[i], dtype=float))
        elif midpoints:
            h = 2.0 * R / n_cont
            axes.append(np.linspace(-R + 0.5 * h, R - 0.5 * h, n_cont))
        else:
            axes.append(np.linspace(-R, R, n_cont))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    shape = tuple(len(ax) for ax in axes)
    return pts, shape


def fit_nd(
    f,
    k: int,
    R: float,
    M: int,
    seed: int = 0,
    axis_values: tuple | None = None,
) -> tuple[ReluSum, FitReport]:
    """Least-squares ridge fit of f on the box [-R, R]^k (k in {2, 3}).

    The dictionary holds a fixed fan of directions on the l1 sphere (canonical
    axes/diagonals plus a seeded quasi-random fill), each with an equispaced
    bias grid; coefficients are solved on a training grid and sup_error is
    measured on a disjoint denser grid.  An axis may be restricted to a finite
    value set (e.g. binary labels) via axis_values; the certificate then covers
    the restricted box only.
    """
    if k not in (2, 3):
        raise ValueError("fit_nd supports input dimension 2 or 3")
    if axis_values is not None and len(axis_values) != k:
        raise ValueError("axis_values must have one entry per axis")
    rng = np.random.default_rng(seed)

    n_random = 16 if M >= 400 else 8
    dirs = _directions(k, n_random, rng)
    n_can = len(dirs) - n_random
    budget = M - 1
    m_rand = 8 if n_random else 0
    m_can = max((budget - n_random * m_rand) // n_can, 4)
    knots_per_dir = [m_can] * n_can + [m_rand] * n_random

    def axis_bounds(i):
        if axis_values is not None and axis_values[i] is not None:
            v = np.asarray(axis_values[i], dtype=float)
            return float(np.min(v)), float(np.max(v))
        return -R, R

    bounds = [axis_bounds(i) for i in range(k)]
    a_rows, b_rows = [], []
    for d, m in zip(dirs, knots_per_dir):
        lo = sum(min(d[i] * bounds[i][0], d[i] * bounds[i][1]) for i in range(k))
        hi = sum(max(d[i] * bounds[i][0], d[i] * bounds[i][1]) for i in range(k))
        if hi - lo < 1e-12:
            continue
        ts = np.linspace(lo, hi, m, endpoint=False)
        for t in ts:
            a_rows.append(d)
            b_rows.append(-t)
    a_rows.append(np.zeros(k))
    b_rows.append(1.0)
    A = np.array(a_rows)
    B = np.array(b_rows)

    n_disc = 1
    n_cont_axes = 0
    for i in range(k):
        if axis_values is not None and axis_values[i] is not None:
            n_disc *= len(axis_values[i])
        else:
            n_cont_axes += 1
    base = {2: 41, 3: 17}[k]
    need = int(np.ceil((2.0 * len(B) / n_disc) ** (1.0 / max(n_cont_axes, 1)))) + 1
    n_train = max(base, need)
    pts, _ = _axis_grid(R, axis_values, k, n_train)
    y = np.asarray(f(pts), dtype=float)
    Phi = np.maximum(pts @ A.T + B, 0.0)
    coef, _, rank, _ = np.linalg.lstsq(Phi, y, rcond=1e-10)
    rank_deficient = rank < A.shape[0]

    a, b, c = _normalize_terms(A, B, coef)
    rs = ReluSum(a, b, c, input_dim=k, radius=float(R), sup_error=0.0)

    n_test = max({2: 120, 3: 50}[k], 3 * max(knots_per_dir))
    tpts, tshape = _axis_grid(R, axis_values, k, n_test, midpoints=True)
    resid = (eval_batch(rs, tpts) - np.asarray(f(tpts), dtype=float)).reshape(tshape)
    grid_sup = float(np.max(np.abs(resid)))
    margin = _second_diff_margin(resid)
    rs.sup_error = grid_sup + margin
    report = FitReport(
        sup_error=rs.sup_error,
        n_terms=rs.n_terms,
        coef_sum=rs.coef_sum,
        max_norm=rs.max_norm,
        radius=float(R),
        center=rs.center,
        grid_sup=grid_sup,
        margin=margin,
        rank=int(rank),
        rank_deficient=bool(rank_deficient),
        axis_values=axis_values,
    )
    return rs, report


def lift(rs: ReluSum, d: np.ndarray, k: int) -> ReluSum:
    """Turn a 1-D ReluSum g(t) into the ridge function g(d . z) on k inputs.

    The caller is responsible for the ridge range: d . z must stay inside the
    1-D fit interval for the sup_error to transfer.
    """
    if rs.input_dim != 1:
        raise ValueError("lift expects a 1-D ReluSum")
    d = np.asarray(d, dtype=float).ravel()
    if d.shape != (k,):
        raise ValueError("direction length must match the lifted dimension")
    a = rs.a[:, 0][:, None] * d[None, :]
    A, B, C = _normalize_terms(a, rs.b, rs.c)
    return ReluSum(A, B, C, input_dim=k, radius=np.inf, sup_error=rs.sup_error)


def combine(parts: list[ReluSum], k: int, radius: float,
            center: np.ndarray | None = None) -> ReluSum:
    """Sum of several ReluSum parts over a shared input space.

    sup_error adds across parts (triangle inequality), so the result is sound
    whenever each part's error is sound on the stated box.
    """
    if not parts:
        raise ValueError("need at least one part")
    for p in parts:
        if p.input_dim != k:
            raise ValueError("all parts must share the input dimension")
    a = np.concatenate([p.a for p in parts], axis=0)
    b = np.concatenate([p.b for p in parts])
    c = np.concatenate([p.c for p in parts])
    err = float(sum(p.sup_error for p in parts))
    return ReluSum(a, b, c, input_dim=k, radius=float(radius),
                   sup_error=err, center=center)


def exact_terms(a, b, c, k: int, radius: float = np.inf) -> ReluSum:
    """ReluSum from explicit terms with zero approximation error."""
    A, B, C = _normalize_terms(np.atleast_2d(np.asarray(a, dtype=float)), b, c)
    return ReluSum(A, B, C, input_dim=k, radius=float(radius), sup_error=0.0)


def fit_binary_gated(f, lo: float, hi: float, M: int) -> tuple[ReluSum, FitReport]:
    """Fit f(t, v) with a binary second input v in {0, 1}.

    Each slice f(., v) gets its own 1-D fit; a per-term offset of size
    G_m = sup of the term's pre-activation turns the other slice off exactly,
    so the certificate is the worse of the two slice errors.
    """
    parts = []
    errs = []
    for v in (0.0, 1.0):
        rs, rep = fit_interval(lambda t, v=v: f(t, v), lo, hi, M)
        G = np.maximum(0.0, np.maximum(rs.a[:, 0] * lo + rs.b,
                                       rs.a[:, 0] * hi + rs.b))
        if v == 1.0:
            a2 = np.stack([rs.a[:, 0], G], axis=1)
            b2 = rs.b - G
        else:
            a2 = np.stack([rs.a[:, 0], -G], axis=1)
            b2 = rs.b
        A, B, C = _normalize_terms(a2, b2, rs.c)
        parts.append(ReluSum(A, B, C, input_dim=2, radius=np.inf, sup_error=0.0))
        errs.append(rep.sup_error)
    out = combine(parts, 2, radius=0.5 * (hi - lo),
                  center=np.array([0.5 * (lo + hi), 0.5]))
    out.sup_error = float(max(errs))
    report = FitReport(
        sup_error=out.sup_error, n_terms=out.n_terms, coef_sum=out.coef_sum,
        max_norm=out.max_norm, radius=out.radius, center=out.center,
        grid_sup=out.sup_error, margin=0.0, axis_values=(None, (0.0, 1.0)),
    )
    return out, report


def indicator_pair(a: float) -> ReluSum:
    """Exact soft-indicator pair relu(a z + 0.5) - relu(a z - 0.5) on z = t - s.

    Equals 0 for z <= -1/(2a), 1 for z >= 1/(2a), linear in between.
    """
    if a <= 0:
        raise ValueError("sharpness must be positive")
    A = np.array([[a], [a]])
    B = np.array([0.5, -0.5])
    C = np.array([1.0, -1.0])
    A, B, C = _normalize_terms(A, B, C)
    return ReluSum(A, B, C, input_dim=1, radius=np.inf, sup_error=0.0)


def to_json(rs: ReluSum) -> str:
    import json

    obj = {
        "input_dim": rs.input_dim,
        "radius": rs.radius if np.isfinite(rs.radius) else None,
        "sup_error": rs.sup_error,
        "center": rs.center.tolist(),
        "terms": [[rs.a[m].tolist(), float(rs.b[m]), float(rs.c[m])] for m in range(rs.n_terms)],
    }
    return json.dumps(obj)


def from_json(s: str) -> ReluSum:
    import json

    obj = json.loads(s)
    a = np.array([t[0] for t in obj["terms"]])
    b = np.array([t[1] for t in obj["terms"]])
    c = np.array([t[2] for t in obj["terms"]])
    radius = obj["radius"] if obj["radius"] is not None else np.inf
    return ReluSum(
        a, b, c,
        input_dim=obj["input_dim"],
        radius=radius,
        sup_error=obj["sup_error"],
        center=np.array(obj["center"]),
    )
