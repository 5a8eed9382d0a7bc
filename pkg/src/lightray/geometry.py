"""Riemannian geometry on 2D spatial domains and Fermi charts along null rays.

The spatial manifold M is a unit disk or a rectangle carrying a metric given
either by analytic callbacks or by grid samples.  Metrics are extended past
the boundary by a quintic blend to the Euclidean metric so that maximal
geodesics, tubular neighborhoods and the null-ray charts remain well defined
slightly outside M.

Conventions: points are arrays of shape (..., 2); metric(x) -> (..., 2, 2);
metric_grad(x)[..., k, i, j] = d_k g_ij; metric_hess(x)[..., k, l, i, j]
= d_k d_l g_ij.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import quintic_step, quintic_step_d1, quintic_step_d2

SQ2 = np.sqrt(2.0)


class DomainError(ValueError):
    """Point outside the chart's domain of definition."""


class SingularMetricError(ValueError):
    """Metric matrix numerically singular; carries the condition number."""


class TrappingError(RuntimeError):
    """Geodesic exceeded the arc-length cap without exiting the domain."""


class ChartError(RuntimeError):
    """Fermi chart construction or inversion failure."""


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DiskDomain:
    radius: float = 1.0

    def boundary_value(self, x):
        return np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1)) - self.radius

    def contains(self, x, tol=1e-9):
        return self.boundary_value(x) <= tol

    @property
    def euclidean_diameter(self):
        return 2.0 * self.radius


@dataclass(frozen=True)
class RectDomain:
    x_min: float = -1.0
    x_max: float = 1.0
    y_min: float = -1.0
    y_max: float = 1.0

    def boundary_value(self, x):
        x = np.asarray(x)
        cx = 0.5 * (self.x_min + self.x_max)
        cy = 0.5 * (self.y_min + self.y_max)
        hx = 0.5 * (self.x_max - self.x_min)
        hy = 0.5 * (self.y_max - self.y_min)
        return np.maximum(np.abs(x[..., 0] - cx) - hx, np.abs(x[..., 1] - cy) - hy)

    def contains(self, x, tol=1e-9):
        return self.boundary_value(x) <= tol

    @property
    def euclidean_diameter(self):
        return float(np.hypot(self.x_max - self.x_min, self.y_max - self.y_min))


@dataclass(frozen=True)
class _EnlargedDomain:
    """Collar-enlarged domain used by extended charts."""

    base: object
    margin: float

    def boundary_value(self, x):
        return self.base.boundary_value(x) - self.margin

    def contains(self, x, tol=1e-9):
        return self.boundary_value(x) <= tol

    @property
    def euclidean_diameter(self):
        return self.base.euclidean_diameter + 2.0 * self.margin


# ---------------------------------------------------------------------------
# metric backends


class _EuclideanMetric:
    is_euclidean = True

    def g(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 2, 2))

    def g_all(self, x):
        return self.g(x), self.dg(x), self.d2g(x)


class _ConformalMetric:
    """g = exp(2*lam) * delta with lam(x) = amplitude * |x - center|^2."""

    is_euclidean = False

    def __init__(self, amplitude, center=(0.0, 0.0)):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)

    def _lam(self, x):
        d = x - self.center
        return self.amplitude * np.sum(d * d, axis=-1)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        f = np.exp(2.0 * self._lam(x))
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = f
        out[..., 1, 1] = f
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        f = np.exp(2.0 * self._lam(x))
        dlam = 2.0 * self.amplitude * d  # (..., k)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        for k in range(2):
            coeff = 2.0 * dlam[..., k] * f
            out[..., k, 0, 0] = coeff
            out[..., k, 1, 1] = coeff
        return out

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        f = np.exp(2.0 * self._lam(x))
        dlam = 2.0 * self.amplitude * d
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        for k in range(2):
            for l in range(2):
                hess_kl = 2.0 * self.amplitude if k == l else 0.0
                coeff = (2.0 * hess_kl + 4.0 * dlam[..., k] * dlam[..., l]) * f
                out[..., k, l, 0, 0] = coeff
                out[..., k, l, 1, 1] = coeff
        return out

    def g_all(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        f = np.exp(2.0 * self._lam(x))
        dlam = 2.0 * self.amplitude * d
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = f
        g[..., 1, 1] = f
        dg = np.zeros(x.shape[:-1] + (2, 2, 2))
        for k in range(2):
            coeff = 2.0 * dlam[..., k] * f
            dg[..., k, 0, 0] = coeff
            dg[..., k, 1, 1] = coeff
        d2g = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        for k in range(2):
            for l in range(2):
                hess_kl = 2.0 * self.amplitude if k == l else 0.0
                coeff = (2.0 * hess_kl + 4.0 * dlam[..., k] * dlam[..., l]) * f
                d2g[..., k, l, 0, 0] = coeff
                d2g[..., k, l, 1, 1] = coeff
        return g, dg, d2g


class _GridMetric:
    """Metric sampled on a uniform grid; derivatives by finite differences.

    metric_grad uses 4th-order central stencils, metric_hess 2nd-order, both
    evaluated on the grid and then interpolated (cubic) off the grid.
    """

    is_euclidean = False

    def __init__(self, xs, ys, samples):
        from scipy.interpolate import RegularGridInterpolator

        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        G = np.asarray(samples, dtype=float)  # (nx, ny, 2, 2)
        if G.shape != (self.xs.size, self.ys.size, 2, 2):
            raise ValueError("grid samples must have shape (nx, ny, 2, 2)")
        hx = self.xs[1] - self.xs[0]
        hy = self.ys[1] - self.ys[0]

        def d4(arr, axis, h):
            out = np.gradient(arr, h, axis=axis, edge_order=2)
            # 4th-order central in the interior
            core = [slice(None)] * arr.ndim
            core[axis] = slice(2, -2)
            interior = (
                -np.take(arr, range(4, arr.shape[axis]), axis=axis)
                + 8.0 * np.take(arr, range(3, arr.shape[axis] - 1), axis=axis)
                - 8.0 * np.take(arr, range(1, arr.shape[axis] - 3), axis=axis)
                + np.take(arr, range(0, arr.shape[axis] - 4), axis=axis)
            ) / (12.0 * h)
            out[tuple(core)] = interior
            return out

        dG = np.stack([d4(G, 0, hx), d4(G, 1, hy)], axis=2)  # (nx, ny, k, 2, 2)
        d2G = np.empty((self.xs.size, self.ys.size, 2, 2, 2, 2))
        for k in range(2):
            d2G[:, :, k, 0] = np.gradient(dG[:, :, k], hx, axis=0, edge_order=2)
            d2G[:, :, k, 1] = np.gradient(dG[:, :, k], hy, axis=1, edge_order=2)

        kw = dict(method="cubic", bounds_error=False, fill_value=None)
        self._g = RegularGridInterpolator((self.xs, self.ys), G, **kw)
        self._dg = RegularGridInterpolator((self.xs, self.ys), dG, **kw)
        self._d2g = RegularGridInterpolator((self.xs, self.ys), d2G, **kw)

    def _clip(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = np.clip(x[..., 0], self.xs[0], self.xs[-1])
        out[..., 1] = np.clip(x[..., 1], self.ys[0], self.ys[-1])
        return out

    def g(self, x):
        return self._g(self._clip(x))

    def dg(self, x):
        return self._dg(self._clip(x))

    def d2g(self, x):
        return self._d2g(self._clip(x))


class _BlendedMetric:
    """Base metric inside the domain, blended to Euclidean over a collar.

    With u = (boundary_value(x) - offset)/width and S the quintic step,
    g_ext = (1 - S(u)) g + S(u) I; derivatives follow by the product rule,
    which keeps the extension C^2 across both collar edges.  The collar
    starts at distance `offset` outside the boundary so that the thin layer
    the ray windows and tubes actually visit stays on the analytic metric.
    """

    def __init__(self, base, domain, width=0.2, offset=0.1):
        self.base = base
        self.domain = domain
        self.width = float(width)
        self.offset = float(offset)
        self.is_euclidean = base.is_euclidean

    def _blend(self, x):
        # u, du_k, d2u_kl of the normalized collar coordinate (disk/rect aware)
        x = np.asarray(x, dtype=float)
        if isinstance(self.domain, DiskDomain):
            r = np.sqrt(np.sum(x * x, axis=-1))
            rs = np.maximum(r, 1e-14)
            u = (r - self.domain.radius - self.offset) / self.width
            xhat = x / rs[..., None]
            du = xhat / self.width
            d2u = (np.eye(2) - xhat[..., :, None] * xhat[..., None, :]) / (
                rs[..., None, None] * self.width
            )
        else:
            # rectangle: blend on max(|x-c|-h) — smooth a.e.; corners are a
            # measure-zero set never hit by the integrators in practice
            bx = np.abs(x[..., 0] - 0.5 * (self.domain.x_min + self.domain.x_max)) - 0.5 * (
                self.domain.x_max - self.domain.x_min
            )
            by = np.abs(x[..., 1] - 0.5 * (self.domain.y_min + self.domain.y_max)) - 0.5 * (
                self.domain.y_max - self.domain.y_min
            )
            u = (np.maximum(bx, by) - self.offset) / self.width
            du = np.zeros_like(x)
            pick_x = bx >= by
            sx = np.sign(x[..., 0] - 0.5 * (self.domain.x_min + self.domain.x_max))
            sy = np.sign(x[..., 1] - 0.5 * (self.domain.y_min + self.domain.y_max))
            du[..., 0] = np.where(pick_x, sx / self.width, 0.0)
            du[..., 1] = np.where(pick_x, 0.0, sy / self.width)
            d2u = np.zeros(x.shape[:-1] + (2, 2))
        return u, du, d2u

    def g(self, x):
        gb = self.base.g(x)
        u, _, _ = self._blend(x)
        s = quintic_step(u)[..., None, None]
        return (1.0 - s) * gb + s * np.eye(2)

    def dg(self, x):
        gb = self.base.g(x)
        dgb = self.base.dg(x)
        u, du, _ = self._blend(x)
        s = quintic_step(u)
        s1 = quintic_step_d1(u)
        diff = gb - np.eye(2)
        out = (1.0 - s)[..., None, None, None] * dgb
        out -= (s1[..., None] * du)[..., :, None, None] * diff[..., None, :, :]
        return out

    def d2g(self, x):
        return self._d2g_from(self.base.g(x), self.base.dg(x), self.base.d2g(x), x)

    def _d2g_from(self, gb, dgb, d2gb, x):
        u, du, d2u = self._blend(x)
        s = quintic_step(u)
        s1 = quintic_step_d1(u)
        s2 = quintic_step_d2(u)
        diff = gb - np.eye(2)
        out = (1.0 - s)[..., None, None, None, None] * d2gb
        # -S'(u) (u_k dgb_l + u_l dgb_k)
        t = (s1[..., None] * du)[..., :, None, None, None] * dgb[..., None, :, :, :]
        out -= t + np.swapaxes(t, -4, -3)
        # -(S'' u_k u_l + S' u_kl) diff
        coeff = (
            s2[..., None, None] * du[..., :, None] * du[..., None, :]
            + s1[..., None, None] * d2u
        )
        out -= coeff[..., :, :, None, None] * diff[..., None, None, :, :]
        return out

    def g_all(self, x):
        if hasattr(self.base, "g_all"):
            gb, dgb, d2gb = self.base.g_all(x)
        else:
            gb, dgb, d2gb = self.base.g(x), self.base.dg(x), self.base.d2g(x)
        u, du, _ = self._blend(x)
        s = quintic_step(u)
        s1 = quintic_step_d1(u)
        diff = gb - np.eye(2)
        g = (1.0 - s)[..., None, None] * gb + s[..., None, None] * np.eye(2)
        dg = (1.0 - s)[..., None, None, None] * dgb
        dg = dg - (s1[..., None] * du)[..., :, None, None] * diff[..., None, :, :]
        return g, dg, self._d2g_from(gb, dgb, d2gb, x)


# ---------------------------------------------------------------------------
# chart


class RiemannianChart:
    """Spatial metric with analytic or grid-sampled derivatives on a 2D domain."""

    dim = 2

    def __init__(self, domain, backend, mode="analytic"):
        self.domain = domain
        self._backend = backend
        self.mode = mode

    @classmethod
    def euclidean(cls, domain=None):
        return cls(domain or DiskDomain(), _EuclideanMetric())

    @classmethod
    def conformal(cls, amplitude, domain=None, center=(0.0, 0.0)):
        return cls(domain or DiskDomain(), _ConformalMetric(amplitude, center))

    @classmethod
    def from_grid(cls, xs, ys, samples, domain=None):
        return cls(domain or DiskDomain(), _GridMetric(xs, ys, samples), mode="grid")

    @classmethod
    def from_config(cls, cfg):
        domain = cfg.get("domain", "disk")
        if domain == "disk":
            dom = DiskDomain(cfg.get("radius", 1.0))
        elif domain == "rect":
            b = cfg.get("bounds", [-1.0, 1.0, -1.0, 1.0])
            dom = RectDomain(*b)
        else:
            raise ValueError(f"unknown domain {domain!r}")
        kind = cfg.get("metric", "euclidean")
        if kind == "euclidean":
            return cls.euclidean(dom)
        if kind == "conformal":
            return cls.conformal(
                cfg.get("lambda_amplitude", 0.1), dom, cfg.get("center", (0.0, 0.0))
            )
        raise ValueError(f"unknown metric {kind!r}")

    @property
    def is_euclidean(self):
        return getattr(self._backend, "is_euclidean", False)

    @property
    def is_extended(self):
        return isinstance(self._backend, _BlendedMetric)

    def metric(self, x):
        return self._backend.g(x)

    def metric_grad(self, x):
        return self._backend.dg(x)

    def metric_hess(self, x):
        return self._backend.d2g(x)

    def metric_all(self, x):
        if hasattr(self._backend, "g_all"):
            return self._backend.g_all(x)
        return self._backend.g(x), self._backend.dg(x), self._backend.d2g(x)

    def extend(self, collar=0.2, margin=None):
        """Chart with the metric blended to Euclidean outside the domain."""
        if self.is_extended:
            return self
        blended = _BlendedMetric(self._backend, self.domain, collar)
        big = _EnlargedDomain(self.domain, margin if margin is not None else 10.0)
        return RiemannianChart(big, blended, mode=self.mode)

    def eig_bounds(self, n_samples=400, seed=0):
        """(lambda_min, lambda_max) of g over random domain points."""
        rng = np.random.default_rng(seed)
        pts = []
        diam = self.domain.euclidean_diameter
        while len(pts) < n_samples:
            cand = rng.uniform(-diam, diam, size=(4 * n_samples, 2))
            cand = cand[self.domain.contains(cand)]
            pts.extend(cand[: n_samples - len(pts)])
        pts = np.asarray(pts)
        eig = np.linalg.eigvalsh(self.metric(pts))
        return float(eig.min()), float(eig.max())

    def norm(self, x, v):
        g = self.metric(x)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature


def christoffel(chart, x):
    """Gamma^i_{jk} at x; raises DomainError outside the chart's domain."""
    x = np.asarray(x, dtype=float)
    if not np.all(chart.domain.contains(x)):
        raise DomainError("point outside chart domain")
    g = chart.metric(x)
    cond = np.linalg.cond(g)
    if np.any(cond > 1e12) or np.any(~np.isfinite(cond)):
        raise SingularMetricError(f"metric condition number {np.max(cond):.3e}")
    return _christoffel(chart, x)


def _christoffel(chart, x):
    g = chart.metric(x)
    ginv = np.linalg.inv(g)
    dg = chart.metric_grad(x)
    # Gamma^i_{jk} = 1/2 g^{im} (d_j g_mk + d_k g_mj - d_m g_jk)
    bracket = (
        np.einsum("...jmk->...mjk", dg)
        + np.einsum("...kmj->...mjk", dg)
        - np.einsum("...mjk->...mjk", dg)
    )
    return 0.5 * np.einsum("...im,...mjk->...ijk", ginv, bracket)


def _christoffel_grad(chart, x):
    """d_l Gamma^i_{jk} from metric_grad and metric_hess."""
    return _christoffel_pair(chart, x)[1]


def _christoffel_pair(chart, x):
    """(Gamma, d Gamma) sharing the metric inverse and first derivatives."""
    g, dg, d2g = chart.metric_all(x)
    ginv = np.linalg.inv(g)
    bracket = (
        np.einsum("...jmk->...mjk", dg)
        + np.einsum("...kmj->...mjk", dg)
        - dg
    )
    gam = 0.5 * np.einsum("...im,...mjk->...ijk", ginv, bracket)
    # d_l bracket_mjk
    dbracket = (
        np.einsum("...ljmk->...lmjk", d2g)
        + np.einsum("...lkmj->...lmjk", d2g)
        - d2g
    )
    dginv = -np.einsum("...ia,...lab,...bm->...lim", ginv, dg, ginv)
    dgam = 0.5 * (
        np.einsum("...lim,...mjk->...lijk", dginv, bracket)
        + np.einsum("...im,...lmjk->...lijk", ginv, dbracket)
    )
    return gam, dgam


def gauss_curvature(chart, x):
    """Gauss curvature of (M, g); for g = e^{2 lam} delta equals -e^{-2lam} Lap(lam)."""
    x = np.asarray(x, dtype=float)
    gam = _christoffel(chart, x)
    dgam = _christoffel_grad(chart, x)
    # R^i_{jkl} = d_k Gam^i_{lj} - d_l Gam^i_{kj} + Gam^i_{km} Gam^m_{lj} - Gam^i_{lm} Gam^m_{kj}
    riem = (
        np.einsum("...kilj->...ijkl", dgam)
        - np.einsum("...likj->...ijkl", dgam)
        + np.einsum("...ikm,...mlj->...ijkl", gam, gam)
        - np.einsum("...ilm,...mkj->...ijkl", gam, gam)
    )
    g = chart.metric(x)
    r_low = np.einsum("...im,...mjkl->...ijkl", g, riem)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
    return r_low[..., 0, 1, 0, 1] / det


# ---------------------------------------------------------------------------
# geodesics


@dataclass
class GeodesicPath:
    """Sampled unit-speed geodesic; samples may extend past the boundary."""

    chart: RiemannianChart
    t: np.ndarray          # (m,) arc-length parameter, t=0 at the start point
    x: np.ndarray          # (m, 2)
    v: np.ndarray          # (m, 2)
    exit_time: float
    step: float
    _acc: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._acc is None:
            gam = _christoffel(self.chart, self.x)
            self._acc = -np.einsum("...ijk,...j,...k->...i", gam, self.v, self.v)

    @property
    def start(self):
        i0 = int(np.argmin(np.abs(self.t)))
        return self.x[i0], self.v[i0]

    def at(self, tq):
        """Cubic-Hermite position and velocity at query parameters (batched)."""
        tq = np.asarray(tq, dtype=float)
        h = self.step
        idx = np.clip(((tq - self.t[0]) / h).astype(int), 0, len(self.t) - 2)
        tau = (tq - self.t[idx]) / h
        t2 = tau * tau
        t3 = t2 * tau
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + tau
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        x0, x1 = self.x[idx], self.x[idx + 1]
        v0, v1 = self.v[idx], self.v[idx + 1]
        a0, a1 = self._acc[idx], self._acc[idx + 1]
        pos = (
            h00[..., None] * x0 + h10[..., None] * (h * v0)
            + h01[..., None] * x1 + h11[..., None] * (h * v1)
        )
        vel = (
            h00[..., None] * v0 + h10[..., None] * (h * a0)
            + h01[..., None] * v1 + h11[..., None] * (h * a1)
        )
        return pos, vel

    def to_csv(self, path):
        data = np.column_stack([self.t, self.x, self.v])
        np.savetxt(path, data, delimiter=",", header="t,x1,x2,v1,v2", comments="")


def _geodesic_rhs(chart, x, v):
    gam = _christoffel(chart, x)
    return v, -np.einsum("...ijk,...j,...k->...i", gam, v, v)


def _rk4_step(chart, x, v, h):
    k1x, k1v = _geodesic_rhs(chart, x, v)
    k2x, k2v = _geodesic_rhs(chart, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = _geodesic_rhs(chart, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = _geodesic_rhs(chart, x + h * k3x, v + h * k3v)
    return (
        x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x),
        v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v),
    )


def integrate_geodesic(chart, y, v, step=None, extend=0.0, l_max=None, n_steps=2000):
    """Maximal unit-speed geodesic from (y, v); boundary exit by bisection.

    `extend` > 0 continues the path past both endpoints (using the blended
    metric extension) which the Fermi chart construction requires.
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = chart.norm(y, v)
    if abs(nv - 1.0) > 1e-6:
        raise ValueError("initial direction must be g-unit")
    v = v / nv
    base = chart
    ext = chart.extend()
    if l_max is None:
        l_max = 50.0 * base.domain.euclidean_diameter

    # pass 1: locate the exit with a coarse fixed step
    h0 = base.domain.euclidean_diameter / 800.0
    x_c, v_c = y.copy(), v.copy()
    t_c = 0.0
    exited = False
    while t_c < l_max:
        x_n, v_n = _rk4_step(ext, x_c, v_c, h0)
        t_c += h0
        if base.domain.boundary_value(x_n) > 0.0:
            exited = True
            break
        x_c, v_c = x_n, v_n
    if not exited:
        raise TrappingError(f"arc length exceeded cap {l_max:.3g} without exit")

    # bisection on the crossing step
    lo, hi = 0.0, h0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4_step(ext, x_c, v_c, mid)
        if base.domain.boundary_value(xm) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-14:
            break
    tau_exit = (t_c - h0) + 0.5 * (lo + hi)

    # pass 2: uniform resampling over [-n_b h, tau_exit + n_f h]
    h = tau_exit / n_steps if step is None else step
    n_fwd = n_steps if step is None else int(np.ceil(tau_exit / h))
    n_back = int(np.ceil(extend / h)) if extend > 0 else 0
    n_ext = int(np.ceil(extend / h)) if extend > 0 else 0
    ts = np.arange(-n_back, n_fwd + n_ext + 1) * h
    xs = np.empty((ts.size, 2))
    vs = np.empty((ts.size, 2))
    i0 = n_back
    xs[i0], vs[i0] = y, v
    for i in range(i0 + 1, ts.size):
        xs[i], vs[i] = _rk4_step(ext, xs[i - 1], vs[i - 1], h)
    for i in range(i0 - 1, -1, -1):
        xs[i], vs[i] = _rk4_step(ext, xs[i + 1], vs[i + 1], -h)
    return GeodesicPath(chart=ext, t=ts, x=xs, v=vs, exit_time=tau_exit, step=h)


def parallel_transport(chart, path, frame0):
    """Transport frame0 (rows are vectors) along the path; returns (m, k, 2)."""
    frame0 = np.atleast_2d(np.asarray(frame0, dtype=float))
    m = path.t.size
    frames = np.empty((m, frame0.shape[0], 2))
    i0 = int(np.argmin(np.abs(path.t)))
    frames[i0] = frame0
    h = path.step

    def rhs(tq, e):
        pos, vel = path.at(tq)
        gam = _christoffel(chart, pos)
        return -np.einsum("ijk,j,...k->...i", gam, vel, e)

    def step(i_from, i_to):
        hh = path.t[i_to] - path.t[i_from]
        e = frames[i_from]
        t0 = path.t[i_from]
        k1 = rhs(t0, e)
        k2 = rhs(t0 + 0.5 * hh, e + 0.5 * hh * k1)
        k3 = rhs(t0 + 0.5 * hh, e + 0.5 * hh * k2)
        k4 = rhs(t0 + hh, e + hh * k3)
        frames[i_to] = e + (hh / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    for i in range(i0 + 1, m):
        step(i - 1, i)
    for i in range(i0 - 1, -1, -1):
        step(i + 1, i)
    return frames


def exponential_map(chart, p, w, n_steps=16):
    """exp_p(w): integrate the geodesic with initial velocity w to parameter 1."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    x, v = p, w
    h = 1.0 / n_steps
    for _ in range(n_steps):
        x, v = _rk4_step(chart, x, v, h)
    return x


def _exp_with_jacobian(chart, p, w, dp, dw, n_steps=16):
    """exp_p(w) together with its differential along given variations.

    dp, dw have shape (..., 2, k): k simultaneous variations of the initial
    point and velocity.  Integrates the geodesic and its variational system.
    """
    x = np.asarray(p, dtype=float)
    v = np.asarray(w, dtype=float)
    jx = np.asarray(dp, dtype=float)
    jv = np.asarray(dw, dtype=float)
    h = 1.0 / n_steps

    def rhs(x, v, jx, jv):
        gam, dgam = _christoffel_pair(chart, x)
        a = -np.einsum("...ijk,...j,...k->...i", gam, v, v)
        ja = -np.einsum("...lijk,...j,...k,...lc->...ic", dgam, v, v, jx) \
             - 2.0 * np.einsum("...ijk,...j,...kc->...ic", gam, v, jv)
        return v, a, jv, ja

    for _ in range(n_steps):
        k1 = rhs(x, v, jx, jv)
        k2 = rhs(x + 0.5 * h * k1[0], v + 0.5 * h * k1[1],
                 jx + 0.5 * h * k1[2], jv + 0.5 * h * k1[3])
        k3 = rhs(x + 0.5 * h * k2[0], v + 0.5 * h * k2[1],
                 jx + 0.5 * h * k2[2], jv + 0.5 * h * k2[3])
        k4 = rhs(x + h * k3[0], v + h * k3[1], jx + h * k3[2], jv + h * k3[3])
        x = x + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        jx = jx + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        jv = jv + (h / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
    return x, jx


# ---------------------------------------------------------------------------
# null geodesics and Fermi charts


@dataclass
class NullGeodesic:
    """beta(t) = (time_offset + t, gamma(t)) over the window [tau_minus, tau_plus].

    tau_minus/tau_plus are time coordinates; for a maximal ray they are the
    entry and exit times of the spatial chord.
    """

    spatial: GeodesicPath
    time_offset: float
    tau_minus: float
    tau_plus: float
    eps: float = 0.1

    @classmethod
    def maximal(cls, chart, y, v, time_offset=0.0, eps=0.1, extra_extend=0.35, **kw):
        path = integrate_geodesic(chart, y, v, extend=eps + extra_extend, **kw)
        return cls(
            spatial=path,
            time_offset=time_offset,
            tau_minus=time_offset,
            tau_plus=time_offset + path.exit_time,
            eps=eps,
        )

    def window(self, tau_minus, tau_plus, eps=None):
        """Sub-window copy (times inside the original span)."""
        return NullGeodesic(
            spatial=self.spatial,
            time_offset=self.time_offset,
            tau_minus=tau_minus,
            tau_plus=tau_plus,
            eps=self.eps if eps is None else eps,
        )

    # s-coordinates of the six marked points along the ray
    @property
    def a(self):
        return SQ2 * (self.tau_minus - self.eps)

    @property
    def b(self):
        return SQ2 * (self.tau_plus + self.eps)

    @property
    def a0(self):
        return SQ2 * (self.tau_minus - 0.5 * self.eps)

    @property
    def b0(self):
        return SQ2 * (self.tau_plus + 0.5 * self.eps)

    @property
    def s_minus(self):
        return SQ2 * self.tau_minus

    @property
    def s_plus(self):
        return SQ2 * self.tau_plus

    def curve_param(self, t_time):
        return np.asarray(t_time) - self.time_offset

    def beta(self, t_time):
        """Spacetime point (t, x) and spatial velocity at coordinate time t."""
        pos, vel = self.spatial.at(self.curve_param(t_time))
        return pos, vel

    def null_defect(self, t_time):
        """<beta', beta'>_gbar = |gamma'|_g^2 - 1 at the given times."""
        pos, vel = self.beta(t_time)
        return self.spatial.chart.norm(pos, vel) ** 2 - 1.0


class FermiChart:
    """Null-ray chart z = (s, r, z2) with gbar = 2 ds dr + dz2^2 on the ray."""

    DELTA_CANDIDATES = (0.2, 0.1, 0.05, 0.025)
    is_flat = False

    def __init__(self, chart, ray, tube_radius, exp_steps=16):
        self.chart = chart.extend()
        self.ray = ray
        self.tube_radius = float(tube_radius)
        self.exp_steps = exp_steps
        self.spatial_dim = 2
        path = ray.spatial
        # arc parameter u of the curve; y1 = u - (u_minus - eps)
        self._u_minus = ray.tau_minus - ray.time_offset
        u_lo = self._u_minus - ray.eps - 1e-9
        u_hi = (ray.tau_plus - ray.time_offset) + ray.eps + 1e-9
        if path.t[0] > u_lo or path.t[-1] < u_hi:
            raise ChartError("spatial path does not cover the extended window")
        self._check_self_intersection()
        e2_0 = self._normal_at(*path.at(0.0))
        fr = parallel_transport(self.chart, path, e2_0[None, :])
        self._e2 = fr[:, 0, :]
        gam = _christoffel(self.chart, path.x)
        self._de2 = -np.einsum("mijk,mj,mk->mi", gam, path.v, self._e2)

    def _normal_at(self, x, v):
        g = self.chart.metric(x)
        n = np.array([-v[1], v[0]])
        # Gram-Schmidt against v in the metric g
        n = n - (np.einsum("ij,i,j->", g, n, v) / np.einsum("ij,i,j->", g, v, v)) * v
        return n / np.sqrt(np.einsum("ij,i,j->", g, n, n))

    def _check_self_intersection(self):
        path = self.ray.spatial
        sel = (path.t >= self._u_minus - self.ray.eps) & (
            path.t <= (self.ray.tau_plus - self.ray.time_offset) + self.ray.eps
        )
        pts = path.x[sel][::20]
        ts = path.t[sel][::20]
        if len(pts) < 3:
            return
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        dt = np.abs(ts[:, None] - ts[None, :])
        bad = (dt > 0.5) & (d2 < (0.25 * 0.5) ** 2)
        if np.any(bad):
            raise ChartError("ray self-intersects inside the requested window")

    def e2_at(self, u):
        """Parallel-transported transverse unit vector at curve parameter u."""
        path = self.ray.spatial
        h = path.step
        idx = np.clip(((np.asarray(u) - path.t[0]) / h).astype(int), 0, len(path.t) - 2)
        tau = (np.asarray(u) - path.t[idx]) / h
        t2, t3 = tau * tau, tau**3
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + tau
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        return (
            h00[..., None] * self._e2[idx] + h10[..., None] * (h * self._de2[idx])
            + h01[..., None] * self._e2[idx + 1] + h11[..., None] * (h * self._de2[idx + 1])
        )

    # -- coordinate maps ---------------------------------------------------

    def _decompose(self, z):
        z = np.asarray(z, dtype=float)
        s, r, z2 = z[..., 0], z[..., 1], z[..., 2]
        y1 = (s + r - self.ray.a) / SQ2
        t = (s - r) / SQ2
        u = y1 + (self._u_minus - self.ray.eps)
        return s, r, z2, y1, t, u

    def _maps(self, z):
        """Point (t, x) and Jacobian d(t,x)/dz in one variational integration."""
        s, r, z2, y1, t, u = self._decompose(z)
        base, vel = self.ray.spatial.at(u)
        e2 = self.e2_at(u)
        gam = _christoffel(self.chart, base)
        de2 = -np.einsum("...ijk,...j,...k->...i", gam, vel, e2)
        # variations wrt (y1, z2) of p = base, w = z2*e2
        dp = np.stack([vel, np.zeros_like(vel)], axis=-1)
        dw = np.stack([z2[..., None] * de2, e2], axis=-1)
        xs, jx = _exp_with_jacobian(
            self.chart, base, z2[..., None] * e2, dp, dw, self.exp_steps
        )
        p = np.concatenate([t[..., None], xs], axis=-1)
        dxdy1, dxdz2 = jx[..., 0], jx[..., 1]
        J = np.zeros(z2.shape + (3, 3))
        J[..., 0, 0] = 1.0 / SQ2
        J[..., 0, 1] = -1.0 / SQ2
        J[..., 1:, 0] = dxdy1 / SQ2
        J[..., 1:, 1] = dxdy1 / SQ2
        J[..., 1:, 2] = dxdz2
        return p, J

    def from_fermi(self, z):
        """(s, r, z2) -> (t, x1, x2), batched."""
        s, r, z2, y1, t, u = self._decompose(z)
        base, _ = self.ray.spatial.at(u)
        if np.all(z2 == 0.0):
            return np.concatenate([t[..., None], base], axis=-1)
        e2 = self.e2_at(u)
        x = exponential_map(self.chart, base, z2[..., None] * e2, self.exp_steps)
        return np.concatenate([t[..., None], x], axis=-1)

    def jacobian(self, z):
        """d(t, x)/d(s, r, z2) via the variational geodesic equations."""
        return self._maps(z)[1]

    def maps_and_metric(self, z):
        """(points, Jacobian, pullback metric) from one variational pass."""
        p, J = self._maps(z)
        g_spat = self.chart.metric(p[..., 1:])
        G = np.zeros(p.shape[:-1] + (3, 3))
        G[..., 0, 0] = -1.0
        G[..., 1:, 1:] = g_spat
        return p, J, np.einsum("...ai,...ab,...bj->...ij", J, G, J)

    def metric(self, z):
        """Pullback spacetime metric gbar in Fermi coordinates, (..., 3, 3)."""
        return self.maps_and_metric(z)[2]

    def metric_inv(self, z):
        return np.linalg.inv(self.metric(z))

    def volume_density(self, z):
        return np.sqrt(np.abs(np.linalg.det(self.metric(z))))

    def tube_tabulate(self, s_nodes, tr_nodes, max_substep=0.02):
        """Points, Jacobians and pullback metric on a tensor tube grid.

        Exploits that all grid points sharing (s, r) lie on one transverse
        geodesic: marches the z2 ladder once per base point, carrying the
        variational state.  Shapes: (ns, nr, nz, ...) with nr = nz =
        len(tr_nodes).
        """
        s_nodes = np.asarray(s_nodes, dtype=float)
        tr_nodes = np.asarray(tr_nodes, dtype=float)
        ns, ntr = s_nodes.size, tr_nodes.size
        S, R = np.meshgrid(s_nodes, tr_nodes, indexing="ij")
        y1 = (S + R - self.ray.a) / SQ2
        t = (S - R) / SQ2
        u = (y1 + (self._u_minus - self.ray.eps)).reshape(-1)
        base, vel = self.ray.spatial.at(u)
        e2 = self.e2_at(u)
        gam = _christoffel(self.chart, base)
        de2 = -np.einsum("...ijk,...j,...k->...i", gam, vel, e2)

        chart = self.chart

        def rhs(x, v, jx, jv):
            gm, dgm = _christoffel_pair(chart, x)
            a = -np.einsum("...ijk,...j,...k->...i", gm, v, v)
            ja = -np.einsum("...lijk,...j,...k,...l->...i", dgm, v, v, jx) \
                 - 2.0 * np.einsum("...ijk,...j,...k->...i", gm, v, jv)
            return v, a, jv, ja

        def march(x, v, jx, jv, dz):
            n_sub = max(1, int(np.ceil(abs(dz) / max_substep)))
            h = dz / n_sub
            for _ in range(n_sub):
                k1 = rhs(x, v, jx, jv)
                k2 = rhs(x + 0.5 * h * k1[0], v + 0.5 * h * k1[1],
                         jx + 0.5 * h * k1[2], jv + 0.5 * h * k1[3])
                k3 = rhs(x + 0.5 * h * k2[0], v + 0.5 * h * k2[1],
                         jx + 0.5 * h * k2[2], jv + 0.5 * h * k2[3])
                k4 = rhs(x + h * k3[0], v + h * k3[1], jx + h * k3[2],
                         jv + h * k3[3])
                x = x + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
                v = v + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
                jx = jx + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
                jv = jv + (h / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
            return x, v, jx, jv

        m = u.size
        xs = np.empty((m, ntr, 2))
        tangents = np.empty((m, ntr, 2))
        jac_y1 = np.empty((m, ntr, 2))
        order = np.argsort(np.abs(tr_nodes))
        # march outward from z2 = 0 separately for each sign
        for sign in (1, -1):
            idxs = [i for i in order if (tr_nodes[i] > 0) == (sign > 0) or tr_nodes[i] == 0]
            idxs = sorted(idxs, key=lambda i: abs(tr_nodes[i]))
            x, v, jx, jv = base.copy(), e2.copy(), vel.copy(), de2.copy()
            prev = 0.0
            for i in idxs:
                zt = tr_nodes[i]
                if zt == 0.0 and sign < 0:
                    continue
                x, v, jx, jv = march(x, v, jx, jv, zt - prev)
                prev = zt
                xs[:, i] = x
                tangents[:, i] = v
                jac_y1[:, i] = jx
        pts = np.empty((ns, ntr, ntr, 3))
        pts[..., 0] = t[:, :, None]
        pts[..., 1:] = xs.reshape(ns, ntr, ntr, 2)
        J = np.zeros((ns, ntr, ntr, 3, 3))
        J[..., 0, 0] = 1.0 / SQ2
        J[..., 0, 1] = -1.0 / SQ2
        jy = jac_y1.reshape(ns, ntr, ntr, 2)
        J[..., 1:, 0] = jy / SQ2
        J[..., 1:, 1] = jy / SQ2
        J[..., 1:, 2] = tangents.reshape(ns, ntr, ntr, 2)
        g_spat = self.chart.metric(pts[..., 1:])
        G = np.zeros(pts.shape[:-1] + (3, 3))
        G[..., 0, 0] = -1.0
        G[..., 1:, 1:] = g_spat
        G = np.einsum("...ai,...ab,...bj->...ij", J, G, J)
        return pts, J, G

    def to_fermi(self, p, tol=1e-12, max_iter=50):
        """(t, x) -> (s, r, z2) by Newton on the transverse exponential."""
        p = np.asarray(p, dtype=float)
        t = p[..., 0]
        x = p[..., 1:]
        path = self.ray.spatial
        # initial guess: nearest stored sample (strided to bound memory)
        stride = max(1, path.t.size // 300)
        d2 = np.sum((x[..., None, :] - path.x[::stride]) ** 2, axis=-1)
        u = path.t[::stride][np.argmin(d2, axis=-1)]
        z2 = np.zeros_like(u)
        for _ in range(max_iter):
            base, vel = path.at(u)
            e2 = self.e2_at(u)
            gam = _christoffel(self.chart, base)
            de2 = -np.einsum("...ijk,...j,...k->...i", gam, vel, e2)
            dp = np.stack([vel, np.zeros_like(vel)], axis=-1)
            dw = np.stack([z2[..., None] * de2, e2], axis=-1)
            xs, jx = _exp_with_jacobian(self.chart, base, z2[..., None] * e2, dp, dw,
                                        self.exp_steps)
            res = xs - x
            if np.max(np.abs(res)) < tol:
                break
            try:
                delta = np.linalg.solve(jx, res[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise ChartError("chart inversion failed (degenerate Jacobian)") from exc
            u = u - delta[..., 0]
            z2 = z2 - delta[..., 1]
        else:
            if np.max(np.abs(res)) > 1e-8:
                raise ChartError("chart inversion did not converge")
        y1 = u - (self._u_minus - self.ray.eps)
        s = (SQ2 * y1 + self.ray.a + SQ2 * t) / 2.0
        r = (SQ2 * y1 + self.ray.a - SQ2 * t) / 2.0
        return np.stack([s, r, z2], axis=-1)


class FlatChordFermiChart(FermiChart):
    """Closed-form chart for a straight chord in the Euclidean plane."""

    is_flat = True

    def __init__(self, chart, ray, tube_radius):
        self.chart = chart.extend()
        self.ray = ray
        self.tube_radius = float(tube_radius)
        self.spatial_dim = 2
        self._u_minus = ray.tau_minus - ray.time_offset
        x0, v0 = ray.spatial.at(0.0)
        self._entry = x0
        self._dir = v0 / np.linalg.norm(v0)
        self._nrm = np.array([-self._dir[1], self._dir[0]])

    def e2_at(self, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self._nrm, u.shape + (2,)).copy()

    def from_fermi(self, z):
        s, r, z2, y1, t, u = self._decompose(z)
        x = self._entry + u[..., None] * self._dir + z2[..., None] * self._nrm
        return np.concatenate([t[..., None], x], axis=-1)

    def jacobian(self, z):
        z = np.asarray(z, dtype=float)
        J = np.zeros(z.shape[:-1] + (3, 3))
        J[..., 0, 0] = 1.0 / SQ2
        J[..., 0, 1] = -1.0 / SQ2
        J[..., 1:, 0] = self._dir / SQ2
        J[..., 1:, 1] = self._dir / SQ2
        J[..., 1:, 2] = self._nrm
        return J

    def metric(self, z):
        z = np.asarray(z, dtype=float)
        G = np.zeros(z.shape[:-1] + (3, 3))
        G[..., 0, 1] = 1.0
        G[..., 1, 0] = 1.0
        G[..., 2, 2] = 1.0
        return G

    def to_fermi(self, p, **kw):
        p = np.asarray(p, dtype=float)
        t = p[..., 0]
        rel = p[..., 1:] - self._entry
        u = np.einsum("...i,i->...", rel, self._dir)
        z2 = np.einsum("...i,i->...", rel, self._nrm)
        y1 = u - (self._u_minus - self.ray.eps)
        s = (SQ2 * y1 + self.ray.a + SQ2 * t) / 2.0
        r = (SQ2 * y1 + self.ray.a - SQ2 * t) / 2.0
        return np.stack([s, r, z2], axis=-1)

    def maps_and_metric(self, z):
        return self.from_fermi(z), self.jacobian(z), self.metric(z)


class LineFermiChart:
    """1+1D chart along beta(t) = (time_offset + t, x0 + direction * t), flat line."""

    is_flat = True

    def __init__(self, x_start, direction, time_offset, tau_minus, tau_plus, eps=0.1):
        self.x_start = float(x_start)
        self.direction = float(np.sign(direction))
        self.time_offset = float(time_offset)
        self.tau_minus = float(tau_minus)
        self.tau_plus = float(tau_plus)
        self.eps = float(eps)
        self.spatial_dim = 1
        self.ray = self  # window constants live on self

    a = NullGeodesic.a
    b = NullGeodesic.b
    a0 = NullGeodesic.a0
    b0 = NullGeodesic.b0
    s_minus = NullGeodesic.s_minus
    s_plus = NullGeodesic.s_plus

    def _decompose(self, z):
        z = np.asarray(z, dtype=float)
        s, r = z[..., 0], z[..., 1]
        y1 = (s + r - self.a) / SQ2
        t = (s - r) / SQ2
        u = y1 + (self.tau_minus - self.time_offset) - self.eps
        return s, r, y1, t, u

    def from_fermi(self, z):
        s, r, y1, t, u = self._decompose(z)
        x = self.x_start + self.direction * u
        return np.stack([t, x], axis=-1)

    def to_fermi(self, p):
        p = np.asarray(p, dtype=float)
        t = p[..., 0]
        u = self.direction * (p[..., 1] - self.x_start)
        y1 = u - (self.tau_minus - self.time_offset) + self.eps
        s = (SQ2 * y1 + self.a + SQ2 * t) / 2.0
        r = (SQ2 * y1 + self.a - SQ2 * t) / 2.0
        return np.stack([s, r], axis=-1)

    def jacobian(self, z):
        z = np.asarray(z, dtype=float)
        J = np.zeros(z.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0 / SQ2
        J[..., 0, 1] = -1.0 / SQ2
        J[..., 1, 0] = self.direction / SQ2
        J[..., 1, 1] = self.direction / SQ2
        return J

    def metric(self, z):
        z = np.asarray(z, dtype=float)
        G = np.zeros(z.shape[:-1] + (2, 2))
        G[..., 0, 1] = 1.0
        G[..., 1, 0] = 1.0
        return G

    def metric_inv(self, z):
        return self.metric(z)

    def volume_density(self, z):
        z = np.asarray(z, dtype=float)
        return np.ones(z.shape[:-1])

    def maps_and_metric(self, z):
        return self.from_fermi(z), self.jacobian(z), self.metric(z)


def build_fermi_chart(chart, ray, delta_prime=None, condition_limit=10.0):
    """Fermi chart along a null geodesic; auto-selects the tube radius.

    With delta_prime=None the largest radius from FermiChart.DELTA_CANDIDATES
    whose Jacobian stays well conditioned is chosen; an explicit radius is
    honored after the same check.
    """
    if chart.is_euclidean:
        fc = FlatChordFermiChart(chart, ray, delta_prime or FermiChart.DELTA_CANDIDATES[0])
        return fc
    candidates = (delta_prime,) if delta_prime is not None else FermiChart.DELTA_CANDIDATES
    last_cond = None
    for dp in candidates:
        fc = FermiChart(chart, ray, dp)
        cond = _tube_condition(fc, dp)
        last_cond = cond
        if cond < condition_limit:
            return fc
    raise ChartError(
        f"Jacobian condition {last_cond:.2f} exceeds {condition_limit}; "
        "shrink the tube radius"
    )


def _tube_condition(fc, dp):
    ss = np.linspace(fc.ray.a, fc.ray.b, 17)
    zs = []
    for rr in (-dp / SQ2, 0.0, dp / SQ2):
        for z2 in (-dp, -0.5 * dp, 0.5 * dp, dp):
            zz = np.stack([ss, np.full_like(ss, rr), np.full_like(ss, z2)], axis=-1)
            zs.append(zz)
    z = np.concatenate(zs, axis=0)
    J = fc.jacobian(z)
    return float(np.max(np.linalg.cond(J)))


def curvature_D(fchart, s, h=1e-2, richardson=True):
    """Phase-Hessian curvature matrix D(s) = 1/4 d^2_{ij} gbar^{11} on the ray.

    Second derivatives with respect to the transverse coordinates (r, z2) by
    central differences, optionally Richardson-extrapolated (h and h/2).
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))

    def hess(hh):
        def g11(dr, dz):
            z = np.stack(
                [s, np.full_like(s, dr), np.full_like(s, dz)], axis=-1
            )
            return np.linalg.inv(fchart.metric(z))[..., 1, 1]

        c = g11(0.0, 0.0)
        out = np.empty(s.shape + (2, 2))
        out[..., 0, 0] = (g11(hh, 0) - 2 * c + g11(-hh, 0)) / hh**2
        out[..., 1, 1] = (g11(0, hh) - 2 * c + g11(0, -hh)) / hh**2
        cross = (g11(hh, hh) - g11(hh, -hh) - g11(-hh, hh) + g11(-hh, -hh)) / (4 * hh**2)
        out[..., 0, 1] = cross
        out[..., 1, 0] = cross
        return out

    if not richardson:
        return 0.25 * hess(h)
    h1 = hess(h)
    h2 = hess(0.5 * h)
    return 0.25 * (4.0 * h2 - h1) / 3.0


def jacobi_curvature_matrix(fchart, s):
    """Curvature term of the Jacobi equation in s-units: diag(0, K/2) on the ray.

    Independent of curvature_D: uses the Gauss curvature of the spatial
    metric at the footpoint of beta(s).
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    ray = fchart.ray
    t_time = s / SQ2
    u = t_time - ray.time_offset
    pos, _ = ray.spatial.at(u)
    K = gauss_curvature(fchart.chart, pos)
    out = np.zeros(s.shape + (2, 2))
    out[..., 1, 1] = 0.5 * K
    return out
