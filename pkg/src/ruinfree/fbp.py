"""Backward-in-time PSOR solver for the dual obstacle problem.

The dual value function solves, for each fixed annuity income a, a linear
variational inequality on (y, t): below the obstacle u(y, t) the backward
PDE holds, on the contact set the value equals the obstacle.  Discretised
in x = log y (constant-coefficient drift/diffusion) with central
differences and backward Euler, each time step is a tridiagonal linear
complementarity problem solved by projected SOR.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import ModelParams, check_annuity_rate, safe_level, terminal_dual_g


class GridError(ValueError):
    """Grid or operator construction violates a solvability condition."""


class ConvergenceError(RuntimeError):
    """PSOR failed to reach the requested complementarity residual."""


class BoundaryStructureError(RuntimeError):
    """Contact set is not lower-prefix/upper-suffix shaped."""


@dataclass(frozen=True)
class DualGrid:
    """Log-uniform y nodes times uniform t nodes on [0, T]."""

    y_nodes: np.ndarray
    t_nodes: np.ndarray
    y_min: float
    y_max: float

    @property
    def n_y(self) -> int:
        return self.y_nodes.size

    @property
    def n_t(self) -> int:
        return self.t_nodes.size

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def h(self) -> float:
        """Uniform spacing in x = log y."""
        x = np.log(self.y_nodes)
        return float(x[1] - x[0])


def build_grid(p: ModelParams, a: float, n_y: int = 2000, n_t: int = 500,
               span_low: float = 1e-3, span_high: float = 1e3,
               y_min: float | None = None, y_max: float | None = None) -> DualGrid:
    """Grid whose truncation boundaries sit deep inside the two contact
    regions: y_min a factor span_low below the obstacle kink at t=0,
    y_max a factor span_high above the largest free-boundary scale.
    """
    check_annuity_rate(a, p)
    if n_y < 8 or n_t < 3:
        raise GridError(f"grid too small (n_y={n_y}, n_t={n_t})")
    if y_min is None:
        if not 0.0 < span_low < 1.0:
            raise GridError(f"span_low must lie in (0, 1) (got {span_low!r})")
        y_min = span_low / safe_level(a, 0.0, p)
    if y_max is None:
        if span_high <= 1.0:
            raise GridError(f"span_high must exceed 1 (got {span_high!r})")
        gap = p.c - a
        if gap > 0.0:
            y_ref = max(p.r * p.d, p.rho) / gap
        else:
            # a = c: the obstacle kink blows up as t -> T; anchor on the
            # last pre-terminal step
            t_pre = p.big_t * (n_t - 2) / (n_t - 1)
            y_ref = 1.0 / safe_level(a, t_pre, p)
        y_max = span_high * y_ref
    if not 0.0 < y_min < y_max:
        raise GridError(f"need 0 < y_min < y_max (got {y_min!r}, {y_max!r})")
    if y_min >= 1.0 / safe_level(a, 0.0, p):
        raise GridError(f"y_min={y_min!r} is not below the obstacle kink 1/wbar(a,0)")
    x = np.linspace(math.log(y_min), math.log(y_max), n_y)
    t = np.linspace(0.0, p.big_t, n_t)
    t[0], t[-1] = 0.0, p.big_t
    grid = DualGrid(y_nodes=np.exp(x), t_nodes=t, y_min=y_min, y_max=y_max)
    # the flat obstacle branch must be present at every PSOR step so the
    # upper Dirichlet value 1 is exact
    if safe_level(a, float(t[-2]), p) * grid.y_max < 1.0:
        raise GridError("y_max too small: flat obstacle branch absent at the last pre-terminal step")
    return grid


@dataclass(frozen=True)
class TridiagonalOperator:
    """Backward-Euler operator A with A x <= q, x <= u complementarity.

    Row i of A reads lo[i] x[i-1] + dg[i] x[i] + up[i] x[i+1]; rows 0 and
    n-1 are identity (Dirichlet values live in the right-hand side).
    """

    lo: np.ndarray
    dg: np.ndarray
    up: np.ndarray
    dt: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        ax = self.dg * x
        ax[1:] += self.lo[1:] * x[:-1]
        ax[:-1] += self.up[:-1] * x[1:]
        return ax


def assemble_operator(grid: DualGrid, p: ModelParams) -> TridiagonalOperator:
    """Central differences in x = log y, backward Euler of step grid.dt.

    In log coordinates the PDE has diffusion m and drift lambda_s - r - m,
    so the stencil is node-independent.  Rows must be M-matrix rows
    (nonpositive off-diagonals) for PSOR; that is the Peclet condition
    h <= 2 m / |lambda_s - r - m|.
    """
    h = grid.h
    dt = grid.dt
    drift = p.lambda_s - p.r - p.m
    lo_c = drift / (2.0 * h) - p.m / h**2
    up_c = -drift / (2.0 * h) - p.m / h**2
    if lo_c > 0.0 or up_c > 0.0:
        raise GridError(
            f"off-diagonal sign violated at every interior row: h={h:.3e} exceeds the "
            f"Peclet bound 2m/|lambda_s-r-m|={2.0 * p.m / abs(drift):.3e}; refine n_y")
    n = grid.n_y
    lo = np.full(n, lo_c)
    dg = np.full(n, p.lambda_s + 1.0 / dt + 2.0 * p.m / h**2)
    up = np.full(n, up_c)
    lo[0] = up[0] = lo[-1] = up[-1] = 0.0
    dg[0] = dg[-1] = 1.0
    return TridiagonalOperator(lo=lo, dg=dg, up=up, dt=dt)


@njit(cache=True)
def _psor_kernel(lo, dg, up, q, u, x, omega, tol, max_iter):
    n = x.size
    res = np.inf
    for it in range(max_iter):
        for i in range(1, n - 1):
            gs = (q[i] - lo[i] * x[i - 1] - up[i] * x[i + 1]) / dg[i]
            xi = x[i] + omega * (gs - x[i])
            if xi > u[i]:
                xi = u[i]
            x[i] = xi
        res = 0.0
        for i in range(1, n - 1):
            ax = lo[i] * x[i - 1] + dg[i] * x[i] + up[i] * x[i + 1]
            r1 = q[i] - ax
            r2 = u[i] - x[i]
            ri = r1 if r1 < r2 else r2
            ri = abs(ri) / (1.0 + abs(q[i]))
            if ri > res:
                res = ri
        if res < tol:
            return it + 1, res
    return max_iter, res


@dataclass(frozen=True)
class PsorResult:
    values: np.ndarray
    iterations: int
    residual: float
    converged: bool


def psor_step(op: TridiagonalOperator, rhs: np.ndarray, obstacle: np.ndarray,
              warm_start: np.ndarray | None = None, omega: float = 1.5,
              tol: float = 1e-9, max_iter: int = 10000) -> PsorResult:
    """Solve one linear complementarity problem min(q - A x, u - x) = 0.

    A x = q holds where x < u, A x <= q where x = u.  The reported
    residual is the max over interior nodes of |min(q - A x, u - x)|
    normalised by 1 + |q|.  Non-convergence returns the best iterate
    with converged=False rather than raising.
    """
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega must lie in (0, 2) (got {omega!r})")
    if np.any(np.isnan(obstacle)):
        raise ValueError("obstacle must be finite or +inf")
    n = rhs.size
    x = np.empty(n)
    if warm_start is None:
        x[:] = np.minimum(rhs / op.dg, obstacle)
    else:
        x[:] = np.minimum(warm_start, obstacle)
    x[0] = min(rhs[0], obstacle[0])
    x[-1] = min(rhs[-1], obstacle[-1])
    iters, res = _psor_kernel(op.lo, op.dg, op.up, rhs, obstacle, x,
                              omega, tol, max_iter)
    return PsorResult(values=x, iterations=int(iters), residual=float(res),
                      converged=bool(res < tol))


@dataclass
class ObstacleSolution:
    """Dual value surface for one annuity level, with free boundaries.

    values[k] is the slice at t_nodes[k]; the terminal row equals the
    terminal penalty g exactly.  The obstacle constraint applies at all
    pre-terminal steps (the stopping payoff switches to g at t = T, and g
    may exceed u there).
    """

    values: np.ndarray
    obstacle: np.ndarray
    a: float
    grid: DualGrid
    params: ModelParams
    residuals: np.ndarray
    iterations: np.ndarray
    lower_boundary: np.ndarray = field(default=None)
    upper_boundary: np.ndarray = field(default=None)
    boundary_flags: list = field(default_factory=list)

    def contact_mask(self, k: int) -> np.ndarray:
        # projection writes obstacle values bitwise, so equality is exact
        return self.values[k] == self.obstacle[k]

    def to_csv(self, surface_path, boundary_path):
        with open(surface_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + [f"{y:.17g}" for y in self.grid.y_nodes])
            for k, t in enumerate(self.grid.t_nodes):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in self.values[k]])
        with open(boundary_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "y_lower", "y_upper", "residual"])
            for k, t in enumerate(self.grid.t_nodes):
                w.writerow([f"{t:.17g}", f"{self.lower_boundary[k]:.17g}",
                            f"{self.upper_boundary[k]:.17g}", f"{self.residuals[k]:.17g}"])


def solve_obstacle(a: float, grid: DualGrid, p: ModelParams, omega: float = 1.5,
                   tol: float = 1e-9, max_iter: int = 10000) -> ObstacleSolution:
    """Backward induction from the terminal penalty through every time
    step, solving the per-step LCP with PSOR warm-started from the
    previous step."""
    check_annuity_rate(a, p)
    op = assemble_operator(grid, p)
    y = grid.y_nodes
    t = grid.t_nodes
    n_t, n_y = t.size, y.size

    values = np.empty((n_t, n_y))
    obstacle = np.empty((n_t, n_y))
    for k in range(n_t):
        wbar = safe_level(a, float(t[k]), p)
        obstacle[k] = np.minimum(1.0, wbar * y)
    values[-1] = np.array([terminal_dual_g(yi, a, p) for yi in y])

    residuals = np.zeros(n_t)
    iterations = np.zeros(n_t, dtype=np.int64)
    residuals[-1] = np.nan
    iterations[-1] = 0

    # The terminal penalty decreases past its peak (toward -inf for large
    # y), but no stopping decision or transform value below the peak ever
    # sees that tail; marching from the running max instead keeps the
    # upper truncation inside the flat contact region, where the
    # Dirichlet value 1 is exact, and leaves the rest of the surface
    # unchanged.
    prev = np.maximum.accumulate(values[-1])
    for k in range(n_t - 2, -1, -1):
        rhs = prev / op.dt + p.c * y
        rhs[0] = obstacle[k, 0]
        rhs[-1] = obstacle[k, -1]
        step = psor_step(op, rhs, obstacle[k], warm_start=prev,
                         omega=omega, tol=tol, max_iter=max_iter)
        if not step.converged:
            raise ConvergenceError(
                f"PSOR stalled at time index {k} (t={t[k]:.6g}): residual "
                f"{step.residual:.3e} after {step.iterations} iterations (tol {tol:.1e})")
        values[k] = step.values
        residuals[k] = step.residual
        iterations[k] = step.iterations
        prev = step.values

    sol = ObstacleSolution(values=values, obstacle=obstacle, a=a, grid=grid,
                           params=p, residuals=residuals, iterations=iterations)
    # at a = c the linear obstacle branch solves the step equation
    # exactly, so the contact classification there is float noise and the
    # two-sided structure cannot be asserted
    lower, upper, flags = extract_boundaries(sol, strict=a < p.c)
    sol.lower_boundary = lower
    sol.upper_boundary = upper
    sol.boundary_flags = flags
    return sol


def extract_boundaries(sol: ObstacleSolution, strict: bool = True):
    """Free-boundary curves from the contact-set edges.

    For each pre-terminal step the continuation set must be a single
    interior interval whose complement touches both truncation edges with
    at least two nodes to spare; anything else means the grid is too
    coarse or genuinely mis-spans the boundaries (raised when strict,
    flagged otherwise).  Sub-grid positions are estimated by
    extrapolating psi - u from the two nearest continuation nodes; the
    refinement is reported, not guaranteed.
    """
    y = sol.grid.y_nodes
    t = sol.grid.t_nodes
    n_t, n_y = sol.values.shape
    lower = np.full(n_t, np.nan)
    upper = np.full(n_t, np.nan)
    flags = []

    def trouble(msg):
        if strict:
            raise BoundaryStructureError(msg)
        flags.append(msg)

    for k in range(n_t - 1):
        contact = sol.contact_mask(k)
        free = np.flatnonzero(~contact)
        if free.size == 0:
            # sub-cell continuation layer (annuity rate at or near c close
            # to the deferral date); not a structure violation
            flags.append(f"continuation region below grid resolution at time index {k}")
            continue
        i_first, i_last = int(free[0]), int(free[-1])
        if i_last - i_first + 1 != free.size:
            trouble(f"continuation region is not an interval at time index {k}")
            continue
        if i_first < 2 or i_last > n_y - 3:
            trouble(
                f"contact set touches a truncation neighbourhood at time index {k}: "
                f"continuation spans [{i_first}, {i_last}] of {n_y} nodes; widen the y span")
            continue
        kink = 1.0 / safe_level(sol.a, float(t[k]), sol.params)
        if not (y[i_first - 1] < kink * (1.0 + 1e-12) and y[i_last + 1] > kink * (1.0 - 1e-12)):
            trouble(f"contact edges do not bracket the obstacle kink at time index {k}")
            continue
        gap = sol.values[k] - sol.obstacle[k]
        lower[k] = _refine_root(y[i_first], gap[i_first], y[i_first + 1], gap[i_first + 1],
                                lo=y[i_first - 1], hi=y[i_first])
        upper[k] = _refine_root(y[i_last], gap[i_last], y[i_last - 1], gap[i_last - 1],
                                lo=y[i_last], hi=y[i_last + 1])
    return lower, upper, flags


def _refine_root(y1, f1, y2, f2, lo, hi):
    if f2 == f1:
        return lo if hi == y1 else hi
    root = y1 - f1 * (y2 - y1) / (f2 - f1)
    return float(min(max(root, lo), hi))


def boundary_slopes(sol: ObstacleSolution):
    """One-sided difference quotients of the solution across each contact
    edge; with smooth fit they approach wbar(a, t) at the lower boundary
    and 0 at the upper one as the grid refines."""
    y = sol.grid.y_nodes
    n_t = sol.grid.n_t
    lo_slopes = np.full(n_t, np.nan)
    hi_slopes = np.full(n_t, np.nan)
    for k in range(n_t - 1):
        contact = sol.contact_mask(k)
        free = np.flatnonzero(~contact)
        if free.size == 0:
            continue
        i_first, i_last = int(free[0]), int(free[-1])
        if i_first < 1 or i_last > sol.grid.n_y - 2:
            continue
        lo_slopes[k] = ((sol.values[k, i_first] - sol.values[k, i_first - 1])
                        / (y[i_first] - y[i_first - 1]))
        hi_slopes[k] = ((sol.values[k, i_last + 1] - sol.values[k, i_last])
                        / (y[i_last + 1] - y[i_last]))
    return lo_slopes, hi_slopes


def smooth_fit_slopes(sol: ObstacleSolution):
    """One-sided slope estimates evaluated at the extracted boundaries.

    The boundary position is refined through the square root of the
    obstacle gap (exact where the gap is quadratic, which is what smooth
    fit means) and the two nearest continuation-side difference
    quotients are extrapolated back to it.  Converges above first order,
    where the raw node quotients of boundary_slopes carry an O(h)
    offset error with a noisy constant.
    """
    y = sol.grid.y_nodes
    n_t = sol.grid.n_t
    lo = np.full(n_t, np.nan)
    hi = np.full(n_t, np.nan)
    for k in range(n_t - 1):
        contact = sol.contact_mask(k)
        free = np.flatnonzero(~contact)
        if free.size < 3:
            continue
        i0, i1 = int(free[0]), int(free[-1])
        gap = sol.obstacle[k] - sol.values[k]
        f1, f2 = gap[i0], gap[i0 + 1]
        if f1 > 0.0 and f2 > f1:
            yb = y[i0] - math.sqrt(f1) * (y[i0 + 1] - y[i0]) / (math.sqrt(f2) - math.sqrt(f1))
            s_a = (sol.values[k, i0 + 1] - sol.values[k, i0]) / (y[i0 + 1] - y[i0])
            s_b = (sol.values[k, i0 + 2] - sol.values[k, i0 + 1]) / (y[i0 + 2] - y[i0 + 1])
            m1 = 0.5 * (y[i0] + y[i0 + 1])
            m2 = 0.5 * (y[i0 + 1] + y[i0 + 2])
            lo[k] = s_a + (yb - m1) * (s_b - s_a) / (m2 - m1)
        g1, g2 = gap[i1], gap[i1 - 1]
        if g1 > 0.0 and g2 > g1:
            yb = y[i1] + math.sqrt(g1) * (y[i1] - y[i1 - 1]) / (math.sqrt(g2) - math.sqrt(g1))
            s_a = (sol.values[k, i1] - sol.values[k, i1 - 1]) / (y[i1] - y[i1 - 1])
            s_b = (sol.values[k, i1 - 1] - sol.values[k, i1 - 2]) / (y[i1 - 1] - y[i1 - 2])
            m1 = 0.5 * (y[i1 - 1] + y[i1])
            m2 = 0.5 * (y[i1 - 2] + y[i1 - 1])
            hi[k] = s_a + (yb - m1) * (s_a - s_b) / (m1 - m2)
    return lo, hi


def concavity_violation(sol: ObstacleSolution) -> float:
    """Worst positive second difference of the value in y.

    Adjacent divided differences must be non-increasing; the violation at
    an interior node is the positive part of their increment scaled by the
    mean local spacing (the uniform-grid second difference).
    """
    y = sol.grid.y_nodes
    dy = np.diff(y)
    worst = 0.0
    for k in range(sol.grid.n_t):
        slopes = np.diff(sol.values[k]) / dy
        incr = slopes[1:] - slopes[:-1]
        scaled = incr * 0.5 * (dy[1:] + dy[:-1])
        worst = max(worst, float(scaled.max(initial=0.0)))
    return worst


def march_source(sol: ObstacleSolution, k: int) -> np.ndarray:
    """Previous-step values feeding the step at time index k (the
    terminal slice enters through its running max, as in the solve)."""
    if k == sol.grid.n_t - 2:
        return np.maximum.accumulate(sol.values[-1])
    return sol.values[k + 1]


def complementarity_report(sol: ObstacleSolution):
    """Re-evaluate the per-step normalized complementarity residual from
    the stored surface (independent of the residuals PSOR reported)."""
    op = assemble_operator(sol.grid, sol.params)
    y = sol.grid.y_nodes
    out = np.zeros(sol.grid.n_t)
    out[-1] = np.nan
    for k in range(sol.grid.n_t - 2, -1, -1):
        rhs = march_source(sol, k) / op.dt + sol.params.c * y
        rhs[0] = sol.obstacle[k, 0]
        rhs[-1] = sol.obstacle[k, -1]
        ax = op.apply(sol.values[k])
        slack = np.minimum(rhs - ax, sol.obstacle[k] - sol.values[k])
        out[k] = float(np.max(np.abs(slack[1:-1]) / (1.0 + np.abs(rhs[1:-1]))))
    return out
