"""Monte Carlo cross-check of the solver pipeline.

Paths of the controlled wealth process are advanced by Euler-Maruyama
under the solver's strategy field and the barrier annuitization rule.
Because death is independent of the market, a path's ruin contribution
is the survival discount exp(-lambda_s (tau_0 - t0)); survival to the
deferral date contributes the discounted closed form, so nothing after T
is ever simulated.  Per-step Brownian-bridge tests catch barrier
crossings between grid times on both barriers; without them the
hitting-time bias at the mandated step size is several standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, uint64

from .model import ModelParams, check_annuity_rate, phi, safe_level
from .rng import normal_ppf, path_key, uniform01

# bridge tests are skipped when the crossing probability is below
# exp(-2 * BRIDGE_GATE) ~ 4e-18
BRIDGE_GATE = 20.0
# horizon cutoff: paths retire once their discounted worst-case ruin
# value drops below this bound
TAIL_TOL = 1e-6

CONTINUE, RUINED, ANNUITIZED, RETIRED = 0, 1, 2, 3


@dataclass(frozen=True)
class SimConfig:
    """Simulation controls; the seed is mandatory and all randomness
    flows from it."""

    n_paths: int
    dt: float
    seed: int
    w0: float
    a0: float = 0.0
    t0: float = 0.0
    strategy_source: str = "surface"     # or "terminal"
    antithetic: bool = False
    # without the bridge tests the hitting-time bias at dt = 1/500 is
    # several standard errors at a million paths; the switch exists to
    # measure exactly that
    use_bridge: bool = True

    def validate(self, p: ModelParams):
        errs = []
        if self.n_paths < 1:
            errs.append(f"n_paths must be >= 1 (got {self.n_paths})")
        if not 0.0 < self.dt <= p.big_t / 100.0:
            errs.append(f"dt must lie in (0, T/100]=(0, {p.big_t / 100.0}] (got {self.dt})")
        if self.w0 < 0.0:
            errs.append(f"w0 must be nonnegative (got {self.w0})")
        if not isinstance(self.seed, int):
            errs.append(f"seed must be an integer (got {self.seed!r})")
        if self.strategy_source not in ("surface", "terminal"):
            errs.append(f"unknown strategy_source {self.strategy_source!r}")
        if not 0.0 <= self.t0 < p.big_t:
            errs.append(f"t0 must lie in [0, T) (got {self.t0})")
        if errs:
            raise ValueError("; ".join(errs))
        check_annuity_rate(self.a0, p)


@dataclass(frozen=True)
class SimReport:
    ruin_estimate: float
    std_error: float
    n_paths: int
    n_ruined_before_t: int
    n_annuitized: int
    mean_annuitization_time: float

    def lines(self):
        out = [
            f"ruin_estimate = {self.ruin_estimate:.6f}",
            f"std_error = {self.std_error:.6f}",
            f"n_paths = {self.n_paths}",
            f"n_ruined_before_T = {self.n_ruined_before_t}",
            f"n_annuitized = {self.n_annuitized}",
        ]
        if not math.isnan(self.mean_annuitization_time):
            out.append(f"mean_annuitization_time = {self.mean_annuitization_time:.4f}")
        return out


@njit(cache=True)
def _advance(key, k, w, pi, wbar0, wbar1, dt, sqrt_dt, r, mu_r, sigma, c, sign,
             use_bridge):
    """One Euler step with bridge tests against both barriers.

    Returns (w_new, code): 0 continue, 1 ruined, 2 annuitized.  The
    counter budget is 4 per step: normal increment, ruin bridge,
    annuitization bridge, spare.
    """
    z = sign * normal_ppf(uniform01(key, uint64(4 * k)))
    vol = sigma * pi * sqrt_dt
    w_new = w + (r * w + mu_r * pi - c) * dt + vol * z
    if w_new <= 0.0:
        return w_new, RUINED
    v2 = vol * vol
    if use_bridge and v2 > 0.0 and w * w_new < BRIDGE_GATE * v2:
        if uniform01(key, uint64(4 * k + 1)) < np.exp(-2.0 * w * w_new / v2):
            return w_new, RUINED
    if w_new >= wbar1:
        return w_new, ANNUITIZED
    g0 = wbar0 - w
    g1 = wbar1 - w_new
    if use_bridge and v2 > 0.0 and g0 > 0.0 and g0 * g1 < BRIDGE_GATE * v2:
        if uniform01(key, uint64(4 * k + 2)) < np.exp(-2.0 * g0 * g1 / v2):
            return w_new, ANNUITIZED
    return w_new, CONTINUE


@njit(cache=True)
def _tab_pi(row, dw_inv, w):
    x = w * dw_inv
    if x <= 0.0:
        return row[0]
    i = int(x)
    if i >= row.size - 1:
        return row[row.size - 1]
    f = x - i
    return row[i] * (1.0 - f) + row[i + 1] * f


@njit(cache=True)
def _phi_pow(w, c_net, r, d):
    if c_net <= 0.0:
        return 0.0
    base = 1.0 - r * w / c_net
    if base <= 0.0:
        return 0.0
    return np.exp(d * np.log(base))


@njit(cache=True)
def _ruin_kernel(seed, n_paths, antithetic, use_bridge, w0, dt, n_steps,
                 r, mu_r, sigma, c, d_exp, gap,
                 pi_tab, dw_inv, wbar, disc,
                 contrib, event, ev_time):
    sqrt_dt = np.sqrt(dt)
    for pth in range(n_paths):
        if antithetic:
            key = path_key(uint64(seed), uint64(pth >> 1))
            sign = 1.0 - 2.0 * (pth & 1)
        else:
            key = path_key(uint64(seed), uint64(pth))
            sign = 1.0
        w = w0
        if w <= 0.0:
            contrib[pth] = 1.0
            event[pth] = RUINED
            ev_time[pth] = 0.0
            continue
        if w >= wbar[0]:
            contrib[pth] = 0.0
            event[pth] = ANNUITIZED
            ev_time[pth] = 0.0
            continue
        code = CONTINUE
        k = 0
        while k < n_steps:
            pi = _tab_pi(pi_tab[k], dw_inv, w)
            w, code = _advance(key, k, w, pi, wbar[k], wbar[k + 1],
                               dt, sqrt_dt, r, mu_r, sigma, c, sign, use_bridge)
            k += 1
            if code != CONTINUE:
                break
        if code == RUINED:
            contrib[pth] = disc[k]
            event[pth] = RUINED
            ev_time[pth] = k * dt
        elif code == ANNUITIZED:
            contrib[pth] = 0.0
            event[pth] = ANNUITIZED
            ev_time[pth] = k * dt
        else:
            contrib[pth] = disc[n_steps] * _phi_pow(w, gap, r, d_exp)
            event[pth] = RETIRED
            ev_time[pth] = n_steps * dt


@njit(cache=True)
def _no_annuity_kernel(seed, n_paths, antithetic, use_bridge, w0, dt, n_steps,
                       r, mu_r, sigma, c_net, d_exp, kappa,
                       w_retire, disc, contrib, event, ev_time):
    sqrt_dt = np.sqrt(dt)
    for pth in range(n_paths):
        if antithetic:
            key = path_key(uint64(seed), uint64(pth >> 1))
            sign = 1.0 - 2.0 * (pth & 1)
        else:
            key = path_key(uint64(seed), uint64(pth))
            sign = 1.0
        w = w0
        if w <= 0.0:
            contrib[pth] = 1.0
            event[pth] = RUINED
            ev_time[pth] = 0.0
            continue
        code = CONTINUE
        k = 0
        while True:
            if w >= w_retire[k]:
                code = RETIRED
                break
            if k >= n_steps:
                code = RETIRED
                break
            pi = kappa * (c_net - r * w)
            if pi < 0.0:
                pi = 0.0
            w, code = _advance(key, k, w, pi, np.inf, np.inf,
                               dt, sqrt_dt, r, mu_r, sigma, c_net, sign, use_bridge)
            k += 1
            if code != CONTINUE:
                break
        if code == RUINED:
            contrib[pth] = disc[k]
            event[pth] = RUINED
            ev_time[pth] = k * dt
        else:
            contrib[pth] = disc[k] * _phi_pow(w, c_net, r, d_exp)
            event[pth] = RETIRED
            ev_time[pth] = k * dt


def _report(contrib, event, ev_time, n_paths) -> SimReport:
    est = float(np.mean(contrib))
    se = float(np.std(contrib, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    ann = event == ANNUITIZED
    return SimReport(
        ruin_estimate=est,
        std_error=se,
        n_paths=n_paths,
        n_ruined_before_t=int(np.sum(event == RUINED)),
        n_annuitized=int(np.sum(ann)),
        mean_annuitization_time=float(np.mean(ev_time[ann])) if ann.any() else float("nan"),
    )


def _sim_steps(cfg: SimConfig, p: ModelParams) -> int:
    span = p.big_t - cfg.t0
    n = round(span / cfg.dt)
    if n < 1 or abs(n * cfg.dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(
            f"dt={cfg.dt} must divide the horizon T - t0 = {span} into whole steps")
    return int(n)


def strategy_table(surface, cfg: SimConfig, p: ModelParams,
                   n_w: int = 1025) -> tuple[np.ndarray, float]:
    """Strategy lookups for every simulation step on a uniform wealth
    grid [0, wbar(a0, t0)]; entries above the running safe level are 0
    and never used (those paths annuitize first)."""
    from .dual import _slice_strategy

    n_steps = _sim_steps(cfg, p)
    w_max = safe_level(cfg.a0, cfg.t0, p)
    w_tab = np.linspace(0.0, w_max, n_w)
    tab = np.empty((n_steps, n_w))
    if cfg.strategy_source == "terminal":
        gap = p.c - cfg.a0
        pi_cf = np.maximum((p.mu - p.r) / p.sigma**2 * (gap - p.r * w_tab), 0.0) \
            / ((p.d - 1.0) * p.r)
        tab[:] = pi_cf[None, :]
        return tab, w_max
    t_nodes = surface.t_nodes
    for k in range(n_steps):
        s = cfg.t0 + k * cfg.dt
        hi = int(np.clip(np.searchsorted(t_nodes, s), 1, t_nodes.size - 1))
        lo = hi - 1
        frac = (s - t_nodes[lo]) / (t_nodes[hi] - t_nodes[lo])
        frac = min(max(float(frac), 0.0), 1.0)
        pl = _slice_strategy(surface.slices[lo], w_tab, p)
        ph = _slice_strategy(surface.slices[hi], w_tab, p)
        tab[k] = (1.0 - frac) * pl + frac * ph
    return tab, w_max


def simulate_ruin(cfg: SimConfig, surface, p: ModelParams) -> SimReport:
    """Estimate the ruin probability under the barrier annuitization
    rule and the surface's strategy field.

    A path contributes exp(-lambda_s (tau_0 - t0)) if it ruins before T,
    zero once it annuitizes (it then glides risklessly to the deferral
    date), and exp(-lambda_s (T - t0)) phi(W_T; c - a0) if it reaches T.
    """
    cfg.validate(p)
    if surface is None and cfg.strategy_source == "surface":
        raise ValueError("surface strategy requested but no surface supplied")
    n_steps = _sim_steps(cfg, p)
    tab, w_max = strategy_table(surface, cfg, p)
    dw_inv = (tab.shape[1] - 1) / w_max
    ks = np.arange(n_steps + 1)
    wbar = np.array([safe_level(cfg.a0, min(cfg.t0 + float(k) * cfg.dt, p.big_t), p)
                     for k in ks])
    disc = np.exp(-p.lambda_s * ks * cfg.dt)
    contrib = np.empty(cfg.n_paths)
    event = np.empty(cfg.n_paths, dtype=np.int64)
    ev_time = np.empty(cfg.n_paths)
    _ruin_kernel(cfg.seed, cfg.n_paths, cfg.antithetic, cfg.use_bridge, cfg.w0, cfg.dt, n_steps,
                 p.r, p.mu - p.r, p.sigma, p.c, p.d, p.c - cfg.a0,
                 tab, dw_inv, wbar, disc, contrib, event, ev_time)
    return _report(contrib, event, ev_time, cfg.n_paths)


def no_annuity_horizon(cfg: SimConfig, p: ModelParams) -> int:
    """Number of steps until the discounted tail bound alone is below
    TAIL_TOL: exp(-lambda_s k dt) < TAIL_TOL."""
    return int(math.ceil(math.log(1.0 / TAIL_TOL) / (p.lambda_s * cfg.dt)))


def simulate_no_annuity(cfg: SimConfig, p: ModelParams, c_net: float) -> SimReport:
    """Estimate the infinite-horizon no-annuity ruin probability under
    the closed-form feedback strategy; the target is phi(w0, c_net).

    A path retires, contributing its discounted closed-form continuation
    value, as soon as that value falls below TAIL_TOL (the horizon
    cutoff exp(-lambda_s T_max) < TAIL_TOL is the special case phi = 1,
    so the closed form contaminates the estimate by less than TAIL_TOL).
    """
    cfg.validate(p)
    if c_net <= 0.0:
        raise ValueError(f"c_net must be positive (got {c_net!r})")
    n_steps = no_annuity_horizon(cfg, p)
    ks = np.arange(n_steps + 1)
    disc = np.exp(-p.lambda_s * ks * cfg.dt)
    # retire when disc * phi(w) < TAIL_TOL, i.e. w > w_retire(k)
    frac = np.minimum(TAIL_TOL / disc, 1.0) ** (1.0 / p.d)
    w_retire = c_net / p.r * (1.0 - frac)
    kappa = (p.mu - p.r) / p.sigma**2 / ((p.d - 1.0) * p.r)
    contrib = np.empty(cfg.n_paths)
    event = np.empty(cfg.n_paths, dtype=np.int64)
    ev_time = np.empty(cfg.n_paths)
    _no_annuity_kernel(cfg.seed, cfg.n_paths, cfg.antithetic, cfg.use_bridge, cfg.w0, cfg.dt, n_steps,
                       p.r, p.mu - p.r, p.sigma, c_net, p.d, kappa,
                       w_retire, disc, contrib, event, ev_time)
    return _report(contrib, event, ev_time, cfg.n_paths)


def path_diagnostics(cfg: SimConfig, surface, p: ModelParams,
                     n_record: int = 16) -> list:
    """Replay the first paths of the deferred-annuity simulation,
    recording (t, w, pi, a, event) per step.  Deterministic given the
    seed, and in exact agreement with simulate_ruin (the same compiled
    step function advances both)."""
    cfg.validate(p)
    n_steps = _sim_steps(cfg, p)
    tab, w_max = strategy_table(surface, cfg, p)
    dw_inv = (tab.shape[1] - 1) / w_max
    wbar = np.array([safe_level(cfg.a0, min(cfg.t0 + float(k) * cfg.dt, p.big_t), p)
                     for k in range(n_steps + 1)])
    sqrt_dt = math.sqrt(cfg.dt)
    names = {RUINED: "ruin", ANNUITIZED: "annuitize", RETIRED: "horizon"}
    logs = []
    for pth in range(min(n_record, cfg.n_paths)):
        if cfg.antithetic:
            key, sign = np.uint64(path_key(cfg.seed, pth >> 1)), 1.0 - 2.0 * (pth & 1)
        else:
            key, sign = np.uint64(path_key(cfg.seed, pth)), 1.0
        w = cfg.w0
        rows = []
        if w <= 0.0:
            rows.append((cfg.t0, w, 0.0, cfg.a0, "ruin"))
            logs.append(rows)
            continue
        if w >= wbar[0]:
            rows.append((cfg.t0, w, 0.0, cfg.a0,
                         f"annuitize wealth_after={w - (p.c - cfg.a0) * _alpha(cfg.t0, p):.12g}"))
            logs.append(rows)
            continue
        code = CONTINUE
        for k in range(n_steps):
            pi = float(_tab_pi(tab[k], dw_inv, w))
            rows.append((cfg.t0 + k * cfg.dt, w, pi, cfg.a0, ""))
            w, code = _advance(key, k, w, pi, wbar[k], wbar[k + 1],
                               cfg.dt, sqrt_dt, p.r, p.mu - p.r, p.sigma, p.c, sign,
                               cfg.use_bridge)
            if code != CONTINUE:
                s = cfg.t0 + (k + 1) * cfg.dt
                if code == RUINED:
                    rows.append((s, w, 0.0, cfg.a0, "ruin"))
                else:
                    w_after = max(w, wbar[k + 1]) - (p.c - cfg.a0) * _alpha(s, p)
                    rows.append((s, w, 0.0, p.c,
                                 f"annuitize wealth_after={w_after:.12g}"))
                break
        if code == CONTINUE:
            rows.append((p.big_t, w, 0.0, cfg.a0, "horizon"))
        logs.append(rows)
    return logs


def _alpha(t, p):
    from .model import deferred_price
    return deferred_price(min(t, p.big_t), p)


def diagnostics_csv(logs, path):
    import csv

    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "t", "w", "pi", "a", "event"])
        for i, rows in enumerate(logs):
            for (t, w, pi, a, ev) in rows:
                wr.writerow([i, f"{t:.17g}", f"{w:.17g}", f"{pi:.17g}", f"{a:.17g}", ev])
