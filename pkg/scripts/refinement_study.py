#!/usr/bin/env python3
"""Grid-convergence study for the obstacle solver and its transform.

Prints, per refinement level: probe values in the continuation region,
free-boundary slope estimates against their smooth-fit targets, and the
relative residual of the primal equation on the transformed surface.
"""

import argparse
import time

import numpy as np

from ruinfree.dual import build_ruin_surface, hjb_residuals
from ruinfree.fbp import boundary_slopes, build_grid, smooth_fit_slopes, solve_obstacle
from ruinfree.model import paper_example_params, safe_level


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--a", type=float, default=1.0, help="annuity income rate")
    ap.add_argument("--levels", type=int, default=3, help="number of refinement levels")
    ap.add_argument("--base-ny", type=int, default=500)
    ap.add_argument("--base-nt", type=int, default=125)
    args = ap.parse_args()

    p = paper_example_params()
    probes = None
    prev = {}
    print(f"{'n_y':>6} {'n_t':>6} {'value@probe':>12} {'raw dpsi low':>12} "
          f"{'fit dpsi low':>12} {'fit dpsi high':>13} {'hjb rel':>10} {'secs':>6}")
    for lvl in range(args.levels):
        n_y = args.base_ny * 2**lvl
        n_t = args.base_nt * 2**lvl
        t0 = time.time()
        grid = build_grid(p, args.a, n_y=n_y, n_t=n_t)
        sol = solve_obstacle(args.a, grid, p)
        surface = build_ruin_surface(sol, n_w=201)
        k = n_t // 2
        if probes is None:
            probes = 0.5 * (sol.lower_boundary[k] + sol.upper_boundary[k])
        val = float(np.interp(probes, grid.y_nodes, sol.values[k]))
        t = grid.t_nodes
        wbar = np.array([safe_level(args.a, float(tk), p) for tk in t[:-1]])
        rlo, _ = boundary_slopes(sol)
        flo, fhi = smooth_fit_slopes(sol)
        raw_lo = float(np.nanmean(np.abs(rlo[:-1] - wbar)))
        fit_lo = float(np.nanmean(np.abs(flo[:-1] - wbar)))
        fit_hi = float(np.nanmean(np.abs(fhi[:-1])))
        hjb = hjb_residuals(surface)
        secs = time.time() - t0
        print(f"{n_y:>6} {n_t:>6} {val:>12.8f} {raw_lo:>12.3e} {fit_lo:>12.3e} "
              f"{fit_hi:>13.3e} {hjb:>10.2e} {secs:>6.1f}")
        if prev:
            print(f"{'':>13} ratios:{'':>15} {prev['raw_lo']/raw_lo:>12.2f} "
                  f"{prev['fit_lo']/fit_lo:>12.2f} {prev['fit_hi']/fit_hi:>13.2f}")
        prev = dict(raw_lo=raw_lo, fit_lo=fit_lo, fit_hi=fit_hi)


if __name__ == "__main__":
    main()
