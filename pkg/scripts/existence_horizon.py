"""Probe how far the local-in-time construction can be pushed.

For a fixed initial perturbation size the horizon T is bisected between
a converging value and a failing one; each probe reports the iteration
status and the worst contraction ratio, giving an empirical view of the
horizon/data-size tradeoff that the small-data theory leaves open.
"""

import argparse

import numpy as np

from fsilab.core_grid import BeamField, FluidField, build_grid
from fsilab.fixed_point import IterationConfig, run_local
from fsilab.linear_subsystems import default_params
from fsilab.nonlinear_sources import FullState


def bump_state(grid, params, a):
    # shear + thermal + density data; every trace condition is exactly zero
    # so the amplitude can be pushed without tripping compatibility
    sx = grid.xx / grid.L
    sy = -grid.yy / grid.H
    pat = np.cos(np.pi * grid.xx / grid.L) * np.cos(np.pi * grid.yy / grid.H)
    v = np.zeros(grid.shape + (2,))
    v[..., 0] = a * 16.0 * sx * (1.0 - sx) * sy * (1.0 - sy)
    return FullState(
        FluidField(grid, params.rho_bar + a * pat),
        FluidField(grid, v, kind="vector"),
        FluidField(grid, params.theta_bar + a * pat),
        BeamField(grid, np.zeros(grid.nx + 1), clamped=True),
        BeamField(grid, np.zeros(grid.nx + 1), clamped=True),
    )


def probe(grid, params, a, T, steps, radius):
    cfg = IterationConfig(T=T, dt=T / steps, tol=1e-8, max_iters=30, R=radius)
    _, rep = run_local(bump_state(grid, params, a), cfg, params=params)
    worst = max(rep.ratios) if rep.ratios else float("nan")
    return rep.status, worst


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nx", type=int, default=8)
    ap.add_argument("--amplitude", type=float, default=0.6)
    ap.add_argument("--steps", type=int, default=8, help="time steps per probe")
    ap.add_argument("--t-lo", type=float, default=0.05)
    ap.add_argument("--radius", type=float, default=50.0,
                    help="iterate ball; generous so failures are genuine")
    ap.add_argument("--t-hi", type=float, default=2.0)
    ap.add_argument("--rounds", type=int, default=5)
    args = ap.parse_args()

    grid = build_grid(1.0, 1.0, args.nx, args.nx)
    params = default_params()

    lo, hi = args.t_lo, args.t_hi
    status, worst = probe(grid, params, args.amplitude, lo, args.steps, args.radius)
    print(f"T={lo:<8.4f} status={status:<14} worst ratio={worst:.4f}")
    if status != "converged":
        print("lower bracket already fails; shrink --t-lo")
        return
    status, worst = probe(grid, params, args.amplitude, hi, args.steps, args.radius)
    print(f"T={hi:<8.4f} status={status:<14} worst ratio={worst:.4f}")
    if status == "converged":
        print("upper bracket converges; grow --t-hi")
        return

    for _ in range(args.rounds):
        mid = 0.5 * (lo + hi)
        status, worst = probe(grid, params, args.amplitude, mid, args.steps, args.radius)
        print(f"T={mid:<8.4f} status={status:<14} worst ratio={worst:.4f}")
        if status == "converged":
            lo = mid
        else:
            hi = mid
    print(f"\nhorizon for amplitude {args.amplitude:g} at nx={args.nx}: "
          f"between {lo:.4f} and {hi:.4f}")


if __name__ == "__main__":
    main()
