"""Picard iterations that close the loop between marches and sources.

The local runner freezes the change of variables at its initial map,
marches plate -> velocity -> temperature -> density over one horizon,
rebuilds the map from the velocity history and re-evaluates the
nonlinear sources; the fixed point of that loop is the short-time
solution. The global runner plays the same game around the decaying
linearisation: the temperature is split into a shifted heat solve plus
tracked averages, the remaining mean-zero system and the spatially
constant plate forcing are marched with the assembled coupled
generator, and every norm carries the exponential weight e^(beta t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DiffeoFailure
from .core_grid import (
    BeamField,
    FluidField,
    Grid2D,
    NormSpec,
    discrete_norm,
    integrate_beam,
    integrate_fluid,
    weighted_time_norm,
)
from .chgvar import DiffeoMap, build_cutoff, build_diffeo, check_diffeo, initial_diffeo, suggested_floor
from .linear_subsystems import (
    PhysParams,
    SourceBundle,
    TemperatureStepper,
    VelocityStepper,
    _splu,
    default_params,
    plate_energy,
    step_density,
    step_plate,
)
from .nonlinear_sources import FullState, check_compatibility, eval_global_sources, eval_local_sources
from .fs_operator import _grid_operators, _identity_metric, _selection, assemble_coupled, pack_fields, unpack_fields

GAMMA1 = 1.0
_FLOOR = 1e-30


@dataclass(frozen=True)
class IterationConfig:
    """Horizon, step, ball and exponent choices for one Picard run.

    The horizon T must be an integer number of steps dt. R bounds the
    source-bundle norm; left unset it defaults to min(1, 10 x data
    norm) at run time. beta weights time norms in the global regime.
    p and q are the temporal and spatial exponents; they must sit in
    the open ranges (2, inf) and (3, inf) and avoid the resonant line
    1/p + 1/(2q) = 1/2.
    """

    T: float
    dt: float
    R: float | None = None
    max_iters: int = 25
    tol: float = 1e-9
    beta: float = 0.0
    p: float = 4.0
    q: float = 4.0

    def __post_init__(self):
        if not self.T > 0 or not self.dt > 0:
            raise ConfigError(f"horizon and step must be positive, got T={self.T} dt={self.dt}")
        n = round(self.T / self.dt)
        if n < 1 or abs(n * self.dt - self.T) > 1e-9 * max(self.T, 1.0):
            raise ConfigError(f"dt={self.dt} does not divide the horizon T={self.T}")
        if self.R is not None and not self.R > 0:
            raise ConfigError(f"ball radius must be positive, got R={self.R}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be at least 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ConfigError(f"tolerance must be positive, got tol={self.tol}")
        if self.beta < 0:
            raise ConfigError(f"decay weight must be nonnegative, got beta={self.beta}")
        if not self.p > 2 or not self.q > 3:
            raise ConfigError(f"exponents need p > 2 and q > 3, got p={self.p} q={self.q}")
        if abs(1.0 / self.p + 1.0 / (2.0 * self.q) - 0.5) < 1e-12:
            raise ConfigError(f"resonant exponent pair p={self.p} q={self.q}: 1/p + 1/(2q) = 1/2")

    @property
    def nt(self) -> int:
        """Number of time samples, endpoints included."""
        return round(self.T / self.dt) + 1


@dataclass(frozen=True)
class IterationReport:
    """Norm history of one Picard run.

    bundle_norms[k] is the weighted norm of the k-th evaluated source
    bundle, diff_norms[k] the norm of its difference to the previous
    bundle and ratios the successive quotients of those differences.
    """

    bundle_norms: tuple
    diff_norms: tuple
    ratios: tuple
    status: str
    message: str = ""
    decay_violation: bool = False

    @property
    def iterations(self) -> int:
        return len(self.bundle_norms)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(frozen=True)
class Trajectory:
    """Time-sampled states with the map that accompanied each sample."""

    states: tuple
    maps: tuple
    dt: float
    mode: str

    def __post_init__(self):
        if self.mode not in ("local", "global"):
            raise ConfigError(f"unknown trajectory mode {self.mode!r}")
        if len(self.states) == 0:
            raise ConfigError("a trajectory needs at least one state")
        if len(self.maps) != len(self.states):
            raise ConfigError(f"{len(self.maps)} maps for {len(self.states)} states")

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, n: int) -> FullState:
        return self.states[n]

    @property
    def grid(self) -> Grid2D:
        return self.states[0].grid

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


@dataclass(frozen=True)
class ConservedSeries:
    times: np.ndarray
    mass: np.ndarray
    energy: np.ndarray
    mass_drift: float
    energy_drift: float


def state_norm(state: FullState, q: float = 4.0) -> float:
    """Solution-space proxy norm: the largest component Sobolev norm.

    First differences on the fluid fields, second differences on the
    beam displacement. Used for ball checks and decay diagnostics.
    """
    s1 = NormSpec(1, q)
    return max(
        discrete_norm(state.rho, s1),
        discrete_norm(state.v, s1),
        discrete_norm(state.theta, s1),
        discrete_norm(state.eta1, NormSpec(2, q)),
        discrete_norm(state.eta2, s1),
    )


def _qnorm(w: np.ndarray, a: np.ndarray, q: float) -> float:
    if math.isinf(q):
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.sum(w * np.abs(a) ** q) ** (1.0 / q))


def _bundle_series(grid: Grid2D, q: float, f1, f2, f3, g, h, h_hat) -> np.ndarray:
    """Per-sample magnitude of a source bundle (or of a difference).

    Fluid components carry the trapezoid q-norm, the flux samples a
    boundary max, the beam forcing the beam q-norm; the spatially
    constant forcing enters by absolute value.
    """
    w = grid.weights
    wb = grid.beam_weights
    bnd = grid.mask_boundary
    nt = f1.shape[0]
    out = np.zeros(nt)
    for n in range(nt):
        mags = [
            _qnorm(w, f1[n], q),
            float(np.sum(w * (np.abs(f2[n, ..., 0]) ** q + np.abs(f2[n, ..., 1]) ** q)) ** (1.0 / q)),
            _qnorm(w, f3[n], q),
            float(np.max(np.abs(g[n][bnd]))),
            _qnorm(wb, h[n], q),
        ]
        if h_hat is not None:
            mags.append(abs(float(h_hat[n])))
        out[n] = max(mags)
    return out


def _bundle_norm(bundle: SourceBundle, cfg: IterationConfig, beta: float) -> float:
    s = _bundle_series(bundle.grid, cfg.q, bundle.f1, bundle.f2, bundle.f3, bundle.g, bundle.h, bundle.h_hat)
    return weighted_time_norm(s, bundle.dt, NormSpec(0, cfg.q, cfg.p, beta))


def _diff_norm(new: SourceBundle, old: SourceBundle, cfg: IterationConfig, beta: float) -> float:
    hh_new = new.h_hat if new.h_hat is not None else np.zeros(new.nt)
    hh_old = old.h_hat if old.h_hat is not None else np.zeros(old.nt)
    s = _bundle_series(
        new.grid,
        cfg.q,
        new.f1 - old.f1,
        new.f2 - old.f2,
        new.f3 - old.f3,
        new.g - old.g,
        new.h - old.h,
        hh_new - hh_old,
    )
    return weighted_time_norm(s, new.dt, NormSpec(0, cfg.q, cfg.p, beta))


def _cumtrapz(a: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(a)
    out[1:] = np.cumsum(0.5 * dt * (a[1:] + a[:-1]))
    return out


def _maps_from_history(X0: DiffeoMap, vhist: np.ndarray, dt: float, c0: float):
    """Rebuild the map at every sample from the velocity history.

    Running trapezoid displacement, so sample n agrees with handing the
    first n+1 velocity slices to the one-shot map update. Returns the
    maps built so far and the failure, if the determinant floor was hit.
    """
    grid = X0.grid
    maps = [X0]
    disp = np.zeros(grid.shape + (2,))
    for n in range(1, vhist.shape[0]):
        disp = disp + 0.5 * dt * (vhist[n - 1] + vhist[n])
        try:
            maps.append(build_diffeo(grid, X0.X + disp, c0))
        except DiffeoFailure as exc:
            return maps, exc
    return maps, None


def _difference_quotients(values: np.ndarray, dt: float) -> np.ndarray:
    """Backward quotients along axis 0; the first sample reuses the first step."""
    dq = np.empty_like(values)
    dq[1:] = (values[1:] - values[:-1]) / dt
    dq[0] = dq[1]
    return dq


def _grows_across(series: np.ndarray) -> bool:
    s = np.asarray(series, dtype=float)
    if s.size < 2:
        return False
    half = max(1, s.size // 2)
    return bool(np.max(s[half:]) > np.max(s[:half]) + _FLOOR)


def _preflight(initial: FullState, cfg: IterationConfig, params: PhysParams, mode: str):
    """Shared admission checks; returns the frozen map and its floor."""
    compat = check_compatibility(initial, params, mode=mode, p=cfg.p, q=cfg.q)
    if not compat.all_passed:
        raise ConfigError("initial state fails the compatibility conditions:\n" + "\n".join(compat.lines()))
    chi = build_cutoff(initial.grid)
    X0 = initial_diffeo(initial.eta1, chi)
    c0 = suggested_floor(X0)
    cert = check_diffeo(X0, c0)
    if not cert.passed:
        raise DiffeoFailure(
            f"initial map fails its own floor {c0:.3e} at node {cert.worst_node}",
            node=cert.worst_node,
            value=cert.min_delta,
        )
    data = state_norm(initial, cfg.q)
    # 10x the data norm capped at 1, but never below the data norm itself:
    # local states carry the order-one background density, which the cap
    # alone would reject. The ball constrains the source-bundle iterates,
    # not the data, so an explicit smaller R is allowed and simply exits.
    R = cfg.R if cfg.R is not None else max(min(1.0, 10.0 * data), data)
    return X0, c0, R


def _picard(march, evaluate, bundle0: SourceBundle, cfg: IterationConfig, R: float, beta: float, data_scale: float):
    """Drive bundle -> march -> sources -> bundle until the update stalls.

    march(bundle) -> (states, maps, err); map failures surface through
    the error slot instead of raising so a partial trajectory survives
    for the report. Convergence is a relative bundle-difference test,
    with an absolute escape for bundles that sit at round-off of the
    data scale (steady data never clears the relative bar because the
    signal itself is machine noise there).
    """
    zero_tol = 1e3 * np.finfo(float).eps * max(data_scale, _FLOOR)
    bundle = bundle0
    bundle_norms: list[float] = []
    diff_norms: list[float] = []
    ratios: list[float] = []
    status, message = "max-iters", ""
    states: list = []
    maps: list = []
    for _ in range(cfg.max_iters):
        states, maps, err = march(bundle)
        if err is not None:
            status, message = "diffeo-failure", str(err)
            break
        new_bundle = evaluate(states, maps)
        bn = _bundle_norm(new_bundle, cfg, beta)
        bundle_norms.append(bn)
        if bn > R:
            status = "ball-exit"
            message = f"source bundle norm {bn:.3e} left the ball of radius {R:.3e}; halve the horizon and retry"
            break
        dn = _diff_norm(new_bundle, bundle, cfg, beta)
        diff_norms.append(dn)
        if len(diff_norms) > 1 and diff_norms[-2] > 0:
            ratios.append(dn / diff_norms[-2])
        bundle = new_bundle
        if bn <= zero_tol:
            status = "converged"
            message = "source bundle at round-off of the data scale"
            break
        if dn < cfg.tol * max(bn, _FLOOR):
            status = "converged"
            break
    if status in ("converged", "max-iters"):
        # one more march so the returned trajectory matches the final bundle
        states, maps, err = march(bundle)
        if err is not None:
            status, message = "diffeo-failure", str(err)
    states = states[: len(maps)]
    report = IterationReport(tuple(bundle_norms), tuple(diff_norms), tuple(ratios), status, message)
    return states, maps, bundle, report


class _LocalEngine:
    """Frozen-map cascade plus source evaluation for one local run."""

    def __init__(self, initial: FullState, cfg: IterationConfig, params: PhysParams, shear_convention: str):
        self.initial = initial
        self.cfg = cfg
        self.params = params
        self.shear_convention = shear_convention
        self.grid = initial.grid
        self.X0, self.c0, self.R = _preflight(initial, cfg, params, "local")
        self.rho0 = initial.rho
        self.vstep = VelocityStepper(self.grid, self.X0, self.rho0, params, cfg.dt)
        self.tstep = TemperatureStepper(self.grid, self.X0, self.rho0, params, cfg.dt)

    def march(self, bundle: SourceBundle):
        grid, dt, nt = self.grid, self.cfg.dt, self.cfg.nt
        initial = self.initial
        states = [initial]
        vhist = np.empty((nt,) + grid.shape + (2,))
        vhist[0] = initial.v.values
        rho_f, v_vals, th_vals = initial.rho, initial.v.values, initial.theta.values
        e1, e2 = initial.eta1, initial.eta2
        for n in range(nt - 1):
            e1, e2 = step_plate(e1, e2, BeamField(grid, bundle.h_total(n + 1)), dt)
            v_new = self.vstep.step(v_vals, e2, bundle.f2[n + 1])
            th_new = self.tstep.step(th_vals, bundle.f3[n + 1], bundle.g[n + 1])
            rho_new = step_density(
                rho_f, v_new, bundle.f1[n + 1], self.X0, self.rho0, dt, v_prev=v_vals, f1_prev=bundle.f1[n]
            )
            rho_f = FluidField(grid, rho_new)
            v_vals, th_vals = v_new, th_new
            vhist[n + 1] = v_new
            states.append(
                FullState(
                    rho_f,
                    FluidField(grid, v_new, kind="vector"),
                    FluidField(grid, th_new),
                    e1,
                    e2,
                    t=(n + 1) * dt,
                )
            )
        maps, err = _maps_from_history(self.X0, vhist, dt, self.c0)
        return states, maps, err

    def evaluate(self, states, maps):
        grid, dt, nt = self.grid, self.cfg.dt, self.cfg.nt
        shp = grid.shape
        f1 = np.empty((nt,) + shp)
        f2 = np.empty((nt,) + shp + (2,))
        f3 = np.empty((nt,) + shp)
        g = np.empty((nt,) + shp)
        h = np.empty((nt, grid.nx + 1))
        dv = _difference_quotients(np.stack([s.v.values for s in states]), dt)
        dth = _difference_quotients(np.stack([s.theta.values for s in states]), dt)
        for n, (st, mp) in enumerate(zip(states, maps)):
            F1, F2, F3, G, H = eval_local_sources(
                st, mp, self.X0, self.rho0, self.params,
                dv_dt=dv[n], dtheta_dt=dth[n], shear_convention=self.shear_convention,
            )
            f1[n], f2[n], f3[n], g[n], h[n] = F1, F2, F3, G, H
        return SourceBundle(grid, dt, f1, f2, f3, g, h)


class _GlobalEngine:
    """Split linear march plus perturbation sources for one global run.

    The temperature is peeled into a shifted heat solve (carrying f3 and
    the flux data), its tracked spatial average, and a mean-zero
    remainder; the remainder joins density, velocity and plate in a
    backward Euler march with the assembled coupled generator, while the
    spatially constant plate forcing and the tracked averages drive a
    second homogeneous march. Both marches conserve the discrete mass
    and mean functionals exactly, step by step.
    """

    def __init__(self, initial: FullState, cfg: IterationConfig, params: PhysParams, shear_convention: str):
        self.initial = initial
        self.cfg = cfg
        self.params = params
        self.shear_convention = shear_convention
        self.grid = initial.grid
        self.X0, self.c0, self.R = _preflight(initial, cfg, params, "global")
        op = assemble_coupled(self.grid, params)
        self.layout = op.layout
        self.lu = _splu((sp.identity(self.layout.total, format="csc") / cfg.dt - op.matrix).tocsc(), "coupled march")
        self.dx_sbp, self.dy_sbp = _grid_operators(self.grid)[:2]
        self.sel = _selection(self.layout)[0]
        eye = _identity_metric(self.grid)
        rho_ref = FluidField(self.grid, np.full(self.grid.shape, params.rho_bar))
        self.sharp_step = TemperatureStepper(
            self.grid, (eye, np.ones(self.grid.shape), eye), rho_ref, params, cfg.dt, gamma1=GAMMA1
        )

    def march(self, bundle: SourceBundle):
        grid, dt, nt = self.grid, self.cfg.dt, self.cfg.nt
        initial = self.initial
        layout, lu = self.layout, self.lu
        R0, rho_bar, theta_bar = self.params.R0, self.params.rho_bar, self.params.theta_bar
        area, w = grid.area, grid.weights

        th_sharp = np.empty((nt,) + grid.shape)
        th_sharp[0] = initial.theta.values
        for n in range(nt - 1):
            th_sharp[n + 1] = self.sharp_step.step(th_sharp[n], bundle.f3[n + 1], bundle.g[n + 1])
        th_avg = np.tensordot(th_sharp, w, axes=([1, 2], [0, 1])) / area
        th_flat = GAMMA1 * _cumtrapz(th_avg, dt)
        f1_avg = np.tensordot(bundle.f1, w, axes=([1, 2], [0, 1])) / area
        rho_flat0 = (integrate_fluid(grid, initial.rho.values) + rho_bar * integrate_beam(grid, initial.eta1.values)) / area
        rho_flat = rho_flat0 + _cumtrapz(f1_avg, dt)
        h_hat = bundle.h_hat if bundle.h_hat is not None else np.zeros(nt)

        diamond = np.empty((nt, layout.total))
        diamond[0] = pack_fields(
            layout,
            initial.rho.values - rho_flat[0],
            initial.v.values,
            np.zeros(grid.shape),
            initial.eta1.values,
            initial.eta2.values,
        )
        dagger = np.zeros((nt, layout.total))
        for n in range(nt - 1):
            F = np.zeros(layout.total)
            F[layout.sl_rho] = (bundle.f1[n + 1] - f1_avg[n + 1]).ravel()
            ts = th_sharp[n + 1].ravel()
            F[layout.sl_vx] = self.sel @ (bundle.f2[n + 1, ..., 0].ravel() - R0 * (self.dx_sbp @ ts))
            F[layout.sl_vy] = self.sel @ (bundle.f2[n + 1, ..., 1].ravel() - R0 * (self.dy_sbp @ ts))
            F[layout.sl_theta] = GAMMA1 * (th_sharp[n + 1] - th_avg[n + 1]).ravel()
            F[layout.sl_eta2] = bundle.h[n + 1, 1:-1] + R0 * rho_bar * th_sharp[n + 1, 1:-1, -1]
            diamond[n + 1] = lu.solve(diamond[n] / dt + F)
            Fd = np.zeros(layout.total)
            Fd[layout.sl_eta2] = h_hat[n + 1] + R0 * theta_bar * rho_flat[n + 1] + R0 * rho_bar * th_flat[n + 1]
            dagger[n + 1] = lu.solve(dagger[n] / dt + Fd)

        states = []
        vhist = np.empty((nt,) + grid.shape + (2,))
        for n in range(nt):
            rho_c, v_c, th_c, e1, e2 = unpack_fields(layout, diamond[n] + dagger[n])
            vhist[n] = v_c
            states.append(
                FullState(
                    FluidField(grid, rho_c + rho_flat[n]),
                    FluidField(grid, v_c, kind="vector"),
                    FluidField(grid, th_c + th_sharp[n] + th_flat[n]),
                    BeamField(grid, e1, clamped=True),
                    BeamField(grid, e2, clamped=True),
                    t=n * dt,
                )
            )
        maps, err = _maps_from_history(self.X0, vhist, dt, self.c0)
        return states, maps, err

    def evaluate(self, states, maps):
        grid, dt, nt = self.grid, self.cfg.dt, self.cfg.nt
        shp = grid.shape
        f1 = np.empty((nt,) + shp)
        f2 = np.empty((nt,) + shp + (2,))
        f3 = np.empty((nt,) + shp)
        g = np.empty((nt,) + shp)
        h = np.empty((nt, grid.nx + 1))
        h_hat = np.empty(nt)
        dv = _difference_quotients(np.stack([s.v.values for s in states]), dt)
        dth = _difference_quotients(np.stack([s.theta.values for s in states]), dt)
        for n, (st, mp) in enumerate(zip(states, maps)):
            F1, F2, F3, G, Ht, Hh = eval_global_sources(
                st, mp, self.params, dv_dt=dv[n], dtheta_dt=dth[n], shear_convention=self.shear_convention
            )
            f1[n], f2[n], f3[n], g[n], h[n], h_hat[n] = F1, F2, F3, G, Ht, Hh
        return SourceBundle(grid, dt, f1, f2, f3, g, h, h_hat)


def _check_bundle(bundle, nt: int, want_hat: bool):
    if bundle.nt != nt:
        raise ConfigError(f"bundle has {bundle.nt} samples, horizon needs {nt}")
    if want_hat and bundle.h_hat is None:
        raise ConfigError("the global iteration needs a bundle with the split plate forcing (h_hat)")


def run_local(
    initial: FullState,
    cfg: IterationConfig,
    params: PhysParams | None = None,
    shear_convention: str = "printed",
    first_bundle: SourceBundle | None = None,
):
    """Short-horizon Picard construction around the frozen-map cascade.

    Marches the plate, then velocity, temperature and density with all
    coefficients frozen at the initial map, rebuilds the moving map from
    the velocity history and re-evaluates the sources. Stops when the
    relative bundle update falls under cfg.tol. Returns the trajectory
    of the last march and the norm history; a ball exit or a Jacobian
    floor hit ends the loop with the matching status instead of raising.
    """
    params = params if params is not None else default_params()
    eng = _LocalEngine(initial, cfg, params, shear_convention)
    bundle0 = first_bundle if first_bundle is not None else SourceBundle.zeros(initial.grid, cfg.nt, cfg.dt)
    _check_bundle(bundle0, cfg.nt, want_hat=False)
    states, maps, _, report = _picard(
        eng.march, eng.evaluate, bundle0, cfg, eng.R, beta=0.0, data_scale=state_norm(initial, cfg.q)
    )
    return Trajectory(tuple(states), tuple(maps), cfg.dt, "local"), report


def run_global(
    initial: FullState,
    cfg: IterationConfig,
    params: PhysParams | None = None,
    t_max: float | None = None,
    shear_convention: str = "printed",
    first_bundle: SourceBundle | None = None,
):
    """Picard construction around the decaying linearisation.

    Norms carry the weight e^(beta t) with beta = cfg.beta > 0, so a
    converged run certifies decay at that rate in the weighted sense.
    The report flags a decay violation when the weighted solution norm
    grows across the horizon. t_max, when given, replaces cfg.T.
    """
    params = params if params is not None else default_params()
    params.require_global()
    if not cfg.beta > 0:
        raise ConfigError(f"the global iteration needs a positive decay weight, got beta={cfg.beta}")
    if t_max is not None:
        cfg = replace(cfg, T=float(t_max))
    eng = _GlobalEngine(initial, cfg, params, shear_convention)
    bundle0 = first_bundle if first_bundle is not None else SourceBundle.zeros(initial.grid, cfg.nt, cfg.dt, with_hat=True)
    _check_bundle(bundle0, cfg.nt, want_hat=True)
    states, maps, _, report = _picard(
        eng.march, eng.evaluate, bundle0, cfg, eng.R, beta=cfg.beta, data_scale=state_norm(initial, cfg.q)
    )
    traj = Trajectory(tuple(states), tuple(maps), cfg.dt, "global")
    weighted = np.exp(cfg.beta * traj.times) * np.array([state_norm(s, cfg.q) for s in traj.states])
    report = replace(report, decay_violation=_grows_across(weighted))
    return traj, report


def march_local(
    initial: FullState,
    cfg: IterationConfig,
    params: PhysParams | None = None,
    bundle: SourceBundle | None = None,
    shear_convention: str = "printed",
) -> Trajectory:
    """One pass of the frozen-map cascade with fixed sources (zeros if omitted).

    No outer iteration: this is the linear march the Picard loop calls,
    exposed for consistency and conservation studies. Map failures raise.
    """
    params = params if params is not None else default_params()
    eng = _LocalEngine(initial, cfg, params, shear_convention)
    bundle = bundle if bundle is not None else SourceBundle.zeros(initial.grid, cfg.nt, cfg.dt)
    _check_bundle(bundle, cfg.nt, want_hat=False)
    states, maps, err = eng.march(bundle)
    if err is not None:
        raise err
    return Trajectory(tuple(states), tuple(maps), cfg.dt, "local")


def march_global(
    initial: FullState,
    cfg: IterationConfig,
    params: PhysParams | None = None,
    bundle: SourceBundle | None = None,
    shear_convention: str = "printed",
) -> Trajectory:
    """One pass of the split linear march with fixed sources (zeros if omitted)."""
    params = params if params is not None else default_params()
    params.require_global()
    eng = _GlobalEngine(initial, cfg, params, shear_convention)
    bundle = bundle if bundle is not None else SourceBundle.zeros(initial.grid, cfg.nt, cfg.dt, with_hat=True)
    _check_bundle(bundle, cfg.nt, want_hat=True)
    states, maps, err = eng.march(bundle)
    if err is not None:
        raise err
    return Trajectory(tuple(states), tuple(maps), cfg.dt, "global")


def conserved_quantities(traj: Trajectory, params: PhysParams | None = None) -> ConservedSeries:
    """Mass functional and an energy proxy along a trajectory.

    Local trajectories weigh the density by the map Jacobian, so the
    series is the mass of the moving domain; global trajectories track
    the linear combination of fluid mass and beam displacement that the
    perturbation system conserves, which needs the reference density.
    The energy proxy sums kinetic, plate and quadratic temperature
    terms; it is a monitoring quantity, not an exact invariant.
    """
    grid = traj.grid
    n = len(traj)
    mass = np.empty(n)
    energy = np.empty(n)
    if traj.mode == "local":
        for k, (st, mp) in enumerate(zip(traj.states, traj.maps)):
            delta = mp.delta
            mass[k] = integrate_fluid(grid, st.rho.values * delta)
            kin = 0.5 * integrate_fluid(grid, st.rho.values * np.sum(st.v.values**2, axis=-1) * delta)
            th = 0.5 * integrate_fluid(grid, st.theta.values**2 * delta)
            energy[k] = kin + th + plate_energy(st.eta1, st.eta2)
    else:
        if params is None:
            raise ConfigError("global conserved quantities need the physical parameters")
        rb = params.rho_bar
        for k, st in enumerate(traj.states):
            mass[k] = integrate_fluid(grid, st.rho.values) + rb * integrate_beam(grid, st.eta1.values)
            kin = 0.5 * rb * integrate_fluid(grid, np.sum(st.v.values**2, axis=-1))
            th = 0.5 * integrate_fluid(grid, st.theta.values**2)
            energy[k] = kin + th + plate_energy(st.eta1, st.eta2)
    return ConservedSeries(
        times=traj.times,
        mass=mass,
        energy=energy,
        mass_drift=float(np.max(np.abs(mass - mass[0]))),
        energy_drift=float(np.max(energy) - energy[0]),
    )
