"""Assembled generator of the coupled linearized flow-beam dynamics.

This module turns the linearized field equations around the rest state
(uniform density, zero velocity, uniform temperature, flat beam) into one
sparse matrix acting on a stacked state vector

    x = [density | velocity (interior) | temperature | deflection | beam velocity]

so that the evolution reads dx/dt = A x.  Boundary velocity unknowns are
eliminated: the no-slip wall value is zero and the top-edge vertical trace
equals the beam velocity, so their columns fold into the beam-velocity
block.  That makes the kinematic coupling exact at the algebraic level
instead of being enforced by penalty or constraint rows.

Discretization choices that matter for the spectral checks:

* the density row uses first-derivative matrices whose one-sided end rows
  are first order; together with trapezoid weights they satisfy a
  summation-by-parts identity, so total mass (fluid mass plus the beam
  deflection contribution) is conserved to round-off,
* the temperature row reuses the vertex-centered flux balance of the heat
  stepper, so the discrete temperature mean is conserved to round-off,
* a weak density smoothing of strength hx*hy damps mesh-frequency
  density modes (invisible to centered differences) at an O(1) rate while
  perturbing smooth fields only at the scheme's own O(h^2) level.

The conserved quantities give the matrix an exact two-dimensional kernel;
`kernel_vectors` returns it in closed form and `restrict_Xm` deflates it so
spectra and sector scans can be read on the mean-zero subspace where the
dynamics is exponentially stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_grid import BeamField, FluidField, Grid2D, diff_ops
from .errors import ConfigError, NumericsError
from .linear_subsystems import (
    PhysParams,
    _fv_diffusion,
    _splu,
    plate_operator,
)
from .nonlinear_sources import FullState

__all__ = [
    "BlockLayout",
    "OperatorMatrix",
    "SectorScanResult",
    "PerturbationReport",
    "DEFLATION_SHIFT",
    "block_layout",
    "assemble_coupled",
    "assemble_block",
    "pack_fields",
    "unpack_fields",
    "state_to_vector",
    "vector_to_state",
    "constraint_functionals",
    "kernel_vectors",
    "project_mean_zero",
    "restrict_Xm",
    "spectrum",
    "resolvent_solve",
    "energy_rate",
    "sector_scan",
    "gamma_search",
    "perturbation_check",
]

# Shift used to move the two conserved-quantity kernel directions far into
# the left half plane when restricting to the mean-zero subspace.
DEFLATION_SHIFT = -1.0e6

# Dense eigensolves beyond this stacked dimension are not worth the wait.
MAX_DENSE_DIM = 8200


# ---------------------------------------------------------------- layout


@dataclass(frozen=True, eq=False)
class BlockLayout:
    """Index bookkeeping for the stacked state vector."""

    grid: Grid2D
    sl_rho: slice
    sl_vx: slice
    sl_vy: slice
    sl_theta: slice
    sl_eta1: slice
    sl_eta2: slice
    total: int
    interior_flat: np.ndarray
    top_flat: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    @property
    def n_interior(self) -> int:
        return self.interior_flat.size

    @property
    def n_beam(self) -> int:
        return self.top_flat.size

    @property
    def sl_v(self) -> slice:
        return slice(self.sl_vx.start, self.sl_vy.stop)


def block_layout(grid: Grid2D) -> BlockLayout:
    """Block offsets for [rho, vx, vy, theta, eta1, eta2] stacking."""
    n = grid.n_nodes
    interior = np.flatnonzero(grid.mask_interior.ravel())
    top = np.flatnonzero(grid.mask_top.ravel())
    ni = interior.size
    m = top.size
    ofs = np.cumsum([0, n, ni, ni, n, m, m])
    return BlockLayout(
        grid=grid,
        sl_rho=slice(ofs[0], ofs[1]),
        sl_vx=slice(ofs[1], ofs[2]),
        sl_vy=slice(ofs[2], ofs[3]),
        sl_theta=slice(ofs[3], ofs[4]),
        sl_eta1=slice(ofs[4], ofs[5]),
        sl_eta2=slice(ofs[5], ofs[6]),
        total=int(ofs[6]),
        interior_flat=interior,
        top_flat=top,
    )


def pack_fields(layout: BlockLayout, rho, v, theta, eta1, eta2) -> np.ndarray:
    """Stack full-grid arrays into a state vector (boundary velocity dropped)."""
    grid = layout.grid
    rho = np.asarray(rho, dtype=float).reshape(grid.shape)
    v = np.asarray(v, dtype=float).reshape(grid.shape + (2,))
    theta = np.asarray(theta, dtype=float).reshape(grid.shape)
    eta1 = np.asarray(eta1, dtype=float).reshape(grid.nx + 1)
    eta2 = np.asarray(eta2, dtype=float).reshape(grid.nx + 1)
    idx = layout.interior_flat
    out = np.empty(layout.total)
    out[layout.sl_rho] = rho.ravel()
    out[layout.sl_vx] = v[..., 0].ravel()[idx]
    out[layout.sl_vy] = v[..., 1].ravel()[idx]
    out[layout.sl_theta] = theta.ravel()
    out[layout.sl_eta1] = eta1[1:-1]
    out[layout.sl_eta2] = eta2[1:-1]
    return out


def unpack_fields(layout: BlockLayout, vec: np.ndarray):
    """Inverse of `pack_fields`; the top-edge vertical velocity is rebuilt
    from the beam-velocity block, walls are set to zero."""
    grid = layout.grid
    vec = np.asarray(vec)
    rho = vec[layout.sl_rho].reshape(grid.shape)
    theta = vec[layout.sl_theta].reshape(grid.shape)
    v = np.zeros(grid.shape + (2,), dtype=vec.dtype)
    vx = np.zeros(grid.n_nodes, dtype=vec.dtype)
    vy = np.zeros(grid.n_nodes, dtype=vec.dtype)
    vx[layout.interior_flat] = vec[layout.sl_vx]
    vy[layout.interior_flat] = vec[layout.sl_vy]
    vy[layout.top_flat] = vec[layout.sl_eta2]
    v[..., 0] = vx.reshape(grid.shape)
    v[..., 1] = vy.reshape(grid.shape)
    eta1 = np.zeros(grid.nx + 1, dtype=vec.dtype)
    eta2 = np.zeros(grid.nx + 1, dtype=vec.dtype)
    eta1[1:-1] = vec[layout.sl_eta1]
    eta2[1:-1] = vec[layout.sl_eta2]
    return rho, v, theta, eta1, eta2


def state_to_vector(state: FullState, layout: BlockLayout) -> np.ndarray:
    return pack_fields(
        layout,
        state.rho.values,
        state.v.values,
        state.theta.values,
        state.eta1.values,
        state.eta2.values,
    )


def vector_to_state(layout: BlockLayout, vec: np.ndarray, t: float = 0.0) -> FullState:
    grid = layout.grid
    rho, v, theta, eta1, eta2 = unpack_fields(layout, np.real(vec))
    return FullState(
        rho=FluidField(grid, rho),
        v=FluidField(grid, v, kind="vector"),
        theta=FluidField(grid, theta),
        eta1=BeamField(grid, eta1, clamped=True),
        eta2=BeamField(grid, eta2, clamped=True),
        t=t,
    )


# ---------------------------------------------------------------- matrices


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Sparse operator plus the metadata the solvers and scans need.

    `weights` is the diagonal of the quadrature inner product used for all
    reported norms (a trapezoid L2 proxy for the function-space norms; the
    limitation is deliberate and shared by every consumer in this module).
    """

    matrix: sp.csr_matrix
    domain: str
    weights: np.ndarray
    label: str
    layout: Optional[BlockLayout] = None
    grid: Optional[Grid2D] = None
    params: Optional[PhysParams] = None

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m:
            raise ConfigError(f"operator matrix must be square, got {n}x{m}")
        if self.weights.shape != (n,):
            raise ConfigError("weight vector length does not match operator size")
        if not np.all(self.weights > 0):
            raise ConfigError("quadrature weights must be positive")
        if self.domain not in ("full", "mean_zero"):
            raise ConfigError(f"unknown operator domain {self.domain!r}")
        if self.layout is not None and self.layout.total != n:
            raise ConfigError("layout size does not match operator size")

    @property
    def shape(self):
        return self.matrix.shape


def _sbp_first_diff(n: int, h: float) -> sp.csr_matrix:
    """1-D first derivative: centered inside, one-sided first order at the
    ends.  With trapezoid weights W this satisfies W D + D^T W = boundary
    terms only, which is what makes the stacked mass functional exact."""
    rows, cols, vals = [], [], []
    inv = 1.0 / (2.0 * h)
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-inv, inv]
    rows += [0, 0, n - 1, n - 1]
    cols += [0, 1, n - 2, n - 1]
    vals += [-1.0 / h, 1.0 / h, -1.0 / h, 1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _second_diff_interior(n: int, h: float) -> sp.csr_matrix:
    """1-D second derivative with zero end rows (only interior rows are
    ever selected into the assembled operator)."""
    rows, cols, vals = [], [], []
    inv = 1.0 / (h * h)
    for i in range(1, n - 1):
        rows += [i, i, i]
        cols += [i - 1, i, i + 1]
        vals += [inv, -2.0 * inv, inv]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _one_sided_first(n: int, h: float) -> sp.csr_matrix:
    """1-D first derivative, centered inside and second-order one-sided at
    the ends; used where derivative rows at boundary nodes are needed."""
    rows, cols, vals = [], [], []
    inv = 1.0 / (2.0 * h)
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-inv, inv]
    rows += [0, 0, 0]
    cols += [0, 1, 2]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h]
    rows += [n - 1, n - 1, n - 1]
    cols += [n - 1, n - 2, n - 3]
    vals += [1.5 / h, -2.0 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _grid_operators(grid: Grid2D):
    """Full-grid derivative matrices on raveled scalar fields."""
    nx1, ny1 = grid.shape
    ix = sp.identity(nx1, format="csr")
    iy = sp.identity(ny1, format="csr")
    dx_sbp = sp.kron(_sbp_first_diff(nx1, grid.hx), iy, format="csr")
    dy_sbp = sp.kron(ix, _sbp_first_diff(ny1, grid.hy), format="csr")
    dxx = sp.kron(_second_diff_interior(nx1, grid.hx), iy, format="csr")
    dyy = sp.kron(ix, _second_diff_interior(ny1, grid.hy), format="csr")
    dx_os = sp.kron(_one_sided_first(nx1, grid.hx), iy, format="csr")
    dy_os = sp.kron(ix, _one_sided_first(ny1, grid.hy), format="csr")
    dxy = (dx_os @ dy_os).tocsr()
    return dx_sbp, dy_sbp, dxx, dyy, dxy


def _identity_metric(grid: Grid2D) -> np.ndarray:
    k = np.zeros(grid.shape + (2, 2))
    k[..., 0, 0] = 1.0
    k[..., 1, 1] = 1.0
    return k


def _selection(layout: BlockLayout):
    grid = layout.grid
    n = grid.n_nodes
    ni = layout.n_interior
    m = layout.n_beam
    sel = sp.csr_matrix(
        (np.ones(ni), (np.arange(ni), layout.interior_flat)), shape=(ni, n)
    )
    top = sp.csr_matrix(
        (np.ones(m), (layout.top_flat, np.arange(m))), shape=(n, m)
    )
    trace = sp.csr_matrix(
        (np.ones(m), (np.arange(m), layout.top_flat)), shape=(m, n)
    )
    return sel, top, trace


def _coupled_weights(layout: BlockLayout) -> np.ndarray:
    grid = layout.grid
    w_nodes = grid.weights.ravel()
    w_int = w_nodes[layout.interior_flat]
    w_beam = grid.beam_weights[1:-1]
    return np.concatenate([w_nodes, w_int, w_int, w_nodes, w_beam, w_beam])


def assemble_coupled(
    grid: Grid2D, params: PhysParams, part: str = "full"
) -> OperatorMatrix:
    """Assemble the generator of the coupled linear dynamics.

    `part` selects "full", the "principal" part (transport, viscosity, heat
    flow, beam stiffness and damping), or the "bounded" remainder (pressure
    gradients and the surface stress sampled onto the beam).  The two parts
    sum to the full matrix entry by entry.
    """
    if part not in ("full", "principal", "bounded"):
        raise ConfigError(f"unknown operator part {part!r}")
    params.require_global()
    layout = block_layout(grid)
    sel, top, trace = _selection(layout)
    dx_sbp, dy_sbp, dxx, dyy, dxy = _grid_operators(grid)
    fv, _ = _fv_diffusion(grid, _identity_metric(grid))
    ops = diff_ops(grid)

    rho_bar = params.rho_bar
    mu = params.mu
    coef_lap = mu / rho_bar
    coef_div = (params.alpha + mu) / rho_bar
    ni = layout.n_interior
    m = layout.n_beam
    n = grid.n_nodes

    want_principal = part in ("full", "principal")
    want_bounded = part in ("full", "bounded")

    blocks = [[None] * 6 for _ in range(6)]
    R, VX, VY, TH, E1, E2 = range(6)

    if want_principal:
        # density: d rho/dt = -rho_bar div v, plus weak smoothing that kills
        # mesh-frequency modes the centered divergence cannot see
        eps = grid.hx * grid.hy
        blocks[R][VX] = -rho_bar * (dx_sbp @ sel.T)
        blocks[R][VY] = -rho_bar * (dy_sbp @ sel.T)
        blocks[R][E2] = -rho_bar * (dy_sbp @ top)
        blocks[R][R] = eps * fv

        lap = dxx + dyy
        mxx = coef_lap * lap + coef_div * dxx
        myy = coef_lap * lap + coef_div * dyy
        mxy = coef_div * dxy
        blocks[VX][VX] = sel @ mxx @ sel.T
        blocks[VX][VY] = sel @ mxy @ sel.T
        blocks[VX][E2] = sel @ mxy @ top
        blocks[VY][VX] = sel @ mxy @ sel.T
        blocks[VY][VY] = sel @ myy @ sel.T
        blocks[VY][E2] = sel @ myy @ top

        blocks[TH][TH] = params.kappa_bar * fv

        blocks[E1][E2] = sp.identity(m, format="csr")
        bih = sp.csr_matrix(ops.bih_clamped)
        lap_s = sp.csr_matrix(ops.lap_s)
        blocks[E2][E1] = -bih
        blocks[E2][E2] = lap_s

    if want_bounded:
        # pressure gradients in the momentum rows
        c_rho = params.R0 * params.theta_bar / rho_bar
        c_th = params.R0
        add = lambda b, extra: extra if b is None else b + extra
        blocks[VX][R] = add(blocks[VX][R], -c_rho * (sel @ dx_sbp))
        blocks[VY][R] = add(blocks[VY][R], -c_rho * (sel @ dy_sbp))
        blocks[VX][TH] = add(blocks[VX][TH], -c_th * (sel @ dx_sbp))
        blocks[VY][TH] = add(blocks[VY][TH], -c_th * (sel @ dy_sbp))

        # beam forcing: minus the normal stress sampled on the top edge,
        #   -(2 mu + alpha) d_y v_y + R0 theta_bar rho + R0 rho_bar theta
        # (the tangential velocity vanishes along the whole edge, so the
        # horizontal part of the divergence drops out identically)
        visc = 2.0 * mu + params.alpha
        hy = grid.hy
        ny1 = grid.ny + 1
        rows, cols, vals = [], [], []
        int_pos = np.full(n, -1, dtype=int)
        int_pos[layout.interior_flat] = np.arange(ni)
        for k in range(m):
            i = k + 1
            below1 = int_pos[i * ny1 + (ny1 - 2)]
            below2 = int_pos[i * ny1 + (ny1 - 3)]
            rows += [k, k]
            cols += [below1, below2]
            vals += [-visc * (-2.0 / hy), -visc * (0.5 / hy)]
        stress_vy = sp.csr_matrix((vals, (rows, cols)), shape=(m, ni))
        add = lambda b, extra: extra if b is None else b + extra
        blocks[E2][VY] = add(blocks[E2][VY], stress_vy)
        blocks[E2][E2] = add(
            blocks[E2][E2], sp.identity(m, format="csr") * (-visc * 1.5 / hy)
        )
        blocks[E2][R] = add(blocks[E2][R], params.R0 * params.theta_bar * trace)
        blocks[E2][TH] = add(blocks[E2][TH], params.R0 * rho_bar * trace)

    sizes = [n, ni, ni, n, m, m]
    for r in range(6):
        for c in range(6):
            if blocks[r][c] is None:
                blocks[r][c] = sp.csr_matrix((sizes[r], sizes[c]))
    matrix = sp.bmat(blocks, format="csr")
    return OperatorMatrix(
        matrix=matrix,
        domain="full",
        weights=_coupled_weights(layout),
        label=f"coupled-{part}",
        layout=layout,
        grid=grid,
        params=params,
    )


def assemble_block(grid: Grid2D, params: PhysParams, which: str) -> OperatorMatrix:
    """Standalone generator of one decoupled sub-dynamics.

    "plate": beam deflection/velocity pair (matches `plate_operator`),
    "velocity": viscous flow with homogeneous no-slip walls,
    "heat": insulated heat flow.
    """
    if which == "plate":
        mat = sp.csr_matrix(plate_operator(grid))
        w = grid.beam_weights[1:-1]
        weights = np.concatenate([w, w])
        return OperatorMatrix(
            matrix=mat, domain="full", weights=weights, label="plate", grid=grid,
            params=params,
        )
    if which == "velocity":
        layout = block_layout(grid)
        sel, _, _ = _selection(layout)
        _, _, dxx, dyy, dxy = _grid_operators(grid)
        coef_lap = params.mu / params.rho_bar
        coef_div = (params.alpha + params.mu) / params.rho_bar
        lap = dxx + dyy
        mat = sp.bmat(
            [
                [
                    sel @ (coef_lap * lap + coef_div * dxx) @ sel.T,
                    sel @ (coef_div * dxy) @ sel.T,
                ],
                [
                    sel @ (coef_div * dxy) @ sel.T,
                    sel @ (coef_lap * lap + coef_div * dyy) @ sel.T,
                ],
            ],
            format="csr",
        )
        w_int = grid.weights.ravel()[layout.interior_flat]
        weights = np.concatenate([w_int, w_int])
        return OperatorMatrix(
            matrix=mat, domain="full", weights=weights, label="velocity",
            grid=grid, params=params,
        )
    if which == "heat":
        fv, _ = _fv_diffusion(grid, _identity_metric(grid))
        mat = (params.kappa_bar * fv).tocsr()
        return OperatorMatrix(
            matrix=mat, domain="full", weights=grid.weights.ravel().copy(),
            label="heat", grid=grid, params=params,
        )
    raise ConfigError(f"unknown operator block {which!r}")


# ------------------------------------------------- conserved functionals


def constraint_functionals(layout: BlockLayout, params: PhysParams) -> np.ndarray:
    """Rows c with c @ A = 0: stacked mass (density plus scaled deflection)
    and temperature mean.  Returned as a (2, total) array."""
    grid = layout.grid
    c1 = np.zeros(layout.total)
    c2 = np.zeros(layout.total)
    c1[layout.sl_rho] = grid.weights.ravel()
    c1[layout.sl_eta1] = params.rho_bar * grid.beam_weights[1:-1]
    c2[layout.sl_theta] = grid.weights.ravel()
    return np.vstack([c1, c2])


def kernel_vectors(layout: BlockLayout, params: PhysParams) -> np.ndarray:
    """Closed-form null vectors of the coupled generator, (total, 2).

    Constant density (resp. temperature) plus the clamped beam shape that
    balances the resulting uniform surface pressure.
    """
    grid = layout.grid
    ops = diff_ops(grid)
    w = la.solve(ops.bih_clamped, np.ones(layout.n_beam))
    k1 = np.zeros(layout.total)
    k2 = np.zeros(layout.total)
    k1[layout.sl_rho] = 1.0
    k1[layout.sl_eta1] = params.R0 * params.theta_bar * w
    k2[layout.sl_theta] = 1.0
    k2[layout.sl_eta1] = params.R0 * params.rho_bar * w
    return np.column_stack([k1, k2])


def project_mean_zero(
    op: OperatorMatrix, vec: np.ndarray, tol: float = 1e-13
) -> np.ndarray:
    """Project a state vector onto the mean-zero subspace by constant
    shifts of temperature and density (the shifts the conserved
    functionals respond to)."""
    if op.layout is None:
        raise ConfigError("projection needs a coupled operator with a layout")
    layout, params = op.layout, op.params
    cons = constraint_functionals(layout, params)
    area = layout.grid.area
    out = np.array(vec, dtype=float, copy=True)
    out[layout.sl_theta] -= (cons[1] @ out) / area
    out[layout.sl_rho] -= (cons[0] @ out) / area
    resid = np.abs(cons @ out)
    scale = max(np.linalg.norm(out), 1.0)
    if np.any(resid > 1e3 * tol * scale):
        raise NumericsError("mean-zero projection failed to close")
    return out


def restrict_Xm(op: OperatorMatrix) -> OperatorMatrix:
    """Deflate the two conserved-quantity kernel directions to
    DEFLATION_SHIFT so the matrix becomes invertible and its remaining
    spectrum is exactly the mean-zero-subspace spectrum."""
    if op.layout is None:
        raise ConfigError("mean-zero restriction needs a coupled operator")
    if op.domain == "mean_zero":
        return op
    kern = kernel_vectors(op.layout, op.params)
    cons = constraint_functionals(op.layout, op.params)
    cross = cons @ kern
    shift = la.solve(cross.T, kern.T).T  # kern @ inv(cons @ kern)
    update = sp.csr_matrix(DEFLATION_SHIFT * shift) @ sp.csr_matrix(cons)
    return OperatorMatrix(
        matrix=(op.matrix + update).tocsr(),
        domain="mean_zero",
        weights=op.weights,
        label=op.label + "-mean-zero",
        layout=op.layout,
        grid=op.grid,
        params=op.params,
    )


# ---------------------------------------------------------------- spectra


def spectrum(op: OperatorMatrix, restrict: str = "native", with_vectors: bool = False):
    """Dense eigenvalues sorted by descending real part.

    `restrict="mean_zero"` deflates the conserved directions first and
    drops the two shifted eigenvalues from the result.
    """
    if restrict not in ("native", "full", "mean_zero"):
        raise ConfigError(f"unknown spectrum restriction {restrict!r}")
    work = op
    if restrict == "mean_zero" and op.domain != "mean_zero":
        work = restrict_Xm(op)
    if restrict == "full" and op.domain != "full":
        raise ConfigError("cannot widen a mean-zero operator back to full")
    n = work.shape[0]
    if n > MAX_DENSE_DIM:
        raise ConfigError(
            f"dense eigensolve refused for dimension {n} > {MAX_DENSE_DIM}"
        )
    dense = work.matrix.toarray()
    if with_vectors:
        vals, vecs = la.eig(dense)
    else:
        vals = la.eigvals(dense)
        vecs = None
    if work.domain == "mean_zero":
        dist = np.abs(vals - DEFLATION_SHIFT)
        drop = np.argsort(dist)[:2]
        if np.any(dist[drop] > 1e-3 * abs(DEFLATION_SHIFT)):
            raise NumericsError("deflated kernel eigenvalues not found at shift")
        keep = np.setdiff1d(np.arange(n), drop)
        vals = vals[keep]
        if vecs is not None:
            vecs = vecs[:, keep]
    order = np.argsort(-vals.real)
    vals = vals[order]
    if with_vectors:
        return vals, vecs[:, order]
    return vals


def energy_rate(op: OperatorMatrix, vec: np.ndarray) -> float:
    """Re <A x, x> in the quadratic form whose decay drives the stability
    argument: weighted L2 on density (R0 theta_bar / rho_bar), velocity
    (rho_bar) and beam velocity, plus the clamped bending form on the
    deflection.  Negative for every temperature-free state."""
    if op.layout is None:
        raise ConfigError("energy rate needs a coupled operator with a layout")
    layout, params = op.layout, op.params
    grid = layout.grid
    ops = diff_ops(grid)
    x = np.asarray(vec)
    ax = op.matrix @ x
    w_nodes = grid.weights.ravel()
    w_int = w_nodes[layout.interior_flat]
    w_beam = grid.beam_weights[1:-1]
    c_rho = params.R0 * params.theta_bar / params.rho_bar

    def pair(a, b, w):
        return float(np.real(np.sum(a * np.conj(b) * w)))

    total = c_rho * pair(ax[layout.sl_rho], x[layout.sl_rho], w_nodes)
    total += params.rho_bar * pair(ax[layout.sl_vx], x[layout.sl_vx], w_int)
    total += params.rho_bar * pair(ax[layout.sl_vy], x[layout.sl_vy], w_int)
    total += pair(ax[layout.sl_eta2], x[layout.sl_eta2], w_beam)
    bih = ops.bih_clamped
    total += pair(bih @ ax[layout.sl_eta1], x[layout.sl_eta1], w_beam)
    return total


# -------------------------------------------------------------- resolvent


def _bordered_solve(mat: sp.spmatrix, border: np.ndarray, rhs: np.ndarray):
    """Solve [[mat, border], [border^T, 0]] [x; s] = [rhs; 0]."""
    n = mat.shape[0]
    col = sp.csr_matrix(border.reshape(n, 1))
    sys = sp.bmat([[mat, col], [col.T, None]], format="csc")
    lu = _splu(sys, "bordered solve")
    sol = lu.solve(np.concatenate([rhs, [0.0]]))
    return sol[:n], sol[n]


def _resolvent_zero_coupled(op: OperatorMatrix, rhs: np.ndarray) -> np.ndarray:
    """Solve -A x = rhs at the spectral point 0 on the mean-zero subspace.

    The solve follows the decoupling order of the stationary system: beam
    velocity first, then the insulated temperature problem, then a
    divergence-constrained flow problem for velocity and the fluctuating
    density, and finally the beam deflection through the bending matrix
    plus the rank-one mean-pressure coupling.  Every block is sliced out of
    the assembled matrix, so the result satisfies the discrete equations
    verbatim.
    """
    layout, params, grid = op.layout, op.params, op.grid
    cons = constraint_functionals(layout, params)
    scale = float(np.linalg.norm(rhs))
    viol = np.abs(cons @ rhs)
    limit = 1e-9 * max(scale, 1.0) * np.linalg.norm(cons, axis=1)
    if np.any(viol > limit):
        raise NumericsError(
            "spectral point 0 is singular for this right-hand side: the "
            "conserved-quantity functionals of the source do not vanish "
            f"(residuals {viol.tolist()})"
        )

    B = (-op.matrix).tocsr()
    slr, slvx, slvy = layout.sl_rho, layout.sl_vx, layout.sl_vy
    slth, sl1, sl2 = layout.sl_theta, layout.sl_eta1, layout.sl_eta2
    f1 = rhs[slr]
    f2 = np.concatenate([rhs[slvx], rhs[slvy]])
    f3 = rhs[slth]
    h1 = rhs[sl1]
    h2 = rhs[sl2]

    # beam velocity decouples algebraically
    eta2 = -h1

    # insulated temperature problem with pinned mean
    w_nodes = grid.weights.ravel()
    theta, _ = _bordered_solve(B[slth, slth], w_nodes, f3)

    # flow problem: momentum rows plus density rows, mean of the density
    # fluctuation pinned to zero through a border column
    slv = layout.sl_v
    mom = sp.hstack([B[slv, slv], B[slv, slr]])
    div = sp.hstack([B[slr, slv], B[slr, slr]])
    rhs_mom = f2 - B[slv, slth] @ theta - B[slv, sl2] @ eta2
    rhs_div = f1 - B[slr, sl2] @ eta2
    nv = 2 * layout.n_interior
    border = np.concatenate([np.zeros(nv), w_nodes])
    flow = sp.vstack([mom, div])
    sol, _ = _bordered_solve(flow, border, np.concatenate([rhs_mom, rhs_div]))
    v = sol[:nv]
    rho_m = sol[nv:]

    # beam deflection: bending matrix plus the rank-one coupling through
    # the mean density the deflection itself displaces
    ops = diff_ops(grid)
    w_beam = grid.beam_weights[1:-1]
    gain = params.R0 * params.theta_bar * params.rho_bar / grid.area
    plate = ops.bih_clamped + gain * np.outer(np.ones(layout.n_beam), w_beam)
    rhs_plate = h2 - (
        B[sl2, slv] @ v
        + B[sl2, slr] @ rho_m
        + B[sl2, slth] @ theta
        + B[sl2, sl2] @ eta2
    )
    eta1 = la.solve(plate, rhs_plate)

    rho_avg = -params.rho_bar / grid.area * float(w_beam @ eta1)
    x = np.empty(layout.total)
    x[slr] = rho_m + rho_avg
    x[slvx] = v[: layout.n_interior]
    x[slvy] = v[layout.n_interior:]
    x[slth] = theta
    x[sl1] = eta1
    x[sl2] = eta2
    return x


def resolvent_solve(
    op: OperatorMatrix, lam: complex, rhs: np.ndarray, rtol: float = 1e-8
) -> np.ndarray:
    """Solve (lam I - A) x = rhs with an explicit residual check.

    A singular or near-singular spectral point raises NumericsError rather
    than returning garbage.  At lam = 0 on a full-domain coupled operator
    the solve goes through the stationary cascade, which also checks that
    the right-hand side respects the conserved quantities.
    """
    rhs = np.asarray(rhs)
    if rhs.shape != (op.shape[0],):
        raise ConfigError("right-hand side length does not match operator")
    if lam == 0 and op.layout is not None and op.domain == "full":
        x = _resolvent_zero_coupled(op, rhs.astype(float))
    else:
        mat = (lam * sp.identity(op.shape[0], format="csr") - op.matrix).tocsc()
        if np.iscomplexobj(rhs) or np.iscomplex(lam):
            mat = mat.astype(complex)
        lu = _splu(mat, f"resolvent solve at {lam}")
        x = lu.solve(rhs.astype(mat.dtype))
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"resolvent solve at {lam} produced non-finite values")
    resid = lam * x - op.matrix @ x - rhs
    scale = max(float(np.linalg.norm(rhs)), 1e-30)
    rel = float(np.linalg.norm(resid)) / scale
    if rel > rtol:
        raise NumericsError(
            f"resolvent residual {rel:.3e} at spectral point {lam} exceeds "
            f"{rtol:.1e}; the point is at or near the spectrum"
        )
    return x


# ------------------------------------------------------------ sector scan


@dataclass(frozen=True)
class SectorScanResult:
    """Scaled resolvent norms sampled over a sector of opening 2*beta."""

    beta: float
    gamma: float
    lambdas: np.ndarray
    values: np.ndarray
    m_hat: float
    singular: tuple

    @property
    def passed(self) -> bool:
        return len(self.singular) == 0 and np.isfinite(self.m_hat)


def _weight_gram(op: OperatorMatrix, rho_norm: str) -> sp.csr_matrix:
    """Gram matrix of the norm used for resolvent bounds.

    Quadrature-weighted L2 on every block except the beam deflection,
    which carries the clamped bending form (the second-derivative proxy
    matching that component's regularity; without it the companion-form
    beam pair looks spuriously non-normal).  `rho_norm="h1"` additionally
    stiffens the density block by a first-derivative form.
    """
    if rho_norm not in ("l2", "h1"):
        raise ConfigError(f"unknown density norm variant {rho_norm!r}")
    gram = sp.diags(op.weights).tocsr()

    def bending(grid):
        h = grid.beam_weights[1]
        return sp.csr_matrix(h * diff_ops(grid).bih_clamped)

    if op.layout is not None:
        layout = op.layout
        parts = [
            sp.diags(op.weights[layout.sl_rho]),
            sp.diags(op.weights[layout.sl_v]),
            sp.diags(op.weights[layout.sl_theta]),
            bending(layout.grid),
            sp.diags(op.weights[layout.sl_eta2]),
        ]
        gram = sp.block_diag(parts, format="csr")
        if rho_norm == "h1":
            grid = layout.grid
            dx_sbp, dy_sbp, *_ = _grid_operators(grid)
            w = sp.diags(grid.weights.ravel())
            stiff = (dx_sbp.T @ w @ dx_sbp + dy_sbp.T @ w @ dy_sbp).tocsr()
            rest = op.shape[0] - grid.n_nodes
            pad = sp.block_diag([stiff, sp.csr_matrix((rest, rest))], format="csr")
            gram = (gram + pad).tocsr()
        return gram
    if op.label == "plate":
        if rho_norm == "h1":
            raise ConfigError("h1 density norm needs a coupled operator")
        m = op.shape[0] // 2
        return sp.block_diag(
            [bending(op.grid), sp.diags(op.weights[m:])], format="csr"
        )
    if rho_norm == "h1":
        raise ConfigError("h1 density norm needs a coupled operator")
    return gram


def _scaled_resolvent_norm(
    op: OperatorMatrix,
    lam: complex,
    gram: sp.csr_matrix,
    rng: np.random.Generator,
    iters: int,
) -> float:
    """||lam (lam I - A)^{-1}|| in the quadrature norm via power iteration
    on the weighted normal operator."""
    n = op.shape[0]
    mat = (lam * sp.identity(n, format="csr") - op.matrix).tocsc().astype(complex)
    lu = _splu(mat, f"sector sample at {lam}")
    diag = gram.diagonal()
    if gram.nnz == np.count_nonzero(diag):
        w_apply = lambda z: diag * z
        w_solve = lambda z: z / diag
    else:
        glu = _splu(gram.tocsc().astype(complex), "norm Gram factor")
        w_apply = lambda z: gram @ z
        w_solve = lambda z: glu.solve(z)

    # power iteration on the weighted normal operator R* R; the singular
    # value estimate is ||R x|| for the current unit-norm iterate
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.sqrt(np.real(np.vdot(x, w_apply(x))))
    value = 0.0
    for _ in range(iters):
        y = lu.solve(x)
        value = np.sqrt(abs(np.real(np.vdot(y, w_apply(y)))))
        z = w_solve(lu.solve(w_apply(y), trans="H"))
        nrm = np.sqrt(abs(np.real(np.vdot(z, w_apply(z)))))
        if not np.isfinite(nrm) or nrm == 0.0:
            raise NumericsError(f"power iteration collapsed at {lam}")
        x = z / nrm
    return abs(lam) * value


def sector_scan(
    op: OperatorMatrix,
    beta: float,
    radii,
    gamma: float = 0.0,
    rho_norm: str = "l2",
    power_iters: int = 30,
    angle_margin: float = 0.05,
    seed: int = 0,
) -> SectorScanResult:
    """Sample ||lam (lam I - (A - gamma))^{-1}|| over rays of the sector
    |arg lam| < beta and report the maximum.

    Norms are quadrature-weighted Euclidean proxies for the function-space
    norms; the scalar maximum stands in for the operator-family bound.
    Samples where the factorization fails are collected in `singular`
    instead of aborting the scan.
    """
    if not 0 < beta < np.pi:
        raise ConfigError("sector half-opening must lie in (0, pi)")
    if gamma < 0:
        raise ConfigError("spectral shift gamma must be nonnegative")
    radii = np.asarray(sorted(float(r) for r in radii))
    if radii.size == 0 or np.any(radii <= 0):
        raise ConfigError("sector scan needs positive sample radii")
    rng = np.random.default_rng(seed)
    gram = _weight_gram(op, rho_norm)
    shifted = OperatorMatrix(
        matrix=(op.matrix - gamma * sp.identity(op.shape[0], format="csr")).tocsr(),
        domain=op.domain,
        weights=op.weights,
        label=op.label,
        layout=op.layout,
        grid=op.grid,
        params=op.params,
    )
    angles = [0.0, beta / 2.0, max(beta - angle_margin, beta * 0.5)]
    lambdas = []
    for r in radii:
        for phi in angles:
            lambdas.append(r * np.exp(1j * phi))
            if phi > 0:
                lambdas.append(r * np.exp(-1j * phi))
    values = []
    kept = []
    singular = []
    for lam in lambdas:
        try:
            val = _scaled_resolvent_norm(shifted, lam, gram, rng, power_iters)
        except NumericsError:
            singular.append(lam)
            continue
        kept.append(lam)
        values.append(val)
    values = np.asarray(values)
    m_hat = float(values.max()) if values.size else float("inf")
    return SectorScanResult(
        beta=beta,
        gamma=gamma,
        lambdas=np.asarray(kept),
        values=values,
        m_hat=m_hat,
        singular=tuple(singular),
    )


def gamma_search(
    op: OperatorMatrix,
    beta: float,
    radii,
    start: float = 0.0,
    factor: float = 4.0,
    limit: float = 1.0e4,
    **scan_kwargs,
):
    """Smallest tried shift gamma for which the sector scan has no singular
    samples, found by geometric increase from `start`."""
    gamma = start
    while True:
        result = sector_scan(op, beta, radii, gamma=gamma, **scan_kwargs)
        if result.passed:
            return gamma, result
        gamma = factor * max(gamma, 0.25)
        if gamma > limit:
            raise NumericsError(
                f"no shift up to {limit} made the sector scan regular"
            )


# ---------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbationReport:
    """Fitted relative bound ||B x|| <= a ||A0 x|| + b ||x|| together with
    the sector bound of the principal part and the smallness verdict."""

    a: float
    b: float
    m_hat: float
    condition_ok: bool
    n_samples: int


def perturbation_check(
    a0: OperatorMatrix,
    b: OperatorMatrix,
    beta: float,
    gamma: float,
    n_samples: int = 32,
    seed: int = 0,
    radii=(1.0e-2, 1.0, 1.0e2),
) -> PerturbationReport:
    """Check that the bounded part is small relative to the principal part.

    Random states give pairs (||B x||, ||A0 x||, ||x||) in the quadrature
    norm; a least-squares fit of the relative bound is compared against the
    reciprocal of the principal part's sector bound.
    """
    if a0.shape != b.shape:
        raise ConfigError("principal and bounded parts must have equal shape")
    rng = np.random.default_rng(seed)
    gram = _weight_gram(a0, "l2")
    norm = lambda z: np.sqrt(float(z @ (gram @ z)))
    rows = np.empty((n_samples, 2))
    lhs = np.empty(n_samples)
    for k in range(n_samples):
        x = rng.standard_normal(a0.shape[0])
        x /= norm(x)
        rows[k, 0] = norm(a0.matrix @ x)
        rows[k, 1] = 1.0
        lhs[k] = norm(b.matrix @ x)
    coef, *_ = np.linalg.lstsq(rows, lhs, rcond=None)
    a_fit = float(max(coef[0], 0.0))
    b_fit = float(max(coef[1], 0.0))
    scan = sector_scan(a0, beta, radii, gamma=gamma, seed=seed)
    condition_ok = bool(scan.passed and a_fit * scan.m_hat < 1.0)
    return PerturbationReport(
        a=a_fit, b=b_fit, m_hat=scan.m_hat,
        condition_ok=condition_ok, n_samples=n_samples,
    )
