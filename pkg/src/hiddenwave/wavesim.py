"""Differentiable explicit finite-difference solver for u_tt = v^2(x,y) Δu.

Leapfrog time stepping with a 5-point Laplacian; the boundary ring is
clamped to supplied (Dirichlet) values after every step. The same update
runs in two forms: through the autodiff graph (for gradient-based
calibration of the wave-speed field) and as a streaming NumPy loop (for
long synthetic-data generation where no gradients are needed). Both forms
share the compiled stencil kernel and perform identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.interpolate

from . import _kernels
from . import autodiff as ad
from .optim import Adam

CFL_LIMIT = 1.0 / np.sqrt(2.0)

LAPLACE_KERNEL = np.array([[0.0, 1.0, 0.0],
                           [1.0, -4.0, 1.0],
                           [0.0, 1.0, 0.0]])


class CflError(ValueError):
    """Explicit scheme unstable: v_max * dt / h exceeds 1/sqrt(2)."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass
class Grid2D:
    nx: int
    ny: int
    h: float      # spacing, mm (equal in x and y)
    dt: float     # time step, us
    nt: int       # number of stored frames

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.ny}x{self.nx}")
        if self.h <= 0 or self.dt <= 0:
            raise ValueError("h and dt must be positive")
        if self.nt < 2:
            raise ValueError("nt must be at least 2")

    def cfl_number(self, v_max):
        return float(v_max) * self.dt / self.h

    def check_cfl(self, v_max):
        c = self.cfl_number(v_max)
        if c > CFL_LIMIT + 1e-12:
            raise CflError(
                f"CFL violated: v_max*dt/h = {c:.4f} > 1/sqrt(2) = {CFL_LIMIT:.4f}")


class VelocityGrid:
    """Positive wave-speed field, stored as log-values for unconstrained
    optimization."""

    def __init__(self, latent):
        self.latent = latent if isinstance(latent, ad.Tensor) else ad.Tensor(
            np.asarray(latent, dtype=np.float64), requires_grad=True)

    @classmethod
    def uniform(cls, ny, nx, v):
        if v <= 0:
            raise ValueError(f"wave speed must be positive, got {v}")
        return cls(np.full((ny, nx), np.log(v)))

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if np.any(values <= 0):
            raise ValueError("wave speed values must be positive")
        return cls(np.log(values))

    @property
    def shape(self):
        return self.latent.shape

    def values(self):
        return np.exp(self.latent.data)

    def tensor(self):
        """Differentiable positive speed field."""
        return ad.exp(self.latent)


@dataclass
class SimState:
    u_prev: ad.Tensor
    u_curr: ad.Tensor


def laplacian(fld, h):
    """5-point Laplacian; the boundary ring is copied from the nearest
    interior cell (its value is overwritten by Dirichlet data each step,
    so it is never consumed by the scheme)."""
    t = fld if isinstance(fld, ad.Tensor) else ad.Tensor(np.asarray(fld, dtype=np.float64))
    if t.ndim != 2 or t.shape[0] < 3 or t.shape[1] < 3:
        raise ad.ShapeError(f"laplacian needs a grid of at least 3x3, got {t.shape}")
    interior = ad.correlate3x3(t, LAPLACE_KERNEL / h ** 2)
    rows = ad.concat([interior[0:1, :], interior, interior[-1:, :]], axis=0)
    return ad.concat([rows[:, 0:1], rows, rows[:, -1:]], axis=1)


def _leapfrog(u_prev, u_curr, v_sq, dt, h):
    lap = laplacian(u_curr, h)
    return ad.add(ad.sub(ad.mul(u_curr, 2.0), u_prev), ad.mul(ad.mul(v_sq, lap), dt ** 2))


def step(state, v, grid):
    """One leapfrog step u_next = 2 u_curr - u_prev + dt^2 v^2 lap(u_curr)."""
    grid.check_cfl(np.max(v.values()))
    u_next = _leapfrog(state.u_prev, state.u_curr, ad.square(v.tensor()), grid.dt, grid.h)
    return SimState(u_prev=state.u_curr, u_curr=u_next)


class BoundaryRings:
    """Dirichlet values for the outer one-cell ring, one set per frame.

    Rows are applied before columns, so the left/right columns win at the
    corners; extraction below uses the same convention.
    """

    def __init__(self, top, bottom, left, right):
        self.top = np.asarray(top, dtype=np.float64)
        self.bottom = np.asarray(bottom, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.float64)
        self.right = np.asarray(right, dtype=np.float64)
        if not (len(self.top) == len(self.bottom) == len(self.left) == len(self.right)):
            raise ValueError("ring edge arrays must share the frame count")

    def __len__(self):
        return self.top.shape[0]

    @classmethod
    def zeros(cls, nt, ny, nx):
        return cls(np.zeros((nt, nx)), np.zeros((nt, nx)),
                   np.zeros((nt, ny)), np.zeros((nt, ny)))

    @classmethod
    def from_frames(cls, frames):
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames[:, 0, :], frames[:, -1, :], frames[:, :, 0], frames[:, :, -1])

    def frame(self, k, ny, nx):
        """Dense (ny, nx) array: ring values at frame k, zero inside."""
        out = np.zeros((ny, nx))
        out[0, :] = self.top[k]
        out[-1, :] = self.bottom[k]
        out[:, 0] = self.left[k]
        out[:, -1] = self.right[k]
        return out


def _interior_mask(ny, nx):
    m = np.zeros((ny, nx))
    m[1:-1, 1:-1] = 1.0
    return m


def simulate(ic, bc, v, grid):
    """Time-march `grid.nt` frames; output includes the two initial frames.

    `ic` is the pair of initial frames, `bc` supplies the Dirichlet ring for
    every output frame (the ring is overwritten on the initial frames too).
    Fully differentiable with respect to `v` and `ic`.
    """
    if len(bc) != grid.nt:
        raise ValueError(f"bc covers {len(bc)} frames but grid.nt = {grid.nt}")
    grid.check_cfl(np.max(v.values()))
    ny, nx = grid.ny, grid.nx
    mask = ad.Tensor(_interior_mask(ny, nx))
    v_sq = ad.square(v.tensor())

    def clamp_ring(u, k):
        return ad.add(ad.mul(u, mask), ad.Tensor(bc.frame(k, ny, nx)))

    u0 = ic[0] if isinstance(ic[0], ad.Tensor) else ad.Tensor(np.asarray(ic[0], dtype=np.float64))
    u1 = ic[1] if isinstance(ic[1], ad.Tensor) else ad.Tensor(np.asarray(ic[1], dtype=np.float64))
    if u0.shape != (ny, nx) or u1.shape != (ny, nx):
        raise ad.ShapeError(f"initial frames must be ({ny}, {nx})")
    frames = [clamp_ring(u0, 0), clamp_ring(u1, 1)]
    for k in range(2, grid.nt):
        u_next = _leapfrog(frames[k - 2], frames[k - 1], v_sq, grid.dt, grid.h)
        frames.append(clamp_ring(u_next, k))
    return ad.stack(frames, axis=0)


def simulate_stream(ic, bc, v_values, grid, keep_every=1):
    """Streaming (no-gradient) twin of `simulate`: identical arithmetic,
    rolling state, returns only every `keep_every`-th frame as float64."""
    if len(bc) != grid.nt:
        raise ValueError(f"bc covers {len(bc)} frames but grid.nt = {grid.nt}")
    v_values = np.asarray(v_values, dtype=np.float64)
    grid.check_cfl(v_values.max())
    ny, nx = grid.ny, grid.nx
    v_sq = v_values ** 2
    kern = LAPLACE_KERNEL / grid.h ** 2
    dt2 = grid.dt ** 2

    def clamp_ring(u, k):
        u[0, :] = bc.top[k]
        u[-1, :] = bc.bottom[k]
        u[:, 0] = bc.left[k]
        u[:, -1] = bc.right[k]
        return u

    u_prev = clamp_ring(np.array(ic[0], dtype=np.float64), 0)
    u_curr = clamp_ring(np.array(ic[1], dtype=np.float64), 1)
    kept = [u_prev.copy()]
    if keep_every == 1:
        kept.append(u_curr.copy())
    for k in range(2, grid.nt):
        lap = _kernels.correlate3x3_valid(u_curr, kern)
        u_next = 2.0 * u_curr - u_prev
        u_next[1:-1, 1:-1] += (v_sq[1:-1, 1:-1] * lap) * dt2
        clamp_ring(u_next, k)
        u_prev, u_curr = u_curr, u_next
        if k % keep_every == 0:
            kept.append(u_curr.copy())
    return np.stack(kept, axis=0)


@dataclass
class FdConfig:
    """Settings for gradient-based calibration of the wave-speed field."""

    v_init: float = 3.0          # mm/us, aluminum-like surface-wave scale
    lr: float = 0.05
    iters: int = 250
    substep: int = 4             # internal steps per data frame
    tv_weight: float = 0.0       # total-variation regularizer on v
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_internal_cells: float = 4e7   # nt_internal * ny * nx memory guard
    seed: int = 0


def _cubic_time_interp(t_data, arr, t_query):
    return scipy.interpolate.CubicSpline(t_data, arr, axis=0)(t_query)


def _calibration_inputs(values, dx, dt, substep):
    """Internal grid, interpolated boundary rings and initial frames for
    matching a measured window at dt/substep."""
    nt, ny, nx = values.shape
    r = int(substep)
    nt_int = (nt - 1) * r + 1
    grid = Grid2D(nx=nx, ny=ny, h=dx, dt=dt / r, nt=nt_int)
    t_data = np.arange(nt) * dt
    t_int = np.arange(nt_int) * (dt / r)
    rings = BoundaryRings.from_frames(values)
    if r == 1:
        bc = rings
        ic1 = values[1]
    else:
        bc = BoundaryRings(
            _cubic_time_interp(t_data, rings.top, t_int),
            _cubic_time_interp(t_data, rings.bottom, t_int),
            _cubic_time_interp(t_data, rings.left, t_int),
            _cubic_time_interp(t_data, rings.right, t_int),
        )
        ic1 = _cubic_time_interp(t_data, values, np.array([dt / r]))[0]
    return grid, bc, values[0], ic1


def predict_frames(observed, vel, substep=4):
    """Frames at the observed sampling produced by the fitted speed field,
    using the same initial/boundary data as `calibrate_fd`."""
    values = np.asarray(observed.values, dtype=np.float64)
    grid, bc, ic0, ic1 = _calibration_inputs(values, float(observed.dx),
                                             float(observed.dt), substep)
    frames = simulate_stream((ic0, ic1), bc, vel.values(), grid, keep_every=substep)
    return frames


def calibrate_fd(observed, config=None):
    """Fit the wave-speed field so the simulation reproduces an observed
    wavefield window (mean squared error over all frames past the two
    initial ones). Returns (VelocityGrid, per-iteration loss history).

    The observed data are used directly as initial frames and Dirichlet
    boundary rings. Because measured sampling usually violates the explicit
    CFL bound, the march runs at dt/substep and compares every substep-th
    frame; ring values between samples come from a cubic interpolant.
    """
    config = config or FdConfig()
    values = np.asarray(observed.values, dtype=np.float64)
    nt, ny, nx = values.shape
    h, dt = float(observed.dx), float(observed.dt)
    r = int(config.substep)
    nt_int = (nt - 1) * r + 1
    if nt_int * ny * nx > config.max_internal_cells:
        raise ValueError(
            f"window too large for whole-trajectory autodiff: "
            f"{nt_int * ny * nx:.0f} internal cells > cap {config.max_internal_cells:.0f}")

    grid, bc, ic0, ic1 = _calibration_inputs(values, h, dt, r)
    grid.check_cfl(config.v_init)

    vel = VelocityGrid.uniform(ny, nx, config.v_init)
    opt = Adam([vel.latent], lr=config.lr, betas=config.betas, eps=config.eps)
    targets = [ad.Tensor(values[j]) for j in range(1, nt)]
    mask = ad.Tensor(_interior_mask(ny, nx))
    n_compared = (nt - 1) * ny * nx

    history = []
    with ad.finite_checks(False):
        for it in range(config.iters):
            v_sq = ad.square(vel.tensor())
            u_prev = ad.Tensor(ic0)
            u_curr = ad.Tensor(ic1)
            total = None
            for k in range(2, nt_int):
                u_next = _leapfrog(u_prev, u_curr, v_sq, grid.dt, h)
                u_next = ad.add(ad.mul(u_next, mask), ad.Tensor(bc.frame(k, ny, nx)))
                u_prev, u_curr = u_curr, u_next
                if k % r == 0:
                    d = ad.sub(u_curr, targets[k // r - 1])
                    sq = ad.sum_(ad.square(d))
                    total = sq if total is None else ad.add(total, sq)
            loss = ad.mul(total, 1.0 / n_compared)
            if config.tv_weight > 0:
                v = vel.tensor()
                gx = ad.sub(v[:, 1:], v[:, :-1])
                gy = ad.sub(v[1:, :], v[:-1, :])
                tv = ad.add(ad.sum_(ad.sqrt(ad.add(ad.square(gx), 1e-12))),
                            ad.sum_(ad.sqrt(ad.add(ad.square(gy), 1e-12))))
                loss = ad.add(loss, ad.mul(tv, config.tv_weight))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"calibration loss became non-finite at iteration {it}; "
                    "try a smaller learning rate")
            history.append(loss_val)
            g = ad.grad(loss, [vel.latent])
            opt.step(g)
    return vel, np.asarray(history)


def swept_mask(values, rel_threshold=0.05):
    """Cells the wavefront visibly traverses: max |u| over time exceeds
    rel_threshold times the global max."""
    values = np.asarray(values, dtype=np.float64)
    peak = np.abs(values).max(axis=0)
    return peak >= rel_threshold * peak.max()
