"""Wavefield dataset format, windowing/normalization, and synthetic
specimen generation.

On-disk format: a ``<name>.json`` header
``{format_version, nx, ny, nt, dx_mm, dt_us, origin, byte_order, dtype,
metadata}`` next to ``<name>.raw`` holding little-endian float32 samples in
[t][y][x] row-major order. Storage is float32 (vibrometry-grade SNR),
computation float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fields import CoordScale
from . import wavesim

FORMAT_VERSION = 1


class FormatError(IOError):
    """Dataset files malformed or inconsistent."""


@dataclass
class WavefieldDataset:
    """Regular space-time raster of scalar deflection measurements."""

    values: np.ndarray          # (nt, ny, nx) float32
    dx: float                   # spacing, mm (equal in x and y)
    dt: float                   # sample interval, us
    origin: tuple = (0.0, 0.0, 0.0)   # (x0, y0, t0) in (mm, mm, us)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError(f"values must be (nt, ny, nx) with extents >= 2, got {v.shape}")
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError("dx and dt must be positive")
        if not np.isfinite(v).all():
            raise ValueError("dataset contains non-finite values")
        self.values = v
        self.origin = tuple(float(c) for c in self.origin)

    @property
    def nt(self):
        return self.values.shape[0]

    @property
    def ny(self):
        return self.values.shape[1]

    @property
    def nx(self):
        return self.values.shape[2]

    def axis_coords(self):
        """Physical coordinates along each axis: (x, y, t) vectors."""
        x0, y0, t0 = self.origin
        return (x0 + np.arange(self.nx) * self.dx,
                y0 + np.arange(self.ny) * self.dx,
                t0 + np.arange(self.nt) * self.dt)


def save(ds, path):
    """Write `<path>.json` + `<path>.raw`."""
    path = str(path)
    header = {
        "format_version": FORMAT_VERSION,
        "nx": ds.nx, "ny": ds.ny, "nt": ds.nt,
        "dx_mm": ds.dx, "dt_us": ds.dt,
        "origin": list(ds.origin),
        "byte_order": "LE",
        "dtype": "f32",
        "metadata": ds.metadata,
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2)
    with open(path + ".raw", "wb") as fh:
        fh.write(np.ascontiguousarray(ds.values, dtype="<f4").tobytes())


def load(path):
    """Inverse of `save`; bit-exact at float32."""
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")
    if header.get("byte_order") != "LE" or header.get("dtype") != "f32":
        raise FormatError("unsupported byte order or dtype")
    nt, ny, nx = header["nt"], header["ny"], header["nx"]
    with open(path + ".raw", "rb") as fh:
        raw = fh.read()
    expected = nt * ny * nx * 4
    if len(raw) != expected:
        raise FormatError(
            f"raw payload is {len(raw)} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype="<f4").reshape(nt, ny, nx)
    return WavefieldDataset(values=values, dx=header["dx_mm"], dt=header["dt_us"],
                            origin=tuple(header["origin"]), metadata=header["metadata"])


@dataclass
class Window:
    """Half-open physical crop ranges [lo, hi) in mm / us."""

    x: tuple
    y: tuple
    t: tuple

    def __post_init__(self):
        for name, (lo, hi) in (("x", self.x), ("y", self.y), ("t", self.t)):
            if not hi > lo:
                raise ValueError(f"window {name}-range is empty: [{lo}, {hi})")


def _axis_slice(name, lo, hi, origin, step, n):
    i0 = int(np.ceil((lo - origin) / step - 1e-9))
    i1 = int(np.ceil((hi - origin) / step - 1e-9))
    if i0 < 0 or i1 > n:
        raise ValueError(f"window {name}-range [{lo}, {hi}) outside dataset bounds")
    if i1 <= i0:
        raise ValueError(f"window {name}-range [{lo}, {hi}) selects no cells")
    return i0, i1


def window(ds, w):
    """Crop to a sub-raster; origin shifts, spacing is unchanged."""
    x0, y0, t0 = ds.origin
    ix0, ix1 = _axis_slice("x", *w.x, x0, ds.dx, ds.nx)
    iy0, iy1 = _axis_slice("y", *w.y, y0, ds.dx, ds.ny)
    it0, it1 = _axis_slice("t", *w.t, t0, ds.dt, ds.nt)
    return WavefieldDataset(
        values=ds.values[it0:it1, iy0:iy1, ix0:ix1].copy(),
        dx=ds.dx, dt=ds.dt,
        origin=(x0 + ix0 * ds.dx, y0 + iy0 * ds.dx, t0 + it0 * ds.dt),
        metadata=dict(ds.metadata),
    )


@dataclass
class NormalizedWavefield:
    """Z-scored measurements plus the affine record mapping the physical
    window onto [-1, 1]^3 (consumed by the sine networks)."""

    scale: CoordScale
    values: np.ndarray    # (nt, ny, nx) float64, z-scored


def normalize(ds):
    x, y, t = ds.axis_coords()
    centers = ((x[0] + x[-1]) / 2, (y[0] + y[-1]) / 2, (t[0] + t[-1]) / 2)
    halves = ((x[-1] - x[0]) / 2, (y[-1] - y[0]) / 2, (t[-1] - t[0]) / 2)
    vals = np.asarray(ds.values, dtype=np.float64)
    mean = float(vals.mean())
    std = float(vals.std())
    if std == 0.0:
        raise ValueError("cannot normalize a dataset with zero value variance")
    scale = CoordScale(centers=centers, halves=halves, value_mean=mean, value_std=std)
    return NormalizedWavefield(scale=scale, values=(vals - mean) / std)


@dataclass
class SourceSpec:
    """Gaussian-windowed tone injected along one boundary edge:
    s(t) = exp(-(t - delay)^2 / (2 tau^2)) * sin(2 pi f t)."""

    frequency: float = 5.0    # MHz
    tau: float = 0.2          # envelope width, us
    delay: float = 0.6        # us
    edge: str = "left"        # left | right | top | bottom

    def waveform(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.exp(-((t - self.delay) ** 2) / (2.0 * self.tau ** 2)) * np.sin(
            2.0 * np.pi * self.frequency * t)


@dataclass
class SyntheticSpec:
    """Synthetic specimen description: geometry, background speed, circular
    slow inclusions (speed factor in (0,1)), source and noise."""

    nx: int = 400
    ny: int = 260
    nt: int = 1024
    dx: float = 0.05          # mm
    dt: float = 0.02          # us
    background_v: float = 3.0  # mm/us
    inclusions: list = field(default_factory=list)   # (cx_mm, cy_mm, radius_mm, factor)
    source: SourceSpec = field(default_factory=SourceSpec)
    noise_std: float = 0.0
    seed: int = 0
    time_refine: int = 4      # internal sub-stepping keeps dt off the CFL limit

    def validate(self):
        if self.background_v <= 0:
            raise ValueError("background_v must be positive")
        for cx, cy, rad, factor in self.inclusions:
            if not 0.0 < factor < 1.0:
                raise ValueError(f"inclusion speed factor must be in (0, 1), got {factor}")
            if rad <= 0:
                raise ValueError(f"inclusion radius must be positive, got {rad}")
        wavelength = self.background_v / self.source.frequency
        if wavelength < 10.0 * self.dx:
            raise ValueError(
                f"source not resolvable: wavelength {wavelength:.3f} mm spans "
                f"{wavelength / self.dx:.1f} cells, need >= 10")
        dt_int = self.dt / self.time_refine
        c = self.background_v * dt_int / self.dx
        if c > wavesim.CFL_LIMIT + 1e-12:
            raise ValueError(
                f"CFL violated at internal step: v*dt/h = {c:.4f} > {wavesim.CFL_LIMIT:.4f}")


def velocity_field(spec):
    """Ground-truth speed grid: background with cosine-tapered circular
    inclusions (2-cell-wide edge)."""
    ii, jj = np.meshgrid(np.arange(spec.ny), np.arange(spec.nx), indexing="ij")
    xx = jj * spec.dx
    yy = ii * spec.dx
    v = np.full((spec.ny, spec.nx), spec.background_v, dtype=np.float64)
    for cx, cy, rad, factor in spec.inclusions:
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        ramp = np.clip((r - (rad - spec.dx)) / (2.0 * spec.dx), 0.0, 1.0)
        blend = 0.5 * (1.0 - np.cos(np.pi * ramp))   # 0 inside, 1 outside
        v *= factor + (1.0 - factor) * blend
    return v


def inclusion_mask(spec):
    """Boolean mask of cells inside any inclusion disk (the IoU truth)."""
    ii, jj = np.meshgrid(np.arange(spec.ny), np.arange(spec.nx), indexing="ij")
    xx = jj * spec.dx
    yy = ii * spec.dx
    m = np.zeros((spec.ny, spec.nx), dtype=bool)
    for cx, cy, rad, _ in spec.inclusions:
        m |= (xx - cx) ** 2 + (yy - cy) ** 2 <= rad ** 2
    return m


def synthesize(spec):
    """Generate a synthetic wavefield dataset and its ground-truth speed
    field. Deterministic for a fixed spec (seed included)."""
    spec.validate()
    v = velocity_field(spec)
    r = spec.time_refine
    nt_int = (spec.nt - 1) * r + 1
    grid = wavesim.Grid2D(nx=spec.nx, ny=spec.ny, h=spec.dx, dt=spec.dt / r, nt=nt_int)

    t_int = np.arange(nt_int) * (spec.dt / r)
    s = spec.source.waveform(t_int)
    zeros_x = np.zeros((nt_int, spec.nx))
    zeros_y = np.zeros((nt_int, spec.ny))
    edges = {"top": zeros_x.copy(), "bottom": zeros_x.copy(),
             "left": zeros_y.copy(), "right": zeros_y.copy()}
    if spec.source.edge not in edges:
        raise ValueError(f"unknown source edge {spec.source.edge!r}")
    edges[spec.source.edge][:] = s[:, None]
    bc = wavesim.BoundaryRings(edges["top"], edges["bottom"], edges["left"], edges["right"])

    ic = (np.zeros((spec.ny, spec.nx)), np.zeros((spec.ny, spec.nx)))
    frames = wavesim.simulate_stream(ic, bc, v, grid, keep_every=r)

    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)

    ds = WavefieldDataset(
        values=frames.astype(np.float32),
        dx=spec.dx, dt=spec.dt, origin=(0.0, 0.0, 0.0),
        metadata={
            "generator": "hiddenwave.synthesize",
            "background_v": spec.background_v,
            "inclusions": [list(i) for i in spec.inclusions],
            "source": {"frequency": spec.source.frequency, "tau": spec.source.tau,
                       "delay": spec.source.delay, "edge": spec.source.edge},
            "noise_std": spec.noise_std,
            "seed": spec.seed,
            "time_refine": spec.time_refine,
        },
    )
    return ds, wavesim.VelocityGrid.from_values(v)
