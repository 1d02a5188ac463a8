"""Scalar volume container, trilinear sampling, rigid resampling, and file I/O.

Data layout: ``data[ix, iy, iz]`` with ``origin`` at the center of voxel
(0,0,0). On disk volumes are a JSON header plus little-endian f32 raw data,
x-fastest. Sampling outside the grid returns 0 (zero padding), so rigid
motion smoothly carries content out of view instead of clamping.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3Pose


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned sampling grid: dims in voxels, spacing/origin in mm."""

    dims: tuple
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = np.array(self.spacing, dtype=float).reshape(3)
        origin = np.array(self.origin, dtype=float).reshape(3)
        if any(d <= 0 for d in dims):
            raise ValueError("dims must be positive")
        if np.any(spacing <= 0):
            raise ValueError("spacing must be positive")
        spacing.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @staticmethod
    def centered(dims, spacing):
        """Grid whose center of mass sits at the world origin."""
        dims = tuple(int(d) for d in dims)
        spacing = np.array(spacing, dtype=float).reshape(3) if np.ndim(spacing) else np.full(3, float(spacing))
        origin = -0.5 * spacing * (np.array(dims) - 1)
        return GridSpec(dims, spacing, origin)

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))


@dataclass(eq=False)
class Volume:
    """Scalar grid with values stored as float64 in memory, f32 on disk."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-D")
        self.spacing = np.array(self.spacing, dtype=float).reshape(3)
        self.origin = np.array(self.origin, dtype=float).reshape(3)
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains non-finite values")

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def mass(self):
        return float(self.data.sum(dtype=float) * self.voxel_volume)

    @staticmethod
    def zeros(grid: GridSpec):
        return Volume(np.zeros(grid.dims), grid.spacing, grid.origin)

    def centroid(self):
        """Intensity-weighted centroid in world mm (grid center if empty)."""
        w = np.abs(self.data)
        total = w.sum(dtype=float)
        center = self.origin + 0.5 * self.spacing * (np.array(self.dims) - 1)
        if total <= 0:
            return center
        idx = [w.sum(axis=tuple(a for a in range(3) if a != ax), dtype=float) for ax in range(3)]
        pos = np.array([
            np.dot(idx[ax], self.origin[ax] + self.spacing[ax] * np.arange(self.dims[ax])) / total
            for ax in range(3)
        ])
        return pos


def _gather(data, ix, iy, iz):
    """data[ix,iy,iz] with zero outside the index range."""
    nx, ny, nz = data.shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    vals = data[np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)]
    return np.where(inside, vals, 0.0)


def sample_trilinear(vol: Volume, pts):
    """Trilinear interpolation at world points (..., 3); zero outside the grid."""
    return _trilinear(vol, pts, want_gradient=False)


def sample_trilinear_with_gradient(vol: Volume, pts):
    """Values and spatial gradients (d value / d world mm) at world points."""
    return _trilinear(vol, pts, want_gradient=True)


def _trilinear(vol, pts, want_gradient):
    pts = np.asarray(pts, dtype=float)
    rel = (pts - vol.origin) / vol.spacing
    i0 = np.floor(rel).astype(np.int64)
    f = rel - i0
    vals = np.zeros(pts.shape[:-1])
    grad = np.zeros(pts.shape) if want_gradient else None
    wx = (1.0 - f[..., 0], f[..., 0])
    wy = (1.0 - f[..., 1], f[..., 1])
    wz = (1.0 - f[..., 2], f[..., 2])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = _gather(vol.data, i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz)
                vals += c * wx[dx] * wy[dy] * wz[dz]
                if want_gradient:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    grad[..., 0] += c * sx * wy[dy] * wz[dz]
                    grad[..., 1] += c * wx[dx] * sy * wz[dz]
                    grad[..., 2] += c * wx[dx] * wy[dy] * sz
    if want_gradient:
        grad /= vol.spacing
        return vals, grad
    return vals


def resample_rigid(vol: Volume, pose: SE3Pose, grid) -> Volume:
    """Volume whose voxel at world point x holds vol(pose^-1 x).

    ``grid`` is a GridSpec or a Volume used as the grid template.
    """
    grid = grid.grid if isinstance(grid, Volume) else grid
    pts = grid.voxel_centers()
    inv = pose.inverse()
    out = sample_trilinear(vol, inv.apply(pts.reshape(-1, 3))).reshape(grid.dims)
    return Volume(out, grid.spacing, grid.origin)


def resample_rigid_vjp(vol: Volume, pose: SE3Pose, grid, upstream):
    """Gradients of sum(upstream * resample_rigid(vol, pose, grid)) w.r.t. pose.

    Returns (dL_dR, dL_dt) with dL_dR the 3x3 gradient w.r.t. the rotation
    matrix entries and dL_dt the gradient w.r.t. the translation (mm).
    """
    grid = grid.grid if isinstance(grid, Volume) else grid
    pts = grid.voxel_centers().reshape(-1, 3)
    w = np.asarray(upstream, dtype=float).reshape(-1)
    R = pose.rotation_matrix()
    y = (pts - pose.trans) @ R
    _, g = sample_trilinear_with_gradient(vol, y)
    dL_dR = np.einsum("n,na,nb->ab", w, pts - pose.trans, g)
    dL_dt = -R @ (w[:, None] * g).sum(axis=0)
    return dL_dR, dL_dt


def downsample2(vol: Volume) -> Volume:
    """Factor-2 box-filter downsampling (trailing odd slices dropped)."""
    n = [d // 2 for d in vol.dims]
    if min(n) < 1:
        raise ValueError("volume too small to downsample")
    d = vol.data[:2 * n[0], :2 * n[1], :2 * n[2]]
    d = d.reshape(n[0], 2, n[1], 2, n[2], 2).mean(axis=(1, 3, 5))
    return Volume(d, vol.spacing * 2.0, vol.origin + 0.5 * vol.spacing)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _paths(path):
    base, ext = os.path.splitext(path)
    if ext not in (".json", ".raw", ""):
        base = path
    return base + ".json", base + ".raw"


def write_volume(vol: Volume, path):
    """Write <path>.json header and <path>.raw f32le x-fastest data."""
    if not np.all(np.isfinite(vol.data)):
        raise IOError("volume field 'data' contains non-finite values")
    hdr_path, raw_path = _paths(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": [float(s) for s in vol.spacing],
        "origin_mm": [float(o) for o in vol.origin],
        "dtype": "f32le",
    }
    with open(hdr_path, "w") as fh:
        json.dump(header, fh, indent=1)
    vol.data.transpose(2, 1, 0).astype("<f4").tofile(raw_path)


def read_volume(path) -> Volume:
    hdr_path, raw_path = _paths(path)
    if not os.path.exists(hdr_path):
        raise IOError(f"missing header file: {hdr_path}")
    if not os.path.exists(raw_path):
        raise IOError(f"missing data file: {raw_path}")
    with open(hdr_path) as fh:
        header = json.load(fh)
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in header:
            raise IOError(f"volume header missing field '{key}'")
    if header["dtype"] != "f32le":
        raise IOError(f"unsupported dtype in field 'dtype': {header['dtype']}")
    dims = [int(d) for d in header["dims"]]
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise IOError(f"data length mismatch: field 'dims' implies "
                      f"{dims[0] * dims[1] * dims[2]} scalars, file has {raw.size}")
    if not np.all(np.isfinite(raw)):
        raise IOError("volume field 'data' contains non-finite values")
    data = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).astype(float)
    return Volume(data, np.array(header["spacing_mm"]), np.array(header["origin_mm"]))
