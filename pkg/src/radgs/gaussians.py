"""Radiative 3-D Gaussian sets: density field, exact X-ray line integrals,
tile-culled rasterization, and density voxelization, all with analytic
gradients.

Each Gaussian carries a non-negative density ``rho``, a center ``pos`` (mm),
a unit quaternion ``quat``, and per-axis ``log_scale`` so its covariance is
``Sigma = R diag(exp(2*log_scale)) R^T``. A ray ``o + t d`` picks up the
closed-form infinite-line integral

    rho * sqrt(2*pi/a) * exp(-(c - b^2/a)/2),
    a = d^T S d,  b = d^T S m,  c = m^T S m,  m = o - pos,  S = Sigma^-1.

``c - b^2/a`` is the squared Mahalanobis distance of the line from the
center, which doubles as the culling test: pairs beyond ``tau`` are skipped.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import CArmView, SE3Pose, quat_multiply
from .images import ProjImage
from .volumes import GridSpec, Volume

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# pixel x gaussian pair budget per vectorized chunk (memory control)
_FWD_PAIR_BUDGET = 1_300_000
_BWD_PAIR_BUDGET = 400_000


@dataclass(eq=False)
class GaussianSet:
    """Arrays of (rho, pos, quat, log_scale); quaternions renormalized on build."""

    rho: np.ndarray
    pos: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).reshape(-1)
        n = self.rho.size
        self.pos = np.asarray(self.pos, dtype=float).reshape(n, 3)
        self.quat = np.asarray(self.quat, dtype=float).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(n, 3)
        if np.any(self.rho < 0):
            raise ValueError("negative density")
        for arr in (self.rho, self.pos, self.quat, self.log_scale):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite Gaussian parameters")
        norms = np.linalg.norm(self.quat, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero quaternion")
        self.quat = self.quat / norms[:, None]

    @property
    def count(self):
        return self.rho.size

    @staticmethod
    def empty():
        return GaussianSet(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))

    def rotation_matrices(self):
        return _quat_to_matrices(self.quat)

    def covariances(self):
        R = self.rotation_matrices()
        d2 = np.exp(2.0 * self.log_scale)
        return np.einsum("nik,nk,njk->nij", R, d2, R)

    def copy(self):
        return GaussianSet(self.rho.copy(), self.pos.copy(),
                           self.quat.copy(), self.log_scale.copy())


def transform_set(gs: GaussianSet, pose: SE3Pose) -> GaussianSet:
    """Move every Gaussian rigidly: centers by the pose, orientations by its rotation."""
    new_pos = pose.apply(gs.pos)
    new_quat = np.array([quat_multiply(pose.quat, q) for q in gs.quat]) \
        if gs.count else gs.quat.copy()
    return GaussianSet(gs.rho.copy(), new_pos, new_quat, gs.log_scale.copy())


def _quat_to_matrices(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _quat_matrix_derivatives(q):
    """dR/dq for unit quaternions, shape (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dR = np.empty((q.shape[0], 4, 3, 3))
    dR[:, 0] = 2 * np.stack([
        np.stack([o, -z, y], -1),
        np.stack([z, o, -x], -1),
        np.stack([-y, x, o], -1)], -2)
    dR[:, 1] = 2 * np.stack([
        np.stack([o, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    dR[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, o, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    dR[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, o], -1)], -2)
    return dR


def _zero_grads(n):
    return {"rho": np.zeros(n), "pos": np.zeros((n, 3)),
            "quat": np.zeros((n, 4)), "log_scale": np.zeros((n, 3))}


class _Frame:
    """Per-set precomputation shared by forward and backward passes."""

    def __init__(self, gs: GaussianSet):
        self.gs = gs
        self.R = gs.rotation_matrices()
        self.e = np.exp(-gs.log_scale)  # 1/axis scale
        self._dR = None

    @property
    def dR(self):
        if self._dR is None:
            self._dR = _quat_matrix_derivatives(self.gs.quat)
        return self._dR


def _pair_terms(frame, origins, dirs, idx):
    """Per-(pixel, gaussian) quantities for closed-form line integrals.

    idx selects a Gaussian subset; returns dict of (P, K, ...) arrays.
    """
    R = frame.R[idx]
    e = frame.e[idx]
    pos = frame.gs.pos[idx]
    rho = frame.gs.rho[idx]
    m = origins[:, None, :] - pos[None, :, :]               # (P,K,3)
    pd = np.einsum("kij,pi->pkj", R, dirs)                  # R^T d
    pm = np.einsum("kij,pki->pkj", R, m)                    # R^T m
    u = e[None, :, :] * pd
    w = e[None, :, :] * pm
    a = np.einsum("pkj,pkj->pk", u, u)
    b = np.einsum("pkj,pkj->pk", u, w)
    c = np.einsum("pkj,pkj->pk", w, w)
    dm2 = np.maximum(c - b * b / a, 0.0)
    fe = np.sqrt(2.0 * math.pi / a) * np.exp(-0.5 * dm2)
    return {"m": m, "u": u, "w": w, "a": a, "b": b, "dm2": dm2,
            "fe": fe, "val": rho[None, :] * fe, "e": e, "rho": rho}


def _mask(dm2, tau):
    if tau is None or not np.isfinite(tau):
        return None
    return dm2 <= tau * tau


def _forward_chunk(frame, origins, dirs, tau, idx):
    t = _pair_terms(frame, origins, dirs, idx)
    val = t["val"]
    keep = _mask(t["dm2"], tau)
    if keep is not None:
        val = np.where(keep, val, 0.0)
    return val.sum(axis=1)


def _backward_chunk(frame, origins, dirs, tau, idx, weights, grads):
    """Accumulate d(sum_p weights_p * pixel_p)/d params into ``grads``."""
    t = _pair_terms(frame, origins, dirs, idx)
    gI = np.repeat(weights[:, None], idx.size, axis=1)
    keep = _mask(t["dm2"], tau)
    if keep is not None:
        gI = np.where(keep, gI, 0.0)
    a, b = t["a"], t["b"]
    u, w, m, e = t["u"], t["w"], t["m"], t["e"]
    I = t["val"]
    gII = gI * I
    alpha = -0.5 / a - 0.5 * b * b / (a * a)
    beta = b / a

    np.add.at(grads["rho"], idx, (gI * t["fe"]).sum(axis=0))

    # position: dI/dpos = I * R (e*(w - (b/a) u))
    core = e[None, :, :] * (w - beta[:, :, None] * u)
    dpos = np.einsum("pk,kij,pkj->ki", gII, frame.R[idx], core)
    np.add.at(grads["pos"], idx, dpos)

    # log scales: dI/ds_k = -2 I (alpha u^2 + beta u w - w^2/2)
    ds = -2.0 * np.einsum("pk,pkj->kj",
                          gII,
                          alpha[:, :, None] * u * u
                          + beta[:, :, None] * u * w - 0.5 * w * w)
    np.add.at(grads["log_scale"], idx, ds)

    # quaternion via the rotated-frame coordinates pd = R^T d, pm = R^T m
    gpd = gII[:, :, None] * e[None, :, :] * (2 * alpha[:, :, None] * u + beta[:, :, None] * w)
    gpm = gII[:, :, None] * e[None, :, :] * (beta[:, :, None] * u - w)
    T = np.einsum("pkj,pi->kij", gpd, dirs) + np.einsum("pkj,pki->kij", gpm, m)
    dq = np.einsum("kij,kqij->kq", T, frame.dR[idx])
    # chain through quaternion normalization at the unit sphere
    qn = frame.gs.quat[idx]
    dq = dq - qn * np.einsum("kq,kq->k", qn, dq)[:, None]
    np.add.at(grads["quat"], idx, dq)


# ---------------------------------------------------------------------------
# Density field and single-ray integrals
# ---------------------------------------------------------------------------

def density_at(gs: GaussianSet, pts, tau=3.0):
    """Sum of Gaussian densities at world points (..., 3).

    Gaussians farther than ``tau`` in Mahalanobis distance are skipped;
    pass ``tau=None`` for the exact untruncated field.
    """
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 3)
    out = np.zeros(flat.shape[0])
    if gs.count == 0:
        return out.reshape(pts.shape[:-1])
    frame = _Frame(gs)
    chunk = max(1, _FWD_PAIR_BUDGET // gs.count)
    for s in range(0, flat.shape[0], chunk):
        block = flat[s:s + chunk]
        m = block[:, None, :] - gs.pos[None, :, :]
        pm = np.einsum("kij,pki->pkj", frame.R, m)
        w = frame.e[None, :, :] * pm
        c = np.einsum("pkj,pkj->pk", w, w)
        val = gs.rho[None, :] * np.exp(-0.5 * c)
        keep = _mask(c, tau)
        if keep is not None:
            val = np.where(keep, val, 0.0)
        out[s:s + chunk] = val.sum(axis=1)
    return out.reshape(pts.shape[:-1])


def _check_unit(direction):
    d = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    return d


def ray_integral(gs: GaussianSet, origin, direction, tau=None):
    """Exact infinite-line integral of the density field along one ray."""
    d = _check_unit(direction)
    if gs.count == 0:
        return 0.0
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    return float(_forward_chunk(_Frame(gs), o, d[None, :], tau, np.arange(gs.count))[0])


def ray_integral_gradients(gs: GaussianSet, origin, direction, tau=None):
    """Analytic d(ray_integral)/d(rho, pos, quat, log_scale)."""
    d = _check_unit(direction)
    grads = _zero_grads(gs.count)
    if gs.count == 0:
        return grads
    o = np.asarray(origin, dtype=float).reshape(1, 3)
    _backward_chunk(_Frame(gs), o, d[None, :], tau, np.arange(gs.count),
                    np.ones(1), grads)
    return grads


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def _tile_ranges(gs: GaussianSet, view: CArmView, tau, tile):
    """Conservative per-Gaussian tile index ranges from projected bounds.

    Projects the corners of each Gaussian's tau-ellipsoid bounding box; any
    Gaussian whose box reaches behind the source is assigned to all tiles.
    """
    n = gs.count
    ntx = (view.width + tile - 1) // tile
    nty = (view.height + tile - 1) // tile
    if tau is None or not np.isfinite(tau):
        full = np.zeros((n, 4), dtype=int)
        full[:, 1] = ntx
        full[:, 3] = nty
        return full, ntx, nty
    R = gs.rotation_matrices()
    half = tau * np.exp(gs.log_scale)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    corners = gs.pos[:, None, :] + np.einsum("nij,cj,nj->nci", R, signs, half)
    u, v, depth = view.project_points(corners.reshape(-1, 3))
    u = u.reshape(n, 8)
    v = v.reshape(n, 8)
    depth = depth.reshape(n, 8)
    bad = np.any(depth <= 1e-6, axis=1)
    margin = 1.0
    umin = np.floor(u.min(axis=1) - margin)
    umax = np.ceil(u.max(axis=1) + margin)
    vmin = np.floor(v.min(axis=1) - margin)
    vmax = np.ceil(v.max(axis=1) + margin)
    rng = np.zeros((n, 4), dtype=int)
    rng[:, 0] = np.clip(umin // tile, 0, ntx).astype(int)
    rng[:, 1] = np.clip(umax // tile + 1, 0, ntx).astype(int)
    rng[:, 2] = np.clip(vmin // tile, 0, nty).astype(int)
    rng[:, 3] = np.clip(vmax // tile + 1, 0, nty).astype(int)
    rng[bad] = [0, ntx, 0, nty]
    return rng, ntx, nty


def _tile_lists(rng, ntx, nty):
    lists = [[] for _ in range(ntx * nty)]
    for k in range(rng.shape[0]):
        x0, x1, y0, y1 = rng[k]
        for ty in range(y0, y1):
            base = ty * ntx
            for tx in range(x0, x1):
                lists[base + tx].append(k)
    return [np.asarray(l, dtype=int) for l in lists]


def _iter_tiles(view, tile):
    for ty in range((view.height + tile - 1) // tile):
        v0, v1 = ty * tile, min((ty + 1) * tile, view.height)
        for tx in range((view.width + tile - 1) // tile):
            u0, u1 = tx * tile, min((tx + 1) * tile, view.width)
            yield ty, tx, u0, u1, v0, v1


def rasterize(gs: GaussianSet, view: CArmView, tau=3.0, mode="tiled", tile=16) -> ProjImage:
    """Render the line-integral image of a Gaussian set.

    mode="brute" evaluates every (pixel, Gaussian) pair; mode="tiled" culls
    per 16x16 pixel tile using projected tau-ellipse bounds. Both apply the
    same per-pair Mahalanobis cut at ``tau`` (None disables culling).
    """
    img = np.zeros((view.height, view.width))
    if gs.count == 0:
        return ProjImage(img, view.pixel_pitch)
    frame = _Frame(gs)
    if mode == "brute":
        origins, dirs = view.all_pixel_rays()
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        flat = img.reshape(-1)
        idx = np.arange(gs.count)
        chunk = max(1, _FWD_PAIR_BUDGET // gs.count)
        for s in range(0, o.shape[0], chunk):
            flat[s:s + chunk] = _forward_chunk(frame, o[s:s + chunk], d[s:s + chunk], tau, idx)
    elif mode == "tiled":
        rng, ntx, nty = _tile_ranges(gs, view, tau, tile)
        lists = _tile_lists(rng, ntx, nty)
        for ty, tx, u0, u1, v0, v1 in _iter_tiles(view, tile):
            idx = lists[ty * ntx + tx]
            if idx.size == 0:
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
            origins, dirs = view.pixel_rays(uu, vv)
            vals = _forward_chunk(frame, origins.reshape(-1, 3), dirs.reshape(-1, 3), tau, idx)
            img[v0:v1, u0:u1] = vals.reshape(v1 - v0, u1 - u0)
    else:
        raise ValueError(f"unknown rasterize mode: {mode}")
    return ProjImage(img, view.pixel_pitch)


def rasterize_vjp(gs: GaussianSet, view: CArmView, upstream, tau=3.0, mode="tiled", tile=16):
    """Gradients of sum(upstream * rasterize(gs, view)) w.r.t. all parameters."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (view.height, view.width):
        raise ValueError("upstream image shape mismatch")
    grads = _zero_grads(gs.count)
    if gs.count == 0:
        return grads
    frame = _Frame(gs)
    if mode == "brute":
        origins, dirs = view.all_pixel_rays()
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        wflat = upstream.reshape(-1)
        idx = np.arange(gs.count)
        chunk = max(1, _BWD_PAIR_BUDGET // gs.count)
        for s in range(0, o.shape[0], chunk):
            _backward_chunk(frame, o[s:s + chunk], d[s:s + chunk], tau, idx,
                            wflat[s:s + chunk], grads)
    elif mode == "tiled":
        rng, ntx, nty = _tile_ranges(gs, view, tau, tile)
        lists = _tile_lists(rng, ntx, nty)
        for ty, tx, u0, u1, v0, v1 in _iter_tiles(view, tile):
            idx = lists[ty * ntx + tx]
            if idx.size == 0:
                continue
            w = upstream[v0:v1, u0:u1].reshape(-1)
            if not np.any(w):
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
            origins, dirs = view.pixel_rays(uu, vv)
            _backward_chunk(frame, origins.reshape(-1, 3), dirs.reshape(-1, 3),
                            tau, idx, w, grads)
    else:
        raise ValueError(f"unknown rasterize mode: {mode}")
    return grads


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

def _voxel_box(gs, k, grid, tau):
    """Index slices covering Gaussian k's tau-ellipsoid AABB (None if empty)."""
    if tau is None or not np.isfinite(tau):
        return tuple(slice(0, d) for d in grid.dims)
    cov_diag = np.einsum("ij,j->i", gs.rotation_matrices()[k] ** 2,
                         np.exp(2.0 * gs.log_scale[k]))
    half = tau * np.sqrt(cov_diag)
    lo = np.ceil((gs.pos[k] - half - grid.origin) / grid.spacing).astype(int)
    hi = np.floor((gs.pos[k] + half - grid.origin) / grid.spacing).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(grid.dims) - 1)
    if np.any(hi < lo):
        return None
    return tuple(slice(int(l), int(h) + 1) for l, h in zip(lo, hi))


def _box_points(grid, box):
    axes = [grid.origin[a] + grid.spacing[a] * np.arange(box[a].start, box[a].stop)
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def voxelize(gs: GaussianSet, grid: GridSpec, tau=3.0) -> Volume:
    """Evaluate the density field at voxel centers (truncated at ``tau``)."""
    grid = grid.grid if isinstance(grid, Volume) else grid
    data = np.zeros(grid.dims)
    if gs.count == 0:
        return Volume(data, grid.spacing, grid.origin)
    frame = _Frame(gs)
    tau2 = None if (tau is None or not np.isfinite(tau)) else tau * tau
    for k in range(gs.count):
        box = _voxel_box(gs, k, grid, tau)
        if box is None:
            continue
        pts = _box_points(grid, box)
        m = pts - gs.pos[k]
        w = frame.e[k] * (m @ frame.R[k])
        c = np.einsum("...j,...j->...", w, w)
        val = gs.rho[k] * np.exp(-0.5 * c)
        if tau2 is not None:
            val = np.where(c <= tau2, val, 0.0)
        data[box] += val
    return Volume(data, grid.spacing, grid.origin)


def voxelize_vjp(gs: GaussianSet, grid: GridSpec, upstream, tau=3.0):
    """Gradients of sum(upstream * voxelize(gs, grid)) w.r.t. all parameters."""
    grid = grid.grid if isinstance(grid, Volume) else grid
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != tuple(grid.dims):
        raise ValueError("upstream volume shape mismatch")
    grads = _zero_grads(gs.count)
    if gs.count == 0:
        return grads
    frame = _Frame(gs)
    tau2 = None if (tau is None or not np.isfinite(tau)) else tau * tau
    for k in range(gs.count):
        box = _voxel_box(gs, k, grid, tau)
        if box is None:
            continue
        pts = _box_points(grid, box).reshape(-1, 3)
        uw = upstream[box].reshape(-1)
        m = pts - gs.pos[k]
        pm = m @ frame.R[k]
        w = frame.e[k] * pm
        c = np.einsum("pj,pj->p", w, w)
        I = gs.rho[k] * np.exp(-0.5 * c)
        g = uw * I
        if tau2 is not None:
            g = np.where(c <= tau2, g, 0.0)
            fe = np.where(c <= tau2, np.exp(-0.5 * c), 0.0)
        else:
            fe = np.exp(-0.5 * c)
        grads["rho"][k] = float(np.dot(uw, fe))
        grads["pos"][k] = frame.R[k] @ (frame.e[k] * (g[:, None] * w).sum(axis=0))
        grads["log_scale"][k] = (g[:, None] * w * w).sum(axis=0)
        T = -np.einsum("p,pi,pj->ij", g, m, frame.e[k] * w)
        dq = np.einsum("ij,qij->q", T, frame.dR[k])
        qn = gs.quat[k]
        grads["quat"][k] = dq - qn * float(np.dot(qn, dq))
    return grads


# ---------------------------------------------------------------------------
# File I/O: JSON header + raw records of 11 f32
# ---------------------------------------------------------------------------

_RECORD_FLOATS = 11


def _paths(path):
    base, ext = os.path.splitext(path)
    if ext not in (".json", ".raw", ""):
        base = path
    return base + ".json", base + ".raw"


def write_gaussians(gs: GaussianSet, path):
    hdr_path, raw_path = _paths(path)
    with open(hdr_path, "w") as fh:
        json.dump({"count": int(gs.count), "dtype": "f32le"}, fh)
    rec = np.concatenate([gs.rho[:, None], gs.pos, gs.quat, gs.log_scale], axis=1)
    rec.astype("<f4").tofile(raw_path)


def read_gaussians(path) -> GaussianSet:
    hdr_path, raw_path = _paths(path)
    if not os.path.exists(hdr_path):
        raise IOError(f"missing header file: {hdr_path}")
    with open(hdr_path) as fh:
        header = json.load(fh)
    for key in ("count", "dtype"):
        if key not in header:
            raise IOError(f"gaussian header missing field '{key}'")
    n = int(header["count"])
    raw = np.fromfile(raw_path, dtype="<f4") if os.path.exists(raw_path) else None
    if raw is None:
        raise IOError(f"missing data file: {raw_path}")
    if raw.size != n * _RECORD_FLOATS:
        raise IOError(f"record count mismatch: field 'count' implies "
                      f"{n * _RECORD_FLOATS} floats, file has {raw.size}")
    rec = raw.reshape(n, _RECORD_FLOATS).astype(float)
    if np.any(rec[:, 0] < 0):
        raise IOError("field 'rho' contains negative densities")
    return GaussianSet(rec[:, 0], rec[:, 1:4], rec[:, 4:8], rec[:, 8:11])
