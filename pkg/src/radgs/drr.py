"""Ray-marched DRR rendering over voxel volumes.

Serves two roles: synthetic biplanar data generation, and an independent
cross-check for the closed-form Gaussian rasterizer. Pixels hold raw
line-integral values (no exponential attenuation), matching the rasterizer's
output space.
"""

from __future__ import annotations

import numpy as np

from .geometry import CArmView, SE3Pose, euler_xyz_matrix, make_view, matrix_to_quat
from .images import ProjImage
from .volumes import Volume, sample_trilinear


def _clip_to_support(vol: Volume, origins, dirs):
    """Entry/exit ray parameters against the volume's interpolation support."""
    lo = vol.origin - vol.spacing
    hi = vol.origin + vol.spacing * np.array(vol.dims)
    t0 = np.full(origins.shape[0], -np.inf)
    t1 = np.full(origins.shape[0], np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origins[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - o) / d
            tb = (hi[ax] - o) / d
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = np.abs(d) < 1e-12
        inside = (o >= lo[ax]) & (o <= hi[ax])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return t0, t1


def render_drr(vol: Volume, view: CArmView) -> ProjImage:
    """Midpoint-rule line integrals with step <= min(spacing)/2."""
    origins, dirs = view.all_pixel_rays()
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    t0, t1 = _clip_to_support(vol, o, d)
    hit = t1 > t0
    img = np.zeros(o.shape[0])
    if np.any(hit):
        o, d = o[hit], d[hit]
        t0, t1 = t0[hit], t1[hit]
        step = float(np.min(vol.spacing)) / 2.0
        length = t1 - t0
        nsteps = np.maximum(np.ceil(length / step).astype(int), 1)
        dt = length / nsteps
        acc = np.zeros(o.shape[0])
        for k in range(int(nsteps.max())):
            active = k < nsteps
            tk = t0[active] + (k + 0.5) * dt[active]
            pts = o[active] + tk[:, None] * d[active]
            acc[active] += sample_trilinear(vol, pts) * dt[active]
        img[hit] = acc
    return ProjImage(img.reshape(view.height, view.width), view.pixel_pitch)


def make_biplanar(vol: Volume, perturb_deg=15.0, seed=0, sdd=1124.0, sad=700.0,
                  detector_px=(256, 256), pixel_pitch=0.8):
    """DRRs at gantry 0 (AP) and 90 degrees (LA), each with independent
    uniform per-axis rotation perturbations in [-perturb_deg, +perturb_deg].

    Returns (image_ap, image_la, view_ap, view_la); the views are the exact
    geometry used, for downstream reconstruction.
    """
    if perturb_deg < 0:
        raise ValueError("perturb_deg must be >= 0")
    rng = np.random.default_rng(seed)
    views = []
    for gantry in (0.0, 90.0):
        ang = np.deg2rad(rng.uniform(-perturb_deg, perturb_deg, size=3))
        perturb = SE3Pose(matrix_to_quat(euler_xyz_matrix(*ang)), np.zeros(3))
        views.append(make_view(gantry_deg=gantry, sdd=sdd, sad=sad,
                               detector_px=detector_px, pixel_pitch=pixel_pitch,
                               perturb=perturb))
    img_ap = render_drr(vol, views[0])
    img_la = render_drr(vol, views[1])
    return img_ap, img_la, views[0], views[1]
