"""Scalar objectives for reconstruction and registration, with analytic
gradients exposed alongside each value.

All reductions accumulate in float64. SSIM uses Gaussian-windowed local
statistics (11x11 in 2-D, 7^3 in 3-D, sigma 1.5) computed with zero-padded
separable correlations, whose adjoint is the same correlation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import SE3Pose
from .volumes import Volume, resample_rigid


@dataclass(frozen=True)
class LossWeights:
    """lambda1 scales SSIM, lambda2 scales TV, lambda_geo the pose term."""

    lambda1: float = 0.2
    lambda2: float = 0.05
    lambda_geo: float = 0.02

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda_geo < 0:
            raise ValueError("loss weights must be non-negative")


def _as_array(x):
    if isinstance(x, Volume):
        return x.data
    data = getattr(x, "data", None)
    return np.asarray(data if data is not None else x, dtype=float)


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------

def l1_loss(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch in l1_loss")
    return float(np.mean(np.abs(a - b)))


def l1_loss_grad(a, b):
    """(value, d/da). d/db is the negation."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch in l1_loss")
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

_K1 = 0.01
_K2 = 0.03


def _gauss_kernel(size, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_for(a):
    size = 11 if a.ndim == 2 else 7
    size = min(size, *a.shape)
    if size % 2 == 0:
        size -= 1
    return _gauss_kernel(max(size, 1))


def _blur(x, k):
    out = x
    for ax in range(x.ndim):
        out = correlate1d(out, k, axis=ax, mode="constant", cval=0.0)
    return out


def ssim(a, b):
    """Mean local SSIM in [-1, 1]; dispatches 2-D / 3-D windows on ndim."""
    return _ssim_core(a, b, want_grads=False)[0]


def ssim_with_grads(a, b):
    """(value, d/da, d/db), including the dynamic-range dependence."""
    return _ssim_core(a, b, want_grads=True)


def _ssim_core(a, b, want_grads):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch in ssim")
    k = _window_for(a)
    amax, bmax = float(a.max()), float(b.max())
    L = max(amax, bmax, 1e-6)
    C1 = (_K1 * L) ** 2
    C2 = (_K2 * L) ** 2
    mu1, mu2 = _blur(a, k), _blur(b, k)
    p11, p22, p12 = _blur(a * a, k), _blur(b * b, k), _blur(a * b, k)
    s1 = p11 - mu1 * mu1
    s2 = p22 - mu2 * mu2
    s12 = p12 - mu1 * mu2
    A = 2 * mu1 * mu2 + C1
    B = 2 * s12 + C2
    C = mu1 * mu1 + mu2 * mu2 + C1
    D = s1 + s2 + C2
    cd = C * D
    ssim_map = (A * B) / cd
    val = float(ssim_map.mean())
    if not want_grads:
        return (val,)

    M = ssim_map.size
    gmap = 1.0 / M
    # partials of the map in its local statistics
    dA = gmap * B / cd
    dB = gmap * A / cd
    dC = -gmap * ssim_map / C
    dD = -gmap * ssim_map / D
    # s1 = p11 - mu1^2 and s12 = p12 - mu1 mu2 route extra mu terms through dD, dB
    dmu1 = 2 * mu2 * dA + 2 * mu1 * dC + (-2 * mu1) * dD + (-mu2) * (2 * dB)
    dmu2 = 2 * mu1 * dA + 2 * mu2 * dC + (-2 * mu2) * dD + (-mu1) * (2 * dB)
    dp11 = dD
    dp22 = dD
    dp12 = 2 * dB
    ga = _blur(dmu1, k) + 2 * a * _blur(dp11, k) + b * _blur(dp12, k)
    gb = _blur(dmu2, k) + 2 * b * _blur(dp22, k) + a * _blur(dp12, k)
    # dynamic range contribution through C1 = (k1 L)^2, C2 = (k2 L)^2
    if L > 1e-6:
        dv_dC1 = float(np.sum(dA + dC))
        dv_dC2 = float(np.sum(dB + dD))
        dv_dL = dv_dC1 * 2 * _K1 ** 2 * L + dv_dC2 * 2 * _K2 ** 2 * L
        if amax > bmax:
            ga.flat[int(np.argmax(a))] += dv_dL
        elif bmax > amax:
            gb.flat[int(np.argmax(b))] += dv_dL
        else:
            ga.flat[int(np.argmax(a))] += dv_dL
    return val, ga, gb


# ---------------------------------------------------------------------------
# Total variation (3-D, anisotropic L1)
# ---------------------------------------------------------------------------

def tv3d(v):
    v = _as_array(v)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("tv3d needs a 3-D volume with dims >= 2 per axis")
    total = 0.0
    count = 0
    for ax in range(3):
        d = np.diff(v, axis=ax)
        total += float(np.abs(d).sum())
        count += d.size
    return total / count


def tv3d_grad(v):
    """(value, d/dv) with sign(0) = 0 subgradient."""
    v = _as_array(v)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("tv3d needs a 3-D volume with dims >= 2 per axis")
    count = sum(np.diff(v, axis=ax).size for ax in range(3))
    g = np.zeros_like(v)
    total = 0.0
    for ax in range(3):
        d = np.diff(v, axis=ax)
        total += float(np.abs(d).sum())
        s = np.sign(d) / count
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(None, -1)
        g[tuple(sl_hi)] += s
        g[tuple(sl_lo)] -= s
    return total / count, g


# ---------------------------------------------------------------------------
# 3-D normalized cross-correlation
# ---------------------------------------------------------------------------

def ncc3d_loss(a, b):
    return _ncc_core(a, b, want_grads=False)[0]


def ncc3d_loss_with_grads(a, b):
    """(value, d/da, d/db)."""
    return _ncc_core(a, b, want_grads=True)


def _ncc_core(a, b, want_grads):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch in ncc3d_loss")
    ac = a - a.mean(dtype=float)
    bc = b - b.mean(dtype=float)
    saa = float(np.sum(ac * ac, dtype=float))
    sbb = float(np.sum(bc * bc, dtype=float))
    if saa <= 0.0 or sbb <= 0.0:
        warnings.warn("zero-variance input to ncc3d_loss; loss defined as 1.0")
        if want_grads:
            return 1.0, np.zeros_like(a), np.zeros_like(b)
        return (1.0,)
    sab = float(np.sum(ac * bc, dtype=float))
    denom = math.sqrt(saa * sbb)
    r = sab / denom
    if not want_grads:
        return (1.0 - r,)
    ga = -(bc - (sab / saa) * ac) / denom
    gb = -(ac - (sab / sbb) * bc) / denom
    return 1.0 - r, ga, gb


# ---------------------------------------------------------------------------
# Geodesic pose distance
# ---------------------------------------------------------------------------

def geodesic_loss(pose_gt: SE3Pose, pose_hat: SE3Pose, trans_weight=0.01):
    """Rotation angle (rad) + trans_weight * translation offset (mm)."""
    return _geodesic_core(pose_gt, pose_hat, trans_weight, want_grads=False)[0]


def geodesic_loss_with_grads(pose_gt: SE3Pose, pose_hat: SE3Pose, trans_weight=0.01):
    """(value, d/dR_hat (3x3), d/dt_hat (3,))."""
    return _geodesic_core(pose_gt, pose_hat, trans_weight, want_grads=True)


def _geodesic_core(pose_gt, pose_hat, trans_weight, want_grads):
    Rg = pose_gt.rotation_matrix()
    Rh = pose_hat.rotation_matrix()
    x = (np.trace(Rg.T @ Rh) - 1.0) / 2.0
    xc = min(1.0, max(-1.0, x))
    d_rot = math.acos(xc)
    dt = pose_gt.trans - pose_hat.trans
    d_trans = float(np.linalg.norm(dt))
    val = d_rot + trans_weight * d_trans
    if not want_grads:
        return (val,)
    if abs(xc) < 1.0 - 1e-12:
        dR = (-1.0 / math.sqrt(1.0 - xc * xc)) * 0.5 * Rg
    else:
        dR = np.zeros((3, 3))
    g_t = trans_weight * (-dt / d_trans) if d_trans > 0 else np.zeros(3)
    return val, dR, g_t


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------

def recon_loss(pred_ap, pred_la, meas_ap, meas_la, vol_pred, weights: LossWeights):
    """Mean over views of [L1 + lambda1*(1 - SSIM)] + lambda2 * TV(volume).

    Returns (value, parts) with parts keyed l1_ap, l1_la, ssim_ap, ssim_la, tv.
    """
    parts = {
        "l1_ap": l1_loss(pred_ap, meas_ap),
        "l1_la": l1_loss(pred_la, meas_la),
        "ssim_ap": ssim(pred_ap, meas_ap),
        "ssim_la": ssim(pred_la, meas_la),
        "tv": tv3d(vol_pred),
    }
    view_term = 0.5 * (parts["l1_ap"] + weights.lambda1 * (1.0 - parts["ssim_ap"])
                       + parts["l1_la"] + weights.lambda1 * (1.0 - parts["ssim_la"]))
    total = view_term + weights.lambda2 * parts["tv"]
    return total, parts


def reg_loss(v_ct: Volume, t_hat: SE3Pose, v_rec: Volume,
             t_gt: SE3Pose | None, weights: LossWeights):
    """NCC + (1 - SSIM) between the moved CT and the reconstruction, plus the
    geodesic pose term when a reference pose is supplied.

    Returns (value, parts).
    """
    moved = resample_rigid(v_ct, t_hat, v_rec.grid)
    parts = {
        "ncc": ncc3d_loss(moved, v_rec),
        "ssim3d": ssim(moved.data, v_rec.data),
    }
    total = parts["ncc"] + (1.0 - parts["ssim3d"])
    if t_gt is not None:
        parts["geodesic"] = geodesic_loss(t_gt, t_hat)
        total += weights.lambda_geo * parts["geodesic"]
    return total, parts
