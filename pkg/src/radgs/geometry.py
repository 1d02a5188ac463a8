"""Rigid SE(3) transforms, C-arm cone-beam geometry, and per-pixel ray generation.

Conventions:
- Quaternions are (w, x, y, z), unit norm.
- World origin sits at the C-arm isocenter.
- ``view_pose`` maps world -> gantry coordinates. In the gantry frame the
  source is at (0, 0, -sad), the principal axis is +z, and the detector
  plane lies at z = sdd - sad with u along +x and v along +y.
- ``compose(A, B)`` applies B first: (A o B)(x) = A(B(x)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Small-angle threshold for series branches of exp/log.
_TINY_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a, b):
    """Hamilton product a*b, both (w,x,y,z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix -> unit quaternion (w >= 0). Shepperd's method."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# SE(3) pose and twist
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform: x -> R(quat) @ x + trans. Translation in mm."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.quat)
        t = np.array(self.trans, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity():
        return SE3Pose()

    @staticmethod
    def from_matrix(R, t):
        return SE3Pose(matrix_to_quat(R), np.asarray(t, dtype=float))

    def rotation_matrix(self):
        return quat_to_matrix(self.quat)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self o other, applying ``other`` first."""
        q = quat_multiply(self.quat, other.quat)
        t = self.apply(other.trans)
        return SE3Pose(q, t)

    def inverse(self) -> "SE3Pose":
        qc = quat_conjugate(self.quat)
        Rt = quat_to_matrix(qc)
        return SE3Pose(qc, -(Rt @ self.trans))

    def apply(self, pts):
        """Apply to one point (3,) or a stack (..., 3)."""
        pts = np.asarray(pts, dtype=float)
        R = self.rotation_matrix()
        return pts @ R.T + self.trans

    def matrix4(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.trans
        return M


@dataclass(frozen=True, eq=False)
class Twist:
    """se(3) element: rotation vector ``omega`` (rad) and translation part ``v`` (mm)."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = np.array(self.omega, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "v", v)

    def as_vector(self):
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def from_vector(xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Twist(xi[:3], xi[3:])


def se3_apply(pose: SE3Pose, pts):
    return pose.apply(pts)


def _so3_V(omega):
    """Left Jacobian of SO(3): translation mixing matrix of the SE(3) exp."""
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _TINY_ANGLE:
        # second-order series in omega
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    A = (1.0 - math.cos(theta)) / theta**2
    B = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + A * K + B * (K @ K)


def _so3_V_inv(omega):
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _TINY_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    coef = (1.0 - cot) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def se3_exp(t: Twist) -> SE3Pose:
    """Exponential map se(3) -> SE(3). Rodrigues rotation plus V-matrix translation."""
    omega = t.omega
    theta = np.linalg.norm(omega)
    if theta < _TINY_ANGLE:
        q = quat_normalize(np.array([1.0, *(0.5 * omega)]))
    else:
        axis = omega / theta
        q = np.array([math.cos(0.5 * theta), *(math.sin(0.5 * theta) * axis)])
    return SE3Pose(q, _so3_V(omega) @ t.v)


def se3_log(p: SE3Pose) -> Twist:
    """Logarithm map, principal branch (rotation angle < pi)."""
    q = p.quat if p.quat[0] >= 0 else -p.quat
    vec = q[1:]
    n = np.linalg.norm(vec)
    theta = 2.0 * math.atan2(n, q[0])
    if n < _TINY_ANGLE:
        omega = 2.0 * vec
    else:
        omega = (theta / n) * vec
    return Twist(omega, _so3_V_inv(omega) @ p.trans)


# ---------------------------------------------------------------------------
# Series exponential and its derivative (pose optimization support)
# ---------------------------------------------------------------------------

def se3_generators():
    """Basis G_0..G_5 of se(3) as 4x4 matrices, ordered (omega, v)."""
    G = np.zeros((6, 4, 4))
    G[0, 1, 2], G[0, 2, 1] = -1.0, 1.0
    G[1, 0, 2], G[1, 2, 0] = 1.0, -1.0
    G[2, 0, 1], G[2, 1, 0] = -1.0, 1.0
    G[3, 0, 3] = 1.0
    G[4, 1, 3] = 1.0
    G[5, 2, 3] = 1.0
    return G


def se3_exp_series(xi, n_terms=30):
    """exp of the 4x4 twist matrix by truncated power series.

    Convergence is governed by the rotation angle alone (the bottom row of
    the twist matrix is zero), so large translations are safe.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    A = np.einsum("i,ijk->jk", xi, se3_generators())
    M = np.eye(4)
    term = np.eye(4)
    for n in range(1, n_terms + 1):
        term = term @ A / n
        M = M + term
    return M


def se3_exp_with_jacobian(xi, n_terms=30):
    """Return (M, dM) with M = exp(hat(xi)) as 4x4 and dM[j] = dM/dxi_j.

    Term-wise differentiated power series:
      dM/dxi_j = sum_{k,l>=0} A^k G_j A^l / (k+l+1)!
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    G = se3_generators()
    A = np.einsum("i,ijk->jk", xi, G)

    # powers A^0..A^{n_terms-1} and inverse factorials
    powers = np.empty((n_terms, 4, 4))
    powers[0] = np.eye(4)
    for k in range(1, n_terms):
        powers[k] = powers[k - 1] @ A
    inv_fact = np.empty(2 * n_terms)
    inv_fact[0] = 1.0
    for n in range(1, 2 * n_terms):
        inv_fact[n] = inv_fact[n - 1] / n

    M = np.einsum("kij,k->ij", powers, inv_fact[:n_terms])

    # S_k = sum_l A^l / (k+l+1)!  then dM_j = sum_k A^k G_j S_k
    S = np.empty((n_terms, 4, 4))
    for k in range(n_terms):
        S[k] = np.einsum("lij,l->ij", powers, inv_fact[k + 1:k + 1 + n_terms])
    dM = np.einsum("kab,jbc,kcd->jad", powers, G, S)
    return M, dM


# ---------------------------------------------------------------------------
# Euler angles and pose sampling
# ---------------------------------------------------------------------------

def euler_xyz_matrix(ax, ay, az):
    """R = Rz(az) @ Ry(ay) @ Rx(ax): the x rotation is applied first."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def matrix_to_euler_xyz(R):
    """Inverse of euler_xyz_matrix away from the ay = +-pi/2 singularity."""
    ay = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        ax = math.atan2(R[2, 1], R[2, 2])
        az = math.atan2(R[1, 0], R[0, 0])
    else:
        ax = math.atan2(-R[1, 2], R[1, 1])
        az = 0.0
    return ax, ay, az


def sample_pose(rng, rot_range_deg, trans_range_mm) -> SE3Pose:
    """Uniform per-axis XYZ Euler angles and per-axis translations.

    ``rot_range_deg`` and ``trans_range_mm`` are (lo, hi) intervals applied
    to each axis independently.
    """
    rlo, rhi = float(rot_range_deg[0]), float(rot_range_deg[1])
    tlo, thi = float(trans_range_mm[0]), float(trans_range_mm[1])
    if rlo > rhi or tlo > thi:
        raise ValueError("inverted sampling interval")
    ang = np.deg2rad(rng.uniform(rlo, rhi, size=3))
    trans = rng.uniform(tlo, thi, size=3)
    R = euler_xyz_matrix(*ang)
    return SE3Pose(matrix_to_quat(R), trans)


# ---------------------------------------------------------------------------
# C-arm view
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CArmView:
    """Cone-beam acquisition geometry.

    sdd: source-to-detector distance, mm.
    sad: source-to-isocenter distance, mm.
    detector_px: (width, height) in pixels.
    pixel_pitch: mm per pixel.
    view_pose: world -> gantry transform.
    """

    sdd: float = 1124.0
    sad: float = 700.0
    detector_px: tuple = (976, 976)
    pixel_pitch: float = 0.2
    view_pose: SE3Pose = field(default_factory=SE3Pose.identity)

    def __post_init__(self):
        w, h = self.detector_px
        if not (0.0 < self.sad < self.sdd):
            raise ValueError("require 0 < sad < sdd")
        if w <= 0 or h <= 0:
            raise ValueError("detector_px must be positive")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        object.__setattr__(self, "detector_px", (int(w), int(h)))

    @property
    def width(self):
        return self.detector_px[0]

    @property
    def height(self):
        return self.detector_px[1]

    def source_position(self):
        """Source position in world coordinates."""
        return self.view_pose.inverse().apply(np.array([0.0, 0.0, -self.sad]))

    def pixel_rays(self, u, v):
        """Rays through pixel centers: (origins (...,3), unit directions (...,3)).

        u and v broadcast together; out-of-range indices raise ValueError.
        """
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any(u < 0) or np.any(u >= self.width) or np.any(v < 0) or np.any(v >= self.height):
            raise ValueError("pixel index outside detector")
        u, v = np.broadcast_arrays(u, v)
        det_x = (u - 0.5 * (self.width - 1)) * self.pixel_pitch
        det_y = (v - 0.5 * (self.height - 1)) * self.pixel_pitch
        # gantry-frame direction: source (0,0,-sad) -> detector point (x,y,sdd-sad)
        d = np.stack([det_x, det_y, np.full_like(det_x, self.sdd)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        Rinv = self.view_pose.rotation_matrix().T
        dirs = d @ Rinv.T
        origin = self.source_position()
        origins = np.broadcast_to(origin, dirs.shape)
        return origins, dirs

    def all_pixel_rays(self):
        """Rays for the full detector, shapes (h, w, 3)."""
        uu, vv = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return self.pixel_rays(uu, vv)

    def project_points(self, pts):
        """Perspective projection of world points onto the detector.

        Returns (u, v, depth) where depth is the gantry-frame distance from
        the source plane; points at depth <= 0 project behind the source.
        """
        pts = np.asarray(pts, dtype=float)
        g = self.view_pose.apply(pts)
        depth = g[..., 2] + self.sad
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = self.sdd / depth
            u = g[..., 0] * lam / self.pixel_pitch + 0.5 * (self.width - 1)
            v = g[..., 1] * lam / self.pixel_pitch + 0.5 * (self.height - 1)
        return u, v, depth

    def with_pose(self, pose: SE3Pose) -> "CArmView":
        return CArmView(self.sdd, self.sad, self.detector_px, self.pixel_pitch, pose)

    def to_dict(self):
        return {
            "sdd_mm": self.sdd,
            "sad_mm": self.sad,
            "detector_px": [self.width, self.height],
            "pixel_pitch_mm": self.pixel_pitch,
            "view_pose": {
                "quat_wxyz": [float(x) for x in self.view_pose.quat],
                "trans_mm": [float(x) for x in self.view_pose.trans],
            },
        }

    @staticmethod
    def from_dict(d):
        pose = SE3Pose(np.array(d["view_pose"]["quat_wxyz"]),
                       np.array(d["view_pose"]["trans_mm"]))
        return CArmView(float(d["sdd_mm"]), float(d["sad_mm"]),
                        tuple(d["detector_px"]), float(d["pixel_pitch_mm"]), pose)


def gantry_rotation(angle_rad) -> SE3Pose:
    """World -> gantry pose of a gantry rotated by ``angle_rad`` about world +y."""
    c, s = math.cos(-angle_rad), math.sin(-angle_rad)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return SE3Pose.from_matrix(R, np.zeros(3))


def make_view(gantry_deg=0.0, sdd=1124.0, sad=700.0, detector_px=(976, 976),
              pixel_pitch=0.2, perturb: SE3Pose | None = None) -> CArmView:
    """C-arm view at a gantry angle, optionally perturbed in the gantry frame."""
    pose = gantry_rotation(math.radians(gantry_deg))
    if perturb is not None:
        pose = perturb.compose(pose)
    return CArmView(sdd, sad, detector_px, pixel_pitch, pose)
