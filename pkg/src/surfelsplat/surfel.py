"""Surfel and camera data model plus the closed-form splat kernels.

A surfel is a planar 2D Gaussian with center ``mu``, tangent frame
``R = [t_u, t_v, t_w]`` (from a quaternion) and scales ``(s_u, s_v)``.
Its local-to-world map is the 4x4 matrix ``H`` and a pixel ray is
intersected with it in closed form through ``M = W @ H`` where ``W`` is
the camera's world-to-screen matrix.

Conventions
-----------
* quaternions are stored ``(w, x, y, z)`` and renormalized before use;
* scale is ``exp(log_scale)`` and opacity is ``sigmoid(raw_opacity)``;
* cameras are pinhole, +x right, +y down, +z forward; pixel ``(x, y)``
  refers to column ``x`` and row ``y`` with the sample at the integer
  coordinate;
* the screen matrix maps a world point to ``(x z, y z, 1, z)``, so its
  last row yields camera depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3

# intersect status codes
HIT = 0
SKIP_DEGENERATE = 1
SKIP_NEAR = 2
SKIP_CUTOFF = 3

DEGENERATE_EPS = 1e-9


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# rotations


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from raw quaternions (..., 4), normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R back to the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # Jacobian of q / |q| is (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (N, (degree+1)**2) at unit directions (N, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((dirs.shape[0], num_sh_coeffs(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (N, (degree+1)**2, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    J = np.zeros((dirs.shape[0], num_sh_coeffs(degree), 3))
    if degree >= 1:
        J[:, 1, 1] = -SH_C1
        J[:, 2, 2] = SH_C1
        J[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 4, 0] = SH_C2[0] * y
        J[:, 4, 1] = SH_C2[0] * x
        J[:, 5, 1] = SH_C2[1] * z
        J[:, 5, 2] = SH_C2[1] * y
        J[:, 6, 0] = SH_C2[2] * -2 * x
        J[:, 6, 1] = SH_C2[2] * -2 * y
        J[:, 6, 2] = SH_C2[2] * 4 * z
        J[:, 7, 0] = SH_C2[3] * z
        J[:, 7, 2] = SH_C2[3] * x
        J[:, 8, 0] = SH_C2[4] * 2 * x
        J[:, 8, 1] = SH_C2[4] * -2 * y
    if degree >= 3:
        J[:, 9, 0] = SH_C3[0] * 6 * x * y
        J[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        J[:, 10, 0] = SH_C3[1] * y * z
        J[:, 10, 1] = SH_C3[1] * x * z
        J[:, 10, 2] = SH_C3[1] * x * y
        J[:, 11, 0] = SH_C3[2] * -2 * x * y
        J[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        J[:, 11, 2] = SH_C3[2] * 8 * y * z
        J[:, 12, 0] = SH_C3[3] * -6 * x * z
        J[:, 12, 1] = SH_C3[3] * -6 * y * z
        J[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        J[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        J[:, 13, 1] = SH_C3[4] * -2 * x * y
        J[:, 13, 2] = SH_C3[4] * 8 * x * z
        J[:, 14, 0] = SH_C3[5] * 2 * x * z
        J[:, 14, 1] = SH_C3[5] * -2 * y * z
        J[:, 14, 2] = SH_C3[5] * (xx - yy)
        J[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        J[:, 15, 1] = SH_C3[6] * -6 * x * y
    return J


def sh_to_rgb(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate colors (N, 3) for coefficients (N, K, 3) using bands up to ``degree``."""
    return np.maximum(sh_raw(sh, sh_basis(dirs, degree)), 0.0)


def sh_raw(sh: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Unclamped ``sum_k basis_k * sh_k + 0.5``, accumulated band by band."""
    raw = np.full((sh.shape[0], 3), 0.5)
    for k in range(basis.shape[1]):
        raw = raw + basis[:, k, None] * sh[:, k, :]
    return raw


# ---------------------------------------------------------------------------
# data model


@dataclass
class Surfel:
    """A single surfel in raw (optimizable) parameterization."""

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    raw_opacity: float
    sh: np.ndarray
    id: int = 0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(np.asarray(self.quat, dtype=np.float64))

    @classmethod
    def create(cls, mu, quat=(1.0, 0.0, 0.0, 0.0), scale=(1.0, 1.0), opacity=0.5,
               sh=None, degree=0, id=0):
        if sh is None:
            sh = np.zeros((num_sh_coeffs(degree), 3))
        return cls(
            mu=np.asarray(mu, dtype=np.float64),
            quat=np.asarray(quat, dtype=np.float64),
            log_scale=np.log(np.asarray(scale, dtype=np.float64)),
            raw_opacity=float(logit(opacity)),
            sh=np.asarray(sh, dtype=np.float64).reshape(-1, 3),
            id=int(id),
        )


FLAG_HEG = 1
FLAG_CLONE = 2


@dataclass
class SurfelSet:
    """Structure-of-arrays container for N surfels.

    ``sh`` holds ``(max_degree+1)**2`` coefficient triples per surfel;
    ``active_degree`` selects how many bands are evaluated.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    raw_opacity: np.ndarray
    sh: np.ndarray
    ids: np.ndarray
    flags: np.ndarray = None
    parent: np.ndarray = None
    active_degree: int = 0

    PARAM_NAMES = ("mu", "quat", "log_scale", "raw_opacity", "sh")

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 2)
        self.raw_opacity = np.asarray(self.raw_opacity, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, -1, 3) if n else sh.reshape(0, sh.shape[1] if sh.ndim == 3 else 1, 3)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)
        if self.flags is None:
            self.flags = np.zeros(n, dtype=np.uint8)
        if self.parent is None:
            self.parent = np.full(n, -1, dtype=np.int64)
        self.flags = np.asarray(self.flags, dtype=np.uint8).reshape(n)
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(n)
        k = self.sh.shape[1]
        deg = int(round(math.sqrt(k))) - 1
        if (deg + 1) ** 2 != k or deg > MAX_SH_DEGREE:
            raise ValueError(f"invalid number of SH coefficients: {k}")
        self.active_degree = min(int(self.active_degree), deg)

    @classmethod
    def empty(cls, degree: int = 0) -> "SurfelSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros((0, num_sh_coeffs(degree), 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_surfels(cls, surfels: list[Surfel], active_degree: int | None = None) -> "SurfelSet":
        k = max(len(s.sh) for s in surfels)
        sh = np.zeros((len(surfels), k, 3))
        for i, s in enumerate(surfels):
            sh[i, : len(s.sh)] = s.sh
        out = cls(
            mu=np.stack([s.mu for s in surfels]),
            quat=np.stack([s.quat for s in surfels]),
            log_scale=np.stack([s.log_scale for s in surfels]),
            raw_opacity=np.array([s.raw_opacity for s in surfels]),
            sh=sh,
            ids=np.array([s.id for s in surfels]),
        )
        out.active_degree = out.max_degree if active_degree is None else active_degree
        return out

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(self.mu[i].copy(), self.quat[i].copy(), self.log_scale[i].copy(),
                      float(self.raw_opacity[i]), self.sh[i].copy(), int(self.ids[i]))

    @property
    def max_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0

    def copy(self) -> "SurfelSet":
        return SurfelSet(self.mu.copy(), self.quat.copy(), self.log_scale.copy(),
                         self.raw_opacity.copy(), self.sh.copy(), self.ids.copy(),
                         self.flags.copy(), self.parent.copy(), self.active_degree)

    def select(self, idx) -> "SurfelSet":
        return SurfelSet(self.mu[idx], self.quat[idx], self.log_scale[idx],
                         self.raw_opacity[idx], self.sh[idx], self.ids[idx],
                         self.flags[idx], self.parent[idx], self.active_degree)

    def concat(self, other: "SurfelSet") -> "SurfelSet":
        return SurfelSet(
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.quat, other.quat]),
            np.concatenate([self.log_scale, other.log_scale]),
            np.concatenate([self.raw_opacity, other.raw_opacity]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.flags, other.flags]),
            np.concatenate([self.parent, other.parent]),
            self.active_degree,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera pose."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)

    def validate(self) -> None:
        R = self.world_to_cam[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("world_to_cam rotation is not orthonormal")
        if not np.allclose(self.world_to_cam[3], [0, 0, 0, 1]):
            raise ValueError("world_to_cam last row must be (0, 0, 0, 1)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64,
                fov_x_deg=50.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        f = 0.5 * width / math.tan(0.5 * math.radians(fov_x_deg))
        return cls(width, height, f, f, width / 2.0, height / 2.0, w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics4(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx, 0.0],
            [0.0, self.fy, self.cy, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
        ])

    @property
    def W(self) -> np.ndarray:
        """World-to-screen matrix: world point -> (x z, y z, 1, z)."""
        return self.intrinsics4 @ self.world_to_cam

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions (H, W, 3) with unit z component."""
        xs = (np.arange(self.width) - self.cx) / self.fx
        ys = (np.arange(self.height) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = xs[None, :]
        rays[..., 1] = ys[:, None]
        rays[..., 2] = 1.0
        return rays

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return rigid_apply(self.rotation, self.translation, np.atleast_2d(np.asarray(pts, dtype=np.float64)))

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and camera depth (N,) of world points."""
        pc = self.to_camera(np.atleast_2d(pts))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return px, z


# ---------------------------------------------------------------------------
# kernels


def build_h_matrix(surfel: Surfel) -> np.ndarray:
    """Local (u, v, 1, 1) -> world homogeneous transform of one surfel."""
    R = quat_to_rotmat(np.asarray(surfel.quat, dtype=np.float64))
    s = np.exp(np.asarray(surfel.log_scale, dtype=np.float64))
    H = np.zeros((4, 4))
    H[:3, 0] = s[0] * R[:, 0]
    H[:3, 1] = s[1] * R[:, 1]
    H[:3, 3] = surfel.mu
    H[3, 3] = 1.0
    return H


def screen_matrices(camera: Camera, H: np.ndarray) -> np.ndarray:
    """M = W @ H for a stack of H, summed in a fixed order per element.

    Written out so every surfel's matrix is bit-identical regardless of
    its position in the batch.
    """
    W = camera.W
    M = np.zeros(H.shape)
    for i in range(4):
        for j in range(4):
            acc = W[i, 0] * H[:, 0, j]
            for k in range(1, 4):
                acc = acc + W[i, k] * H[:, k, j]
            M[:, i, j] = acc
    return M


def rigid_apply(R: np.ndarray, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """R @ p + t per row with a fixed summation order."""
    out = np.empty(pts.shape)
    for i in range(3):
        out[:, i] = R[i, 0] * pts[:, 0] + R[i, 1] * pts[:, 1] + R[i, 2] * pts[:, 2] + t[i]
    return out


def build_h_matrices(surfels: SurfelSet) -> np.ndarray:
    R = surfels.rotations
    s = surfels.scales
    H = np.zeros((len(surfels), 4, 4))
    H[:, :3, 0] = s[:, 0:1] * R[:, :, 0]
    H[:, :3, 1] = s[:, 1:2] * R[:, :, 1]
    H[:, :3, 3] = surfels.mu
    H[:, 3, 3] = 1.0
    return H


@njit(cache=True)
def intersect_core(M, x, y, near, cutoff2):
    """Ray-splat intersection for pixel (x, y) given M = W H.

    Returns (status, u, v, z).
    """
    hu0 = -M[0, 0] + x * M[3, 0]
    hu1 = -M[0, 1] + x * M[3, 1]
    hu3 = -M[0, 3] + x * M[3, 3]
    hv0 = -M[1, 0] + y * M[3, 0]
    hv1 = -M[1, 1] + y * M[3, 1]
    hv3 = -M[1, 3] + y * M[3, 3]
    den = hu0 * hv1 - hu1 * hv0
    if abs(den) < DEGENERATE_EPS:
        return SKIP_DEGENERATE, 0.0, 0.0, 0.0
    u = (hu1 * hv3 - hu3 * hv1) / den
    v = (hu3 * hv0 - hu0 * hv3) / den
    z = M[3, 0] * u + M[3, 1] * v + M[3, 3]
    if z <= near:
        return SKIP_NEAR, u, v, z
    if u * u + v * v > cutoff2:
        return SKIP_CUTOFF, u, v, z
    return HIT, u, v, z


@njit(cache=True)
def filtered_gaussian(u, v, x, y, ccx, ccy, lp_inv_var, center_ok):
    """Low-pass filtered Gaussian value and whether the screen-space branch won.

    ``lp_inv_var`` is 1 / sigma_lp**2; zero disables the filter.
    """
    g = math.exp(-0.5 * (u * u + v * v))
    if lp_inv_var > 0.0 and center_ok:
        dx = x - ccx
        dy = y - ccy
        glp = math.exp(-0.5 * (dx * dx + dy * dy) * lp_inv_var)
        if glp > g:
            return glp, True
    return g, False


class Intersection(NamedTuple):
    surfel_id: int
    u: float
    v: float
    z: float
    ghat: float
    alpha_times_g: float


def intersect(surfel: Surfel, camera: Camera, pixel, *, near: float = 0.01,
              cutoff: float = 3.0, lowpass_sigma: float | None = 0.7071) -> Intersection | None:
    """Intersect the ray through ``pixel`` with ``surfel``; ``None`` means skip."""
    M = screen_matrices(camera, build_h_matrix(surfel)[None])[0]
    x, y = float(pixel[0]), float(pixel[1])
    status, u, v, z = intersect_core(M, x, y, near, cutoff * cutoff)
    if status != HIT:
        return None
    px, cz = camera.project(np.asarray(surfel.mu)[None])
    lp = 0.0 if not lowpass_sigma else 1.0 / lowpass_sigma**2
    ghat, _ = filtered_gaussian(u, v, x, y, px[0, 0], px[0, 1], lp, bool(cz[0] > near))
    return Intersection(int(surfel.id), u, v, z, ghat, surfel.opacity * ghat)


def eval_sh_color(surfel: Surfel, view_dir, degree: int | None = None) -> np.ndarray:
    """View-dependent RGB of a surfel: max(sum c_lm Y_lm(d) + 0.5, 0)."""
    sh = np.asarray(surfel.sh, dtype=np.float64).reshape(1, -1, 3)
    if degree is None:
        degree = int(round(math.sqrt(sh.shape[1]))) - 1
    return sh_to_rgb(sh, np.asarray(view_dir, dtype=np.float64)[None], degree)[0]
