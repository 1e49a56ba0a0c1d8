"""Geometric core: Gaussian/camera value types, SH color evaluation, 3D->2D projection.

Conventions (shared by the whole package):
  - world-to-camera pose:  x_cam = R @ x_world + t, camera looks down +z,
    x right / y down in the image.
  - pixel (ix, iy) is sampled at the continuous point (ix + 0.5, iy + 0.5);
    the image rectangle is [0, W] x [0, H] in these coordinates.  This makes
    intrinsic rescaling to a different resolution an exact similarity.
  - quaternions are wxyz, scales are world-space standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Real spherical harmonics constants, degrees 0..3.
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

_VALID_SH_COUNTS = {1: 0, 4: 1, 9: 2, 16: 3}

# Blending conventions inherited from the standard splatting pipeline.
ALPHA_CLAMP = 0.99
SKIP_ALPHA = 1.0 / 255.0
DEFAULT_NEAR = 0.01
DEFAULT_LOWPASS = 0.3


@dataclass
class GaussianCloud:
    """A pre-trained Gaussian scene held as plain arrays (float64 in memory).

    ``raw_properties`` optionally carries the verbatim float32 property
    columns of the file the cloud was loaded from, so that saving the cloud
    again is a bitwise round-trip (sigmoid/exp/normalize are not bitwise
    invertible through float32).
    """

    positions: np.ndarray      # (N, 3) world meters
    rotations: np.ndarray      # (N, 4) unit quaternions, wxyz
    scales: np.ndarray         # (N, 3) world meters, > 0
    opacities: np.ndarray      # (N,) in (0, 1)
    sh_coeffs: np.ndarray      # (N, K, 3), K in {1, 4, 9, 16}
    raw_properties: tuple[list[str], np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        n = len(self.positions)
        for name in ("positions", "rotations", "scales", "opacities", "sh_coeffs"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValidationError(f"{name}: expected {n} rows, got {len(arr)}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name}: non-finite values")
        if self.positions.shape != (n, 3):
            raise ValidationError(f"positions: bad shape {self.positions.shape}")
        if self.rotations.shape != (n, 4):
            raise ValidationError(f"rotations: bad shape {self.rotations.shape}")
        if self.scales.shape != (n, 3):
            raise ValidationError(f"scales: bad shape {self.scales.shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[2] != 3:
            raise ValidationError(f"sh_coeffs: bad shape {self.sh_coeffs.shape}")
        if self.sh_coeffs.shape[1] not in _VALID_SH_COUNTS:
            raise ValidationError(
                f"sh_coeffs: {self.sh_coeffs.shape[1]} coefficients is not a degree <= 3 count"
            )
        if n:
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValidationError("rotations: quaternions not unit-norm (tol 1e-6)")
            if np.any(self.scales <= 0):
                raise ValidationError("scales: must be positive")
            if np.any(self.opacities <= 0) or np.any(self.opacities >= 1):
                raise ValidationError("opacities: must lie in the open interval (0, 1)")

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return _VALID_SH_COUNTS[self.sh_coeffs.shape[1]]

    def take(self, indices: np.ndarray) -> "GaussianCloud":
        """Subset the cloud (order given by ``indices``); raw columns follow along."""
        raw = None
        if self.raw_properties is not None:
            names, mat = self.raw_properties
            raw = (list(names), mat[indices].copy())
        return GaussianCloud(
            positions=self.positions[indices].copy(),
            rotations=self.rotations[indices].copy(),
            scales=self.scales[indices].copy(),
            opacities=self.opacities[indices].copy(),
            sh_coeffs=self.sh_coeffs[indices].copy(),
            raw_properties=raw,
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera pose."""

    view: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "R", np.ascontiguousarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.ascontiguousarray(self.t, dtype=np.float64))
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"camera {self.view}: non-positive image dimensions")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.view}: non-positive focal length")
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ValidationError(f"camera {self.view}: bad pose shapes")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-5:
            raise ValidationError(f"camera {self.view}: rotation not orthonormal (tol 1e-5)")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-5:
            raise ValidationError(f"camera {self.view}: rotation determinant is not +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def rescaled(self, width: int, height: int) -> "Camera":
        """Same pose, intrinsics scaled to a new resolution."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            view=self.view,
            width=width,
            height=height,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            R=self.R,
            t=self.t,
        )


@dataclass(frozen=True)
class ProjectedGaussian:
    """One Gaussian after EWA projection into a camera."""

    index: int
    mean2d: np.ndarray     # (2,) pixels
    cov2d: np.ndarray      # (2, 2) pixels^2, low-pass dilated
    depth: float           # camera-space z, meters
    opacity: float
    rgb: np.ndarray        # (3,) evaluated color in [0, 1]
    radius: float          # 3-sigma bounding radius, pixels


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Batch wxyz quaternions (N, 4) -> rotation matrices (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
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


def eval_sh_batch(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate SH colors for (N, K, 3) coefficients at unit directions (N, 3).

    Returns raw values with the +0.5 offset applied, not yet clamped.
    """
    k = sh.shape[1]
    res = SH_C0 * sh[:, 0, :]
    if k > 1:
        x = dirs[:, 0:1]
        y = dirs[:, 1:2]
        z = dirs[:, 2:3]
        res = res - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if k > 4:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        res = (
            res
            + SH_C2[0] * xy * sh[:, 4]
            + SH_C2[1] * yz * sh[:, 5]
            + SH_C2[2] * (2 * zz - xx - yy) * sh[:, 6]
            + SH_C2[3] * xz * sh[:, 7]
            + SH_C2[4] * (xx - yy) * sh[:, 8]
        )
    if k > 9:
        res = (
            res
            + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
            + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14]
            + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15]
        )
    return res + 0.5


def evaluate_sh(cloud: GaussianCloud, k: int, view_dir: np.ndarray) -> np.ndarray:
    """Color of Gaussian ``k`` seen from unit direction ``view_dir``, clamped to [0, 1]."""
    if not 0 <= k < cloud.count:
        raise ValidationError(f"gaussian index {k} out of range [0, {cloud.count})")
    d = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    rgb = eval_sh_batch(cloud.sh_coeffs[k : k + 1], d)[0]
    return np.clip(rgb, 0.0, 1.0)


class ProjectedBatch:
    """All non-culled Gaussians of a cloud projected into one camera.

    Arrays are indexed by compact position; ``source`` maps back to cloud
    indices (ascending, so compact order preserves index order).  ``max_mahal``
    is the squared Mahalanobis distance at which alpha falls to the 1/255
    skip threshold; ``bin_radius`` is the matching pixel radius used for tile
    assignment (it can exceed the 3-sigma ``radii`` so that tile binning
    never drops a pixel the blend rules would keep).
    """

    __slots__ = (
        "source", "means2d", "cov2d", "conics", "depths",
        "opacities", "rgb", "radii", "max_mahal", "bin_radius",
    )

    def __init__(self, source, means2d, cov2d, conics, depths, opacities, rgb,
                 radii, max_mahal, bin_radius):
        self.source = source
        self.means2d = means2d
        self.cov2d = cov2d
        self.conics = conics
        self.depths = depths
        self.opacities = opacities
        self.rgb = rgb
        self.radii = radii
        self.max_mahal = max_mahal
        self.bin_radius = bin_radius

    def __len__(self) -> int:
        return len(self.source)


def project_batch(
    cloud: GaussianCloud,
    camera: Camera,
    near: float = DEFAULT_NEAR,
    lowpass: float = DEFAULT_LOWPASS,
) -> ProjectedBatch:
    """EWA-project every Gaussian, dropping ones behind the near plane or
    whose 3-sigma footprint misses the image rectangle."""
    n = cloud.count
    if n == 0:
        e = np.empty
        return ProjectedBatch(
            e(0, np.int64), e((0, 2)), e((0, 2, 2)), e((0, 3)), e(0), e(0),
            e((0, 3)), e(0), e(0), e(0),
        )

    p_cam = cloud.positions @ camera.R.T + camera.t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > near

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(in_front, 1.0 / z, 0.0)
    u = camera.fx * x * inv_z + camera.cx
    v = camera.fy * y * inv_z + camera.cy

    # Sigma_cam = (R_cam R_quat) diag(s^2) (R_cam R_quat)^T
    rot = quat_to_rotmat(cloud.rotations)
    m = camera.R[None, :, :] @ (rot * cloud.scales[:, None, :])
    sigma_cam = m @ m.transpose(0, 2, 1)

    # Perspective Jacobian rows at the mean.
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = camera.fx * inv_z
    j[:, 0, 2] = -camera.fx * x * inv_z * inv_z
    j[:, 1, 1] = camera.fy * inv_z
    j[:, 1, 2] = -camera.fy * y * inv_z * inv_z
    cov2d = j @ sigma_cam @ j.transpose(0, 2, 1)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = 3.0 * np.sqrt(lam_max)

    visible = (
        in_front
        & (det > 0)
        & (u + radii >= 0.0)
        & (u - radii <= camera.width)
        & (v + radii >= 0.0)
        & (v - radii <= camera.height)
    )
    idx = np.flatnonzero(visible)

    means2d = np.stack([u[idx], v[idx]], axis=1)
    cov_sel = cov2d[idx]
    det_sel = det[idx]
    conics = np.stack(
        [cov_sel[:, 1, 1] / det_sel, -cov_sel[:, 0, 1] / det_sel, cov_sel[:, 0, 0] / det_sel],
        axis=1,
    )
    op = cloud.opacities[idx]
    # alpha >= 1/255 iff mahalanobis^2 <= 2 ln(255 * opacity); negative means never.
    max_mahal = 2.0 * np.log(np.maximum(255.0 * op, 1e-300))
    bin_radius = np.sqrt(np.maximum(max_mahal, 0.0) * lam_max[idx]) + 1e-6

    dirs = cloud.positions[idx] - camera.center
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.maximum(norms, 1e-12)
    rgb = np.clip(eval_sh_batch(cloud.sh_coeffs[idx], dirs), 0.0, 1.0)

    return ProjectedBatch(
        source=idx.astype(np.int64),
        means2d=means2d,
        cov2d=cov_sel,
        conics=conics,
        depths=z[idx],
        opacities=op,
        rgb=rgb,
        radii=radii[idx],
        max_mahal=max_mahal,
        bin_radius=bin_radius,
    )


def project_gaussian(
    cloud: GaussianCloud,
    k: int,
    camera: Camera,
    near: float = DEFAULT_NEAR,
    lowpass: float = DEFAULT_LOWPASS,
) -> ProjectedGaussian | None:
    """Project a single Gaussian; ``None`` means culled."""
    if not 0 <= k < cloud.count:
        raise ValidationError(f"gaussian index {k} out of range [0, {cloud.count})")
    batch = project_batch(cloud.take(np.array([k])), camera, near=near, lowpass=lowpass)
    if len(batch) == 0:
        return None
    return ProjectedGaussian(
        index=k,
        mean2d=batch.means2d[0],
        cov2d=batch.cov2d[0],
        depth=float(batch.depths[0]),
        opacity=float(batch.opacities[0]),
        rgb=batch.rgb[0],
        radius=float(batch.radii[0]),
    )
