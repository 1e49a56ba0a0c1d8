import numpy as np
import pytest

from splatfield.errors import ValidationError
from splatfield.splat_core import (
    SH_C0,
    SH_C1,
    Camera,
    GaussianCloud,
    evaluate_sh,
    project_batch,
    project_gaussian,
    quat_to_rotmat,
)
from splatfield.synthetic import look_at_camera, random_cloud


def single_gaussian(position, scale=0.1, opacity=0.7, rgb=(0.5, 0.5, 0.5), quat=None):
    sh = np.zeros((1, 1, 3))
    sh[0, 0, :] = (np.asarray(rgb) - 0.5) / SH_C0
    return GaussianCloud(
        positions=np.asarray(position, dtype=float).reshape(1, 3),
        rotations=np.asarray(quat if quat is not None else [1, 0, 0, 0], float).reshape(1, 4),
        scales=np.full((1, 3), scale, dtype=float),
        opacities=np.array([opacity], dtype=float),
        sh_coeffs=sh,
    )


def axis_camera(width=100, height=100, f=100.0):
    return Camera(view=0, width=width, height=height, fx=f, fy=f,
                  cx=width / 2.0, cy=height / 2.0, R=np.eye(3), t=np.zeros(3))


class TestCloudValidation:
    def test_rejects_nonunit_quaternion(self):
        with pytest.raises(ValidationError, match="unit-norm"):
            GaussianCloud(
                positions=np.zeros((1, 3)), rotations=np.array([[2.0, 0, 0, 0]]),
                scales=np.ones((1, 3)), opacities=np.array([0.5]),
                sh_coeffs=np.zeros((1, 1, 3)),
            )

    def test_rejects_boundary_opacity(self):
        for bad in (0.0, 1.0):
            with pytest.raises(ValidationError, match="opacit"):
                GaussianCloud(
                    positions=np.zeros((1, 3)), rotations=np.array([[1.0, 0, 0, 0]]),
                    scales=np.ones((1, 3)), opacities=np.array([bad]),
                    sh_coeffs=np.zeros((1, 1, 3)),
                )

    def test_rejects_bad_sh_count(self):
        with pytest.raises(ValidationError, match="degree"):
            GaussianCloud(
                positions=np.zeros((1, 3)), rotations=np.array([[1.0, 0, 0, 0]]),
                scales=np.ones((1, 3)), opacities=np.array([0.5]),
                sh_coeffs=np.zeros((1, 5, 3)),
            )


class TestCameraValidation:
    def test_rejects_non_orthonormal(self):
        R = np.eye(3)
        R[0, 1] = 0.01
        with pytest.raises(ValidationError, match="orthonormal"):
            Camera(view=0, width=8, height=8, fx=4, fy=4, cx=4, cy=4, R=R, t=np.zeros(3))

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValidationError, match="focal"):
            Camera(view=0, width=8, height=8, fx=0, fy=4, cx=4, cy=4,
                   R=np.eye(3), t=np.zeros(3))

    def test_center(self):
        cam = look_at_camera(0, eye=[3.0, -2.0, 1.0], target=[0, 0, 0],
                             width=10, height=10, focal=10)
        np.testing.assert_allclose(cam.center, [3.0, -2.0, 1.0], atol=1e-12)


class TestEvaluateSh:
    def test_degree0_zero_dc_is_half_gray(self):
        cloud = single_gaussian([0, 0, 1], rgb=(0.5, 0.5, 0.5))
        np.testing.assert_allclose(
            evaluate_sh(cloud, 0, np.array([0, 0, 1.0])), [0.5, 0.5, 0.5]
        )

    def test_clamped_to_one(self):
        cloud = single_gaussian([0, 0, 1])
        cloud.sh_coeffs[0, 0, 0] = 10.0  # pushes channel far above 1
        rgb = evaluate_sh(cloud, 0, np.array([0, 0, 1.0]))
        assert rgb[0] == 1.0

    def test_degree1_antisymmetric_about_dc(self):
        rng = np.random.default_rng(4)
        # small coefficients keep all channels inside (0, 1), away from the clamp
        sh = rng.normal(scale=0.15, size=(1, 4, 3))
        cloud = GaussianCloud(
            positions=np.zeros((1, 3)), rotations=np.array([[1.0, 0, 0, 0]]),
            scales=np.ones((1, 3)), opacities=np.array([0.5]), sh_coeffs=sh,
        )
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)

        # independent oracle: the degree-1 real SH basis evaluated directly
        def direct(dirvec):
            x, y, z = dirvec
            out = SH_C0 * sh[0, 0]
            out = out - SH_C1 * y * sh[0, 1] + SH_C1 * z * sh[0, 2] - SH_C1 * x * sh[0, 3]
            return out + 0.5

        a = evaluate_sh(cloud, 0, d)
        b = evaluate_sh(cloud, 0, -d)
        dc = SH_C0 * sh[0, 0] + 0.5
        np.testing.assert_allclose(a + b, 2 * dc, atol=1e-12)
        np.testing.assert_allclose(a, np.clip(direct(d), 0, 1), atol=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(ValidationError):
            evaluate_sh(single_gaussian([0, 0, 1]), 3, np.array([0, 0, 1.0]))


class TestProjection:
    def test_on_axis_projects_to_principal_point(self):
        cam = axis_camera()
        pg = project_gaussian(single_gaussian([0, 0, 5.0]), 0, cam)
        np.testing.assert_allclose(pg.mean2d, [50.0, 50.0], atol=1e-12)
        assert pg.depth == pytest.approx(5.0)

    def test_behind_camera_culled(self):
        cam = axis_camera()
        assert project_gaussian(single_gaussian([0, 0, -1.0]), 0, cam) is None

    def test_far_outside_image_culled(self):
        cam = axis_camera()
        assert project_gaussian(single_gaussian([50.0, 0, 1.0], scale=0.01), 0, cam) is None

    def test_isotropic_covariance_closed_form(self):
        cam = axis_camera(f=120.0)
        s, z, lowpass = 0.3, 6.0, 0.3
        pg = project_gaussian(single_gaussian([0, 0, z], scale=s), 0, cam, lowpass=lowpass)
        expected = (120.0 * s / z) ** 2
        np.testing.assert_allclose(np.diag(pg.cov2d), expected + lowpass, rtol=1e-12)

    def test_covariance_matches_monte_carlo(self):
        # Oracle: project 1e5 samples of the 3D Gaussian through the pinhole
        # camera and fit the 2D covariance of the point cloud.
        rng = np.random.default_rng(11)
        cam = look_at_camera(0, eye=[2.5, 1.0, 1.5], target=[0, 0, 0],
                             width=200, height=200, focal=180.0)
        quat = rng.normal(size=4)
        quat /= np.linalg.norm(quat)
        cloud = GaussianCloud(
            positions=np.array([[0.1, -0.2, 0.05]]),
            rotations=quat.reshape(1, 4),
            scales=np.array([[0.05, 0.12, 0.02]]),
            opacities=np.array([0.8]),
            sh_coeffs=np.zeros((1, 1, 3)),
        )
        lowpass = 0.3
        pg = project_gaussian(cloud, 0, cam, lowpass=lowpass)

        R3 = quat_to_rotmat(cloud.rotations)[0]
        samples = cloud.positions[0] + (
            rng.standard_normal((100_000, 3)) * cloud.scales[0]
        ) @ R3.T
        p_cam = samples @ cam.R.T + cam.t
        u = cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx
        v = cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy
        mc_cov = np.cov(np.stack([u, v]))
        np.testing.assert_allclose(pg.cov2d - lowpass * np.eye(2), mc_cov, rtol=0.01)

    def test_cov2d_symmetric_eigenvalues_at_least_lowpass(self):
        cloud = random_cloud(150, seed=2)
        cam = look_at_camera(0, eye=[3.5, 0, 1.0], target=[0, 0, 0],
                             width=64, height=64, focal=80.0)
        lowpass = 0.3
        batch = project_batch(cloud, cam, lowpass=lowpass)
        assert len(batch) > 50
        np.testing.assert_allclose(batch.cov2d[:, 0, 1], batch.cov2d[:, 1, 0])
        eig = np.linalg.eigvalsh(batch.cov2d)
        assert np.all(eig >= lowpass - 1e-9)
        np.testing.assert_allclose(batch.radii, 3.0 * np.sqrt(eig[:, 1]), rtol=1e-9)

    def test_roll_equivariance(self):
        cloud = random_cloud(60, seed=6, spread=0.5)
        cam = look_at_camera(0, eye=[0, -4.0, 0.5], target=[0, 0, 0],
                             width=128, height=128, focal=128.0)
        phi = 0.7
        c, s = np.cos(phi), np.sin(phi)
        rot2 = np.array([[c, -s], [s, c]])
        # rolling the camera about its optical axis premultiplies the pose
        roll3 = np.eye(3)
        roll3[:2, :2] = rot2
        rolled = Camera(view=0, width=cam.width, height=cam.height, fx=cam.fx, fy=cam.fy,
                        cx=cam.cx, cy=cam.cy, R=roll3 @ cam.R, t=roll3 @ cam.t)
        a = project_batch(cloud, cam)
        b = project_batch(cloud, rolled)
        common = np.intersect1d(a.source, b.source)
        ia = np.searchsorted(a.source, common)
        ib = np.searchsorted(b.source, common)
        center = np.array([cam.cx, cam.cy])
        np.testing.assert_allclose(
            b.means2d[ib], (a.means2d[ia] - center) @ rot2.T + center, atol=1e-4
        )
        np.testing.assert_allclose(
            b.cov2d[ib], rot2 @ a.cov2d[ia] @ rot2.T, atol=1e-4
        )

    def test_depth_order_preserved_on_shared_ray(self):
        cam = axis_camera()
        cloud = GaussianCloud(
            positions=np.array([[0.1, 0.1, 2.0], [0.2, 0.2, 4.0]]),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            scales=np.full((2, 3), 0.05),
            opacities=np.array([0.5, 0.5]),
            sh_coeffs=np.zeros((2, 1, 3)),
        )
        batch = project_batch(cloud, cam)
        assert batch.depths[0] < batch.depths[1]
