"""Camera geometry: boresight intersection, nadir frames, homographies, conics."""

import numpy as np
import pytest

from eigencrater.geometry import (
    MOON_RADIUS_KM,
    CameraModel,
    CatalogCrater3D,
    Pose,
    catalog_to_3d,
    filter_projected,
    homography_chain,
    latlon_to_plane_m,
    nadir_frame,
    plane_to_latlon,
    project_crater,
    project_point,
    surface_distance,
    warp_image,
)
from eigencrater.raster_io import CatalogRecord, RasterGrid
from eigencrater.synth import make_pose

CAM = CameraModel(dx=1853.0, dy=1853.0, up=1024.0, vp=768.0, width=2048, height=1536)


def random_pose(rng, altitude_range=(50.0, 300.0), max_tilt_deg=55.0):
    emission = float(rng.uniform(0.0, max_tilt_deg))
    azimuth = float(rng.uniform(0.0, 360.0))
    roll = float(rng.uniform(0.0, 360.0))
    altitude = float(rng.uniform(*altitude_range))
    return make_pose(emission, azimuth, altitude, roll)


def bisect_surface_distance(pose, moon_radius=MOON_RADIUS_KM):
    """Oracle: bisection on ||r + d c3|| - R over the near-side bracket."""
    r, c3 = pose.r_CM, pose.boresight

    def f(d):
        return np.linalg.norm(r + d * c3) - moon_radius

    lo, hi = 0.0, 0.0
    step = 1.0
    assert f(lo) > 0
    while f(step) > 0:
        step *= 2.0
        if step > 1e6:
            raise AssertionError("bracket not found")
    lo, hi = step / 2.0 if f(step / 2.0) > 0 else 0.0, step
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestSurfaceDistance:
    def test_nadir_altitude(self):
        pose = make_pose(0.0, 0.0, 100.0)
        assert surface_distance(pose) == pytest.approx(100.0, abs=1e-9)

    def test_off_nadir_matches_bisection(self):
        pose = make_pose(30.0, 45.0, 100.0)
        d = surface_distance(pose)
        assert d == pytest.approx(bisect_surface_distance(pose), abs=1e-9)

    def test_root_lands_on_sphere_sweep(self, rng):
        for _ in range(1000):
            pose = random_pose(rng)
            d = surface_distance(pose)
            assert d > 0
            radius = np.linalg.norm(pose.r_CM + d * pose.boresight)
            assert radius == pytest.approx(MOON_RADIUS_KM, abs=1e-9)

    def test_smaller_root_chosen(self, rng):
        pose = random_pose(rng)
        d = surface_distance(pose)
        b = float(pose.r_CM @ pose.boresight)
        disc = b * b - (pose.r_CM @ pose.r_CM - MOON_RADIUS_KM**2)
        assert d == pytest.approx(-b - np.sqrt(disc), abs=1e-12)

    def test_miss_raises(self):
        R = np.eye(3)  # boresight +z, position on +x axis: looks tangentially away
        pose = Pose(R_CM=R, r_CM=np.array([2000.0, 0.0, -500.0]))
        with pytest.raises(ValueError):
            surface_distance(pose)

    def test_inside_sphere_raises(self):
        pose = Pose(R_CM=np.eye(3), r_CM=np.array([100.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            surface_distance(pose)


class TestNadirFrame:
    def test_nadir_pose_reproduces_camera_frame(self):
        pose = make_pose(0.0, 0.0, 120.0)
        adapt = nadir_frame(pose)
        assert np.allclose(adapt.R_NM, pose.R_CM, atol=1e-9)
        assert np.allclose(adapt.emission_N, [0.0, 0.0, -1.0], atol=1e-12)

    def test_orthonormal_right_handed_sweep(self, rng):
        for _ in range(1000):
            pose = random_pose(rng)
            adapt = nadir_frame(pose)
            R = adapt.R_NM
            assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-12
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_n3_points_at_moon_center(self, rng):
        pose = random_pose(rng)
        adapt = nadir_frame(pose)
        d = surface_distance(pose)
        r_SM = pose.boresight * d + pose.r_CM
        r_NM = r_SM * np.linalg.norm(pose.r_CM) / MOON_RADIUS_KM
        assert adapt.R_NM[2] @ r_NM == pytest.approx(-np.linalg.norm(r_NM), abs=1e-9)

    def test_sun_rotation(self, rng):
        pose = random_pose(rng)
        sun = rng.standard_normal(3)
        sun /= np.linalg.norm(sun)
        adapt = nadir_frame(pose, sun_dir_M=sun)
        assert np.allclose(adapt.sun_N, adapt.R_NM @ sun)


class TestHomography:
    def test_nadir_gives_identity(self):
        pose = make_pose(0.0, 0.0, 100.0)
        adapt = homography_chain(pose, CAM, nadir_frame(pose))
        assert np.max(np.abs(adapt.H_NC - np.eye(3))) <= 1e-9

    def test_corner_round_trip(self, rng):
        pose = random_pose(rng, max_tilt_deg=40.0)
        adapt = homography_chain(pose, CAM, nadir_frame(pose))
        H = adapt.H_NC
        corners = np.array(
            [[0.0, 0.0], [2047.0, 0.0], [0.0, 1535.0], [2047.0, 1535.0]]
        )
        from eigencrater.geometry import apply_homography

        mapped = apply_homography(np.linalg.inv(H), apply_homography(H, corners))
        assert np.max(np.abs(mapped - corners)) <= 1e-9

    def test_surface_points_map_camera_to_nadir(self, rng):
        # a point on the mean sphere near the boresight must project
        # consistently through H_NC: pixel in camera -> pixel in nadir camera
        from eigencrater.geometry import apply_homography

        pose = make_pose(25.0, 30.0, 100.0)
        adapt = homography_chain(pose, CAM, nadir_frame(pose))
        d = surface_distance(pose)
        r_SM = pose.boresight * d + pose.r_CM
        r_NM = r_SM * np.linalg.norm(pose.r_CM) / MOON_RADIUS_KM
        nadir_pose = Pose(R_CM=adapt.R_NM, r_CM=r_NM)
        rng2 = np.random.default_rng(7)
        for _ in range(20):
            # sample surface points in the nadir frame's tangent plane
            offset = rng2.uniform(-3.0, 3.0, size=2)
            p = r_SM + offset[0] * adapt.R_NM[0] + offset[1] * adapt.R_NM[1]
            u_c, v_c, _ = project_point(p, pose, CAM)
            u_n, v_n, _ = project_point(p, nadir_pose, CAM)
            mapped = apply_homography(adapt.H_NC, np.array([u_c, v_c]))
            assert np.hypot(mapped[0] - u_n, mapped[1] - v_n) < 1e-6


class TestWarpImage:
    def test_identity_bit_exact(self, rng):
        grid = RasterGrid.from_array(rng.random((40, 50)), 1.0)
        warped, valid = warp_image(grid, np.eye(3))
        assert np.array_equal(warped.values, grid.values)
        assert valid.all()

    def test_translation_shifts_and_zero_fills(self):
        values = np.arange(12, dtype=float).reshape(3, 4)
        grid = RasterGrid.from_array(values, 1.0)
        H = np.eye(3)
        H[0, 2] = 1.0  # shift right by one pixel
        warped, valid = warp_image(grid, H)
        assert np.array_equal(warped.values[:, 1:], values[:, :-1])
        assert np.all(warped.values[:, 0] == 0.0)
        assert not valid[:, 0].any() and valid[:, 1:].all()

    def test_round_trip_smooth_image(self, rng):
        base = rng.standard_normal((30, 30))
        from scipy.ndimage import gaussian_filter

        smooth = gaussian_filter(base, 3.0)
        grid = RasterGrid.from_array(smooth, 1.0)
        H = np.array([[1.01, 0.02, 1.3], [-0.015, 0.99, -0.7], [1e-5, -2e-5, 1.0]])
        once, valid1 = warp_image(grid, H)
        back, valid2 = warp_image(once, np.linalg.inv(H))
        both = valid2 & (np.abs(np.arange(30)[:, None] - 15) < 10) & (
            np.abs(np.arange(30)[None, :] - 15) < 10
        )
        dyn = smooth.max() - smooth.min()
        err = np.abs(back.values - smooth)[both].mean()
        assert err <= 0.01 * dyn

    def test_singular_rejected(self, rng):
        grid = RasterGrid.from_array(rng.random((5, 5)), 1.0)
        with pytest.raises(ValueError):
            warp_image(grid, np.zeros((3, 3)))


class TestCatalogTo3D:
    def test_axis_points(self):
        recs = [
            CatalogRecord(id="a", lat=0.0, lon=0.0, radius=1.0, eccentricity=0.0),
            CatalogRecord(id="b", lat=90.0, lon=0.0, radius=1.0, eccentricity=0.0),
        ]
        craters = catalog_to_3d(recs)
        assert np.allclose(craters[0].center, [MOON_RADIUS_KM, 0.0, 0.0])
        assert np.allclose(craters[1].center, [0.0, 0.0, MOON_RADIUS_KM], atol=1e-9)

    def test_norm_identity(self, rng):
        for _ in range(50):
            rec = CatalogRecord(
                id="r",
                lat=float(rng.uniform(-89, 89)),
                lon=float(rng.uniform(-179, 179)),
                radius=2.0,
                eccentricity=0.1,
                elevation=float(rng.uniform(-3000, 3000)),
            )
            crater = catalog_to_3d([rec])[0]
            expected = MOON_RADIUS_KM + rec.elevation / 1000.0
            assert np.linalg.norm(crater.center) == pytest.approx(expected, abs=1e-12)
            assert np.allclose(np.linalg.norm(crater.normal), 1.0)

    def test_plane_round_trip(self, rng):
        for _ in range(50):
            east = float(rng.uniform(-5e4, 5e4))
            north = float(rng.uniform(-5e4, 5e4))
            height = float(rng.uniform(-2e3, 2e3))
            lat, lon, elev = plane_to_latlon(east, north, height)
            e2, n2, h2 = latlon_to_plane_m(lat, lon, elev)
            assert e2 == pytest.approx(east, abs=1e-6)
            assert n2 == pytest.approx(north, abs=1e-6)
            assert h2 == pytest.approx(height, abs=1e-6)


def rim_sampling_oracle(crater, pose, cam, n=360):
    """Project explicit rim points and fit a conic algebraically."""
    n_hat = crater.normal / np.linalg.norm(crater.normal)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n_hat[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n_hat, seed)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n_hat, e1)
    thetas = np.linspace(0, 2 * np.pi, n, endpoint=False)
    uv = []
    for th in thetas:
        p = crater.center + crater.radius * (np.cos(th) * e1 + np.sin(th) * e2)
        u, v, z = project_point(p, pose, cam)
        assert u is not None
        uv.append((u, v))
    uv = np.asarray(uv)
    # algebraic conic fit: nullspace of [u^2, uv, v^2, u, v, 1]
    u, v = uv[:, 0], uv[:, 1]
    # condition the fit by centering/scaling
    u0, v0 = u.mean(), v.mean()
    s = max(u.std(), v.std())
    un, vn = (u - u0) / s, (v - v0) / s
    A = np.column_stack([un**2, un * vn, vn**2, un, vn, np.ones_like(un)])
    _, _, vt = np.linalg.svd(A)
    a, b, c, d, e, f = vt[-1]
    M = np.array([[a, b / 2], [b / 2, c]])
    center_n = -np.linalg.solve(M, [d / 2, e / 2])
    k = f - center_n @ M @ center_n
    evals, evecs = np.linalg.eigh(M)
    if evals[0] < 0:
        evals, k = -evals, -k
    axes = np.sqrt(-k / evals) * s
    center = center_n * s + np.array([u0, v0])
    return center, float(axes.max()), float(axes.min())


class TestProjectCrater:
    def test_nadir_boresight_pinhole_scaling(self):
        pose = make_pose(0.0, 0.0, 100.0)
        rec = CatalogRecord(id="c", lat=0.0, lon=0.0, radius=2.0, eccentricity=0.0)
        crater = catalog_to_3d([rec])[0]
        proj = project_crater(crater, pose, CAM)
        expected_r = 2.0 * CAM.dx / 100.0
        assert proj is not None
        assert np.allclose(proj.center_uv, [CAM.up, CAM.vp], atol=1e-6)
        assert proj.semi_major == pytest.approx(expected_r, rel=1e-6)
        assert proj.semi_minor == pytest.approx(expected_r, rel=1e-6)

    def test_foreshortening_ratio(self):
        pose = make_pose(30.0, 0.0, 400.0)
        rec = CatalogRecord(id="c", lat=0.0, lon=0.0, radius=2.0, eccentricity=0.0)
        crater = catalog_to_3d([rec])[0]
        proj = project_crater(crater, pose, CAM)
        assert proj is not None
        assert proj.semi_minor / proj.semi_major == pytest.approx(
            np.cos(np.deg2rad(30.0)), rel=0.01
        )

    def test_matches_rim_sampling_oracle(self, rng):
        hits = 0
        for _ in range(200):
            pose = random_pose(rng, altitude_range=(80.0, 250.0), max_tilt_deg=35.0)
            east = float(rng.uniform(-3e4, 3e4))
            north = float(rng.uniform(-3e4, 3e4))
            lat, lon, elev = plane_to_latlon(east, north, float(rng.uniform(-500, 500)))
            rec = CatalogRecord(
                id="c", lat=lat, lon=lon, radius=float(rng.uniform(0.5, 6.0)),
                eccentricity=0.0, elevation=elev,
            )
            crater = catalog_to_3d([rec])[0]
            proj = project_crater(crater, pose, CAM)
            if proj is None:
                continue
            hits += 1
            center_o, major_o, minor_o = rim_sampling_oracle(crater, pose, CAM)
            assert np.hypot(*(proj.center_uv - center_o)) <= 0.05
            assert abs(proj.semi_major - major_o) / major_o <= 0.005
            assert abs(proj.semi_minor - minor_o) / minor_o <= 0.005
        assert hits >= 50

    def test_behind_camera_returns_none(self):
        pose = make_pose(0.0, 0.0, 100.0)
        # a point 200 km above the reference sphere sits behind the camera
        above = CatalogRecord(
            id="c", lat=0.0, lon=0.0, radius=2.0, eccentricity=0.0, elevation=2e5
        )
        crater = catalog_to_3d([above])[0]
        assert project_crater(crater, pose, CAM) is None

    def test_far_side_crater_returns_none(self):
        pose = make_pose(0.0, 0.0, 100.0)
        rec = CatalogRecord(id="c", lat=0.0, lon=180.0, radius=2.0, eccentricity=0.0)
        crater = catalog_to_3d([rec])[0]
        assert project_crater(crater, pose, CAM) is None

    def test_out_of_bounds_returns_none(self):
        pose = make_pose(0.0, 0.0, 100.0)
        lat, lon, _ = plane_to_latlon(90e3, 0.0, 0.0)
        rec = CatalogRecord(id="c", lat=lat, lon=lon, radius=2.0, eccentricity=0.0)
        crater = catalog_to_3d([rec])[0]
        assert project_crater(crater, pose, CAM) is None

    def test_size_filter_thresholds(self):
        mk = lambda minor, major: type(
            "P", (), {"semi_minor": minor, "semi_major": major}
        )()
        kept = filter_projected([mk(5.1, 50.0), mk(5.0, 50.0), mk(20.0, 105.0)])
        assert len(kept) == 1 and kept[0].semi_minor == 5.1


class TestPoseValidation:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Pose(R_CM=np.eye(3) * 1.001, r_CM=np.zeros(3))
        bad = np.eye(3)
        bad[0, 0] = -1.0  # det -1
        with pytest.raises(ValueError):
            Pose(R_CM=bad, r_CM=np.zeros(3))
