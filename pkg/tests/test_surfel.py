import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import quat_matrix_oracle, random_surfel, ray_plane_oracle
from surfelsplat.surfel import (
    SH_C0,
    Camera,
    Surfel,
    SurfelSet,
    build_h_matrix,
    eval_sh_color,
    intersect,
    quat_to_rotmat,
    sh_basis,
)


class TestHMatrix:
    def test_identity(self):
        s = Surfel.create([0, 0, 0])
        H = build_h_matrix(s)
        np.testing.assert_array_equal(H, [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 1]])

    def test_translated_scaled(self):
        s = Surfel.create([1, 2, 3], scale=(2, 0.5))
        H = build_h_matrix(s)
        np.testing.assert_allclose(H[:, 0], [2, 0, 0, 0], atol=1e-15)
        np.testing.assert_allclose(H[:, 1], [0, 0.5, 0, 0], atol=1e-15)
        np.testing.assert_allclose(H[:, 3], [1, 2, 3, 1], atol=1e-15)

    def test_random_against_vector_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = random_surfel(rng)
            u, v = rng.normal(size=2)
            R = quat_matrix_oracle(s.quat)
            sc = np.exp(s.log_scale)
            expect = s.mu + u * sc[0] * R[:, 0] + v * sc[1] * R[:, 1]
            got = build_h_matrix(s) @ np.array([u, v, 1.0, 1.0])
            assert np.max(np.abs(got[:3] - expect)) < 1e-12
            assert got[3] == pytest.approx(1.0)


def test_quaternion_renormalized():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.normal(size=4)
        np.testing.assert_allclose(quat_to_rotmat(q[None] * 7.3)[0], quat_matrix_oracle(q), atol=1e-12)


class TestIntersect:
    def test_center_ray(self):
        s = Surfel.create([0, 0, 0], scale=(1, 1))
        cam = Camera.look_at([0, 0, 5], [0, 0, 0], up=(0, 1, 0), width=33, height=33)
        hit = intersect(s, cam, (cam.cx, cam.cy))
        assert hit is not None
        assert hit.u == pytest.approx(0, abs=1e-12) and hit.v == pytest.approx(0, abs=1e-12)
        assert hit.z == pytest.approx(5.0)
        assert hit.ghat == pytest.approx(1.0)

    def test_matches_numeric_ray_plane(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 300:
            s = random_surfel(rng)
            eye = rng.normal(size=3)
            eye = 6 * eye / np.linalg.norm(eye)
            cam = Camera.look_at(eye, rng.uniform(-0.3, 0.3, 3), width=40, height=30, fov_x_deg=50)
            px = (rng.uniform(0, 40), rng.uniform(0, 30))
            hit = intersect(s, cam, px, lowpass_sigma=None)
            u, v, t = ray_plane_oracle(s, cam, px)
            if u * u + v * v > 9 or t <= 0.01:
                assert hit is None
                continue
            assert hit is not None
            assert abs(hit.u - u) < 1e-6 and abs(hit.v - v) < 1e-6 and abs(hit.z - t) < 1e-6
            assert hit.ghat == pytest.approx(math.exp(-0.5 * (u * u + v * v)), abs=1e-9)
            checked += 1

    def test_edge_on_skips(self):
        # plane spanned by x and z, camera in that plane looking along +x
        s = Surfel.create([0, 0, 0], quat=(math.cos(math.pi / 4), math.sin(math.pi / 4), 0, 0))
        cam = Camera.look_at([-5, 0, 0], [0, 0, 0], width=32, height=32)
        assert intersect(s, cam, (cam.cx, cam.cy)) is None

    def test_behind_near_skips(self):
        s = Surfel.create([0, 0, 0])
        cam = Camera.look_at([0, 0, -5], [0, 0, -10], up=(0, 1, 0), width=16, height=16)
        assert intersect(s, cam, (8, 8)) is None

    def test_outside_cutoff_skips(self):
        s = Surfel.create([0, 0, 0], scale=(0.01, 0.01))
        cam = Camera.look_at([0, 0, 5], [0, 0, 0], up=(0, 1, 0), width=64, height=64)
        assert intersect(s, cam, (0, 0), lowpass_sigma=None) is None

    def test_hit_lies_on_plane(self):
        rng = np.random.default_rng(3)
        n = 0
        while n < 100:
            s = random_surfel(rng)
            cam = Camera.look_at([0.5, -5, 2], [0, 0, 0], width=32, height=32)
            px = rng.uniform(0, 32, 2)
            hit = intersect(s, cam, px)
            if hit is None:
                continue
            d_cam = np.array([(px[0] - cam.cx) / cam.fx, (px[1] - cam.cy) / cam.fy, 1.0]) * hit.z
            p = cam.rotation.T @ (d_cam - cam.translation)
            nrm = quat_matrix_oracle(s.quat)[:, 2]
            assert abs((p - s.mu) @ nrm) < 1e-6
            n += 1

    def test_rigid_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            s = random_surfel(rng)
            cam = Camera.look_at([0.3, -5, 1], [0, 0, 0], width=32, height=32)
            px = rng.uniform(8, 24, 2)
            a = intersect(s, cam, px)
            # move the world by a rigid transform G; camera pose becomes w2c @ G^-1
            qg = rng.normal(size=4)
            Rg = quat_matrix_oracle(qg)
            tg = rng.normal(size=3)
            G = np.eye(4)
            G[:3, :3], G[:3, 3] = Rg, tg
            qn = qg / np.linalg.norm(qg)
            qs = s.quat / np.linalg.norm(s.quat)
            w1, v1 = qn[0], qn[1:]
            w2, v2 = qs[0], qs[1:]
            q = np.concatenate([[w1 * w2 - v1 @ v2], w1 * v2 + w2 * v1 + np.cross(v1, v2)])
            s2 = Surfel(Rg @ s.mu + tg, q, s.log_scale, s.raw_opacity, s.sh, s.id)
            cam2 = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, cam.world_to_cam @ np.linalg.inv(G))
            b = intersect(s2, cam2, px)
            assert (a is None) == (b is None)
            if a is not None:
                assert abs(a.u - b.u) < 1e-6 and abs(a.v - b.v) < 1e-6 and abs(a.z - b.z) < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 2.9), st.floats(0.0, 2.9))
    def test_ghat_monotone_without_lowpass(self, r1, r2):
        s = Surfel.create([0, 0, 0])
        cam = Camera.look_at([0, 0, 5], [0, 0, 0], up=(0, 1, 0), width=64, height=64, fov_x_deg=60)
        # radial offsets along the image x axis map monotonically to u^2 + v^2
        a = intersect(s, cam, (cam.cx + r1 * 3, cam.cy), lowpass_sigma=None)
        b = intersect(s, cam, (cam.cx + r2 * 3, cam.cy), lowpass_sigma=None)
        if a is not None and b is not None:
            ra, rb = a.u**2 + a.v**2, b.u**2 + b.v**2
            if ra <= rb:
                assert a.ghat >= b.ghat


class TestSH:
    def test_white(self):
        g = 0.5 / 0.28209479177387814
        s = Surfel.create([0, 0, 0], sh=[[g, g, g]])
        np.testing.assert_allclose(eval_sh_color(s, [0, 0, 1]), [1, 1, 1], atol=1e-12)

    def test_zero_is_gray(self):
        s = Surfel.create([0, 0, 0], sh=np.zeros((16, 3)))
        np.testing.assert_allclose(eval_sh_color(s, [0.6, 0, 0.8]), [0.5] * 3)

    def test_degree1_polynomial_oracle(self):
        rng = np.random.default_rng(5)
        c1 = 0.4886025119029199
        for _ in range(20):
            sh = rng.normal(size=(4, 3))
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            x, y, z = d
            expect = np.maximum(0.28209479177387814 * sh[0] - c1 * y * sh[1] + c1 * z * sh[2] - c1 * x * sh[3] + 0.5, 0)
            s = Surfel.create([0, 0, 0], sh=sh)
            assert np.max(np.abs(eval_sh_color(s, d) - expect)) < 1e-12

    def test_basis_degree3_orthonormal(self):
        # Monte Carlo over the sphere: integral of Y_i Y_j = delta_ij
        rng = np.random.default_rng(6)
        d = rng.normal(size=(400000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        B = sh_basis(d, 3)
        gram = 4 * np.pi * B.T @ B / len(d)
        np.testing.assert_allclose(gram, np.eye(16), atol=0.02)

    def test_truncation_equals_lower_degree(self):
        rng = np.random.default_rng(7)
        sh = np.zeros((16, 3))
        sh[:4] = rng.normal(size=(4, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        s3 = Surfel.create([0, 0, 0], sh=sh)
        s1 = Surfel.create([0, 0, 0], sh=sh[:4])
        assert np.array_equal(eval_sh_color(s3, d), eval_sh_color(s1, d))


class TestCamera:
    def test_look_at_valid(self):
        cam = Camera.look_at([1, 2, 3], [0, 0, 0])
        cam.validate()
        px, z = cam.project(np.zeros((1, 3)))
        np.testing.assert_allclose(px[0], [cam.cx, cam.cy], atol=1e-9)
        assert z[0] == pytest.approx(math.sqrt(14))

    def test_invalid(self):
        with pytest.raises(ValueError):
            Camera(10, 10, -1, 1, 5, 5).validate()
        with pytest.raises(ValueError):
            Camera(10, 10, 1, 1, 12, 5).validate()
        bad = np.eye(4)
        bad[0, 0] = 2
        with pytest.raises(ValueError):
            Camera(10, 10, 1, 1, 5, 5, bad).validate()


def test_surfelset_activations():
    s = SurfelSet.from_surfels([Surfel.create([0, 0, 0], scale=(2, 3), opacity=0.25)])
    np.testing.assert_allclose(s.scales[0], [2, 3])
    assert s.opacities[0] == pytest.approx(0.25)
    assert SH_C0 == pytest.approx(0.28209479177387814)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=2), st.floats(-30, 30))
def test_activation_ranges(log_scale, raw_op):
    s = SurfelSet.from_surfels([Surfel(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array(log_scale), raw_op,
                                       np.zeros((1, 3)), 0)])
    assert np.all(s.scales > 0)
    assert 0 <= s.opacities[0] <= 1
