"""Independent reference implementations used as test oracles."""

import math

import numpy as np

from surfelsplat.surfel import Camera, Surfel, SurfelSet

Y00 = 0.28209479177387814


def quat_rot(q):
    q = np.asarray(q, dtype=float) / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def ray_hit(mu, q, log_scale, cam, px, py):
    """Ray / surfel-plane intersection by a 3x3 linear solve: returns (u, v, depth) or None."""
    R = quat_rot(q)
    s = np.exp(log_scale)
    Rc = cam.world_to_cam[:3, :3]
    o = -Rc.T @ cam.world_to_cam[:3, 3]
    d = Rc.T @ np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    A = np.column_stack([R[:, 0] * s[0], R[:, 1] * s[1], -d])
    if abs(np.linalg.det(A)) < 1e-14:
        return None
    u, v, t = np.linalg.solve(A, o - mu)
    return u, v, t


def brute_force_render(surfels, cam, near=0.01, cutoff=3.0, lp_sigma=0.7071, alpha_min=1 / 255, eps=1e-6,
                       t_min=0.0):
    """Per-pixel compositing over every surfel, no tiles; stops once T < t_min. Degree-0 colors."""
    n = len(surfels)
    Rc = cam.world_to_cam[:3, :3]
    tc = cam.world_to_cam[:3, 3]
    centers = (Rc @ surfels.mu.T).T + tc
    order = sorted(range(n), key=lambda i: (centers[i, 2], surfels.ids[i]))
    alpha = 1 / (1 + np.exp(-surfels.raw_opacity))
    col = np.maximum(Y00 * surfels.sh[:, 0, :] + 0.5, 0.0)
    H, W = cam.height, cam.width
    out = {k: np.zeros((H, W)) for k in ("depth_mean", "depth_median", "accum")}
    out["color"] = np.zeros((H, W, 3))
    for y in range(H):
        for x in range(W):
            T = 1.0
            c = np.zeros(3)
            wz = ws = 0.0
            med = 0.0
            for i in order:
                hit = ray_hit(surfels.mu[i], surfels.quat[i], surfels.log_scale[i], cam, x, y)
                if hit is None:
                    continue
                u, v, z = hit
                if z <= near or u * u + v * v > cutoff * cutoff:
                    continue
                g = math.exp(-0.5 * (u * u + v * v))
                if lp_sigma and centers[i, 2] > near:
                    cx = cam.fx * centers[i, 0] / centers[i, 2] + cam.cx
                    cy = cam.fy * centers[i, 1] / centers[i, 2] + cam.cy
                    g = max(g, math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * lp_sigma**2)))
                a = alpha[i] * g
                if a < alpha_min:
                    continue
                w = T * a
                if T > 0.5:
                    med = max(med, z)
                c += w * col[i]
                wz += w * z
                ws += w
                T *= 1 - a
                if T < t_min:
                    break
            out["color"][y, x] = c
            out["accum"][y, x] = ws
            out["depth_mean"][y, x] = wz / (ws + eps) if ws > 0 else 0.0
            out["depth_median"][y, x] = med
    return out


def depth_distortion_pairs(w, z):
    return sum(w[i] * w[j] * abs(z[i] - z[j]) for i in range(len(w)) for j in range(len(w)))


def sphere_depth(cam, r):
    """Camera z-depth of the origin-centred sphere at every pixel, 0 on a miss."""
    rays = cam.pixel_rays()  # camera frame, unit z component
    c = cam.to_camera(np.zeros((1, 3)))[0]
    a = np.sum(rays * rays, axis=-1)
    b = -2 * rays @ c
    disc = b * b - 4 * a * (c @ c - r * r)
    t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    return np.where(disc > 0, t, 0.0)


def random_surfel(rng, degree=0):
    return Surfel.create(rng.uniform(-1, 1, 3), quat=rng.normal(size=4), scale=rng.uniform(0.2, 2.0, 2),
                         opacity=rng.uniform(0.1, 0.9), sh=rng.normal(size=((degree + 1) ** 2, 3)))


def quat_matrix_oracle(q):
    """Rotation from a unit quaternion via the Rodrigues formula (independent path)."""
    q = np.asarray(q, dtype=float) / np.linalg.norm(q)
    w, v = q[0], q[1:]
    angle = 2 * math.atan2(np.linalg.norm(v), w)
    if np.linalg.norm(v) < 1e-15:
        return np.eye(3)
    k = v / np.linalg.norm(v)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def ray_plane_oracle(s: Surfel, cam: Camera, px):
    """Intersect the pixel ray with the surfel plane numerically and express the hit in (u, v)."""
    R = quat_matrix_oracle(s.quat)
    sc = np.exp(s.log_scale)
    d_cam = np.array([(px[0] - cam.cx) / cam.fx, (px[1] - cam.cy) / cam.fy, 1.0])
    Rc = cam.world_to_cam[:3, :3]
    o = -Rc.T @ cam.world_to_cam[:3, 3]
    d = Rc.T @ d_cam
    A = np.column_stack([R[:, 0] * sc[0], R[:, 1] * sc[1], -d])
    u, v, t = np.linalg.solve(A, o - s.mu)
    return u, v, t  # d has unit camera z, so t is the camera depth


def random_scene(seed, n=None, size=16):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 9))
    cam = Camera.look_at([0.3, -3.5, 1.5], [0, 0, 0], width=size, height=size, fov_x_deg=40)
    s = SurfelSet(rng.uniform(-0.6, 0.6, (n, 3)), rng.normal(size=(n, 4)), np.log(rng.uniform(0.1, 0.6, (n, 2))),
                  rng.uniform(-2, 3, n), rng.normal(scale=0.5, size=(n, 1, 3)), rng.permutation(100)[:n])
    return s, cam


def sh1_colors(surfels, cam):
    c0, c1 = 0.28209479177387814, 0.4886025119029199
    d = surfels.mu - cam.center
    x, y, z = (d / np.linalg.norm(d, axis=1, keepdims=True)).T
    basis = np.stack([np.full_like(x, c0), -c1 * y, c1 * z, -c1 * x], axis=1)
    return np.maximum(np.einsum("nk,nkc->nc", basis, surfels.sh[:, :4]) + 0.5, 0.0)


def eoracle(surfels, cams, gts, colors, near=0.01, cutoff=3.0):
    """E_i by looping over every (surfel, view, pixel) triple, given each view's surfel colors."""
    E = np.zeros(len(surfels))
    for i in range(len(surfels)):
        for cam, gt, cols in zip(cams, gts, colors):
            col = cols[i]
            for py in range(cam.height):
                for px in range(cam.width):
                    hit = ray_hit(surfels.mu[i], surfels.quat[i], surfels.log_scale[i], cam, px, py)
                    if hit is None:
                        continue
                    u, v, t = hit
                    if t > near and u * u + v * v <= cutoff * cutoff:
                        E[i] += abs(col[0] - gt[py, px, 0]) + abs(col[1] - gt[py, px, 1]) + abs(col[2] - gt[py, px, 2])
    return E


def two_view_scene(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    s = SurfelSet(rng.uniform(-0.6, 0.6, (n, 3)), rng.normal(size=(n, 4)), np.log(rng.uniform(0.05, 0.4, (n, 2))),
                  rng.uniform(-3, 3, n), rng.normal(scale=0.4, size=(n, 4, 3)), rng.permutation(50)[:n],
                  active_degree=1)
    cams = [Camera.look_at([0.3, -3.5, 1.5], [0, 0, 0], width=12, height=12, fov_x_deg=40),
            Camera.look_at([2.8, 1.0, 2.0], [0, 0, 0], width=12, height=12, fov_x_deg=40)]
    gts = [rng.uniform(size=(12, 12, 3)) for _ in cams]
    return s, cams, gts
