import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from tinerf.autodiff import Graph, ParameterTape, grad_check
from tinerf.data import look_at
from tinerf.render import (Camera, OccupancyGrid, Rays, Samples, composite, composite_np,
                           composite_weights, generate_rays, importance_samples, intersect_aabb,
                           march_samples, occupancy_skip, skip_bound, stratified_samples)


def _rays(n=1, near=0.0, far=1.0):
    o = np.zeros((n, 3))
    d = np.tile([0.0, 0.0, 1.0], (n, 1))
    return Rays(o, d, np.full(n, near), np.full(n, far), np.zeros(n), np.zeros(n, dtype=np.int64),
                np.arange(n))


# -- rays ---------------------------------------------------------------------------
def test_identity_pose_center_ray():
    cam = Camera(5, 5, 3.0)  # odd size: pixel (2, 2) is centered on the principal point
    r = generate_rays(cam, np.eye(4), [[2, 2]])
    assert np.allclose(r.dirs[0], [0.0, 0.0, -1.0], atol=1e-15)
    assert np.allclose(r.origins[0], 0.0)


def test_center_ray_follows_pose():
    pose = look_at([3.0, 1.0, 2.0])
    r = generate_rays(Camera(5, 5, 4.0), pose, [[2, 2]])
    assert np.allclose(r.dirs[0], -pose[:3, 2], atol=1e-12)
    assert np.allclose(r.origins[0], pose[:3, 3])


def test_corner_pixel_matches_projection_oracle():
    cam = Camera(8, 6, 5.0)
    pose = look_at([1.0, -3.0, 2.0], target=[0.1, 0.2, -0.3])
    R, o = pose[:3, :3], pose[:3, 3]
    flip = np.diag([1.0, -1.0, -1.0])  # to a y-down, z-forward camera
    P = cam.intrinsics() @ flip @ np.hstack([R.T, (-R.T @ o)[:, None]])
    for col, row in [(0, 0), (7, 0), (0, 5), (7, 5)]:
        r = generate_rays(cam, pose, [[col, row]])
        X = np.append(r.origins[0] + 2.5 * r.dirs[0], 1.0)
        p = P @ X
        assert np.allclose(p[:2] / p[2], [col + 0.5, row + 0.5], atol=1e-10)
        assert abs(np.linalg.norm(r.dirs[0]) - 1) < 1e-14


def test_non_rigid_pose_rejected():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        generate_rays(Camera(2, 2, 1.0), bad)
    with pytest.raises(ValueError):
        generate_rays(Camera(2, 2, 1.0), np.zeros((4, 4)))


# -- stratified / importance ------------------------------------------------------------------
def test_stratified_bins_and_reproducibility():
    rays = _rays(3, 2.0, 6.0)
    s = stratified_samples(rays, 8, np.random.default_rng(0))
    d = s.depths.reshape(3, 8)
    lo = 2.0 + np.arange(8) * 0.5
    assert np.all((d >= lo) & (d <= lo + 0.5))
    s2 = stratified_samples(rays, 8, np.random.default_rng(0))
    assert np.array_equal(s.depths, s2.depths)
    one = stratified_samples(rays, 1, np.random.default_rng(1))
    assert np.all((one.depths >= 2.0) & (one.depths <= 6.0))
    with pytest.raises(ValueError):
        stratified_samples(rays, 0)


def test_importance_concentrated_weights():
    rays = _rays(2, 0.0, 1.0)
    coarse = stratified_samples(rays, 10)
    w = np.zeros((2, 10))
    w[:, 6] = 1.0
    s = importance_samples(rays, coarse, w, 32, np.random.default_rng(2))
    d = s.depths.reshape(2, 42)
    assert np.all(np.diff(d, axis=1) >= 0)
    fine = np.setdiff1d(d[0], coarse.depths.reshape(2, 10)[0])
    assert np.all((fine >= 0.6) & (fine <= 0.7))
    assert np.all(s.deltas > 0)


def test_importance_uniform_weights_chi_square():
    rays = _rays(1, 0.0, 1.0)
    coarse = stratified_samples(rays, 16)
    s = importance_samples(rays, coarse, np.ones((1, 16)), 4000, np.random.default_rng(3))
    fine = np.sort(s.depths)
    counts, _ = np.histogram(fine, bins=20, range=(0.0, 1.0))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_importance_zero_weights_fall_back():
    rays = _rays(1, 0.0, 1.0)
    coarse = stratified_samples(rays, 4)
    s = importance_samples(rays, coarse, np.zeros((1, 4)), 8)
    assert np.all(np.isfinite(s.depths)) and len(s) == 12


# -- composite -------------------------------------------------------------------------------
def test_vacuum_and_opaque_front():
    rays = _rays(1)
    s = stratified_samples(rays, 4)
    rgb = np.random.default_rng(4).random((4, 3))
    color, depth, opac = composite_np(np.zeros(4), rgb, s)
    assert np.all(color == 0) and opac[0] == 0 and depth[0] == 0
    color, _, opac = composite_np(np.array([1e30, 1.0, 1.0, 1.0]), rgb, s)
    assert np.allclose(color[0], rgb[0]) and opac[0] == 1.0


def _uniform_samples(N, terminal=None):
    rays = _rays(1, 0.0, 1.0)
    return stratified_samples(rays, N, terminal_delta=1.0 / N if terminal is None else terminal)


def test_homogeneous_closed_form():
    sigma, c = 2.5, np.array([0.2, 0.7, 0.4])
    s = _uniform_samples(256)
    color, _, opac = composite_np(np.full(256, sigma), np.tile(c, (256, 1)), s)
    assert np.allclose(color[0], c * (1 - math.exp(-sigma)), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=12), st.integers(0, 2 ** 31))
def test_energy_bound_and_monotone_transmittance(sig, seed):
    sigma = np.asarray(sig)
    N = sigma.size
    s = stratified_samples(_rays(1, 0.0, 2.0), N, np.random.default_rng(seed))
    T, _, w, _ = composite_weights(sigma, s)
    assert np.all(np.diff(T[0]) <= 0.0)
    assert 0.0 <= w.sum() <= 1.0 + 1e-12


def _ramp_oracle(a, b, c0, c1, L=1.0):
    tau = lambda u: a * u + 0.5 * b * u * u
    f = lambda u: (a + b * u) * math.exp(-tau(u))
    return np.array([integrate.quad(lambda u: f(u) * (c0[k] + c1[k] * u), 0, L, epsabs=1e-14, epsrel=1e-13)[0]
                     for k in range(3)])


def test_linear_ramp_quadrature_decays():
    a, b = 0.5, 3.0
    c0, c1 = np.array([0.1, 0.9, 0.5]), np.array([0.8, -0.7, 0.2])
    ref = _ramp_oracle(a, b, c0, c1)
    errs = []
    for N in (16, 32, 64, 128, 256):
        s = _uniform_samples(N)
        u = s.depths
        color, _, _ = composite_np(a + b * u, c0 + c1 * u[:, None], s)
        errs.append(np.max(np.abs(color[0] - ref)))
    assert errs[-1] < 1e-3
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))


def test_composite_gradient_two_sample_ray():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        tape = ParameterTape()
        tape.add("s", (2,), rng.uniform(0.1, 3.0, 2))
        tape.add("c", (2, 3), rng.random((2, 3)))
        samples = stratified_samples(_rays(1, 2.0, 3.0), 2, rng, terminal_delta=0.7)
        bg = rng.random(3)
        tgt, wd, wo = rng.random(3), rng.normal(), rng.normal()

        def f(g):
            col, dep, op = composite(g, g.param("s"), g.param("c"), samples, bg)
            loss = g.mse(col, tgt[None])
            return g.add(loss, g.add(g.scale(g.sum(dep), wd), g.scale(g.sum(op), wo)))

        worst = max(worst, grad_check(f, tape, range(8)))
    assert worst < 1e-4


def test_composite_matches_numpy_and_ragged_rays():
    rng = np.random.default_rng(6)
    rays = _rays(3, 0.0, 1.0)
    s = stratified_samples(rays, 5, rng)
    s = s.select(np.array([1, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 1, 1, 1, 1], dtype=bool))
    sigma, rgb = rng.random(len(s)) * 4, rng.random((len(s), 3))
    g = Graph(ParameterTape())
    col, dep, op = composite(g, Graph.const(sigma), Graph.const(rgb), s, (1.0, 1.0, 1.0))
    c2, d2, o2 = composite_np(sigma, rgb, s, (1.0, 1.0, 1.0))
    assert np.array_equal(col.value, c2) and np.array_equal(dep.value, d2) and np.array_equal(op.value, o2)


def test_empty_sample_set_composites_background():
    s = Samples(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64), 2)
    color, depth, opac = composite_np(np.zeros(0), np.zeros((0, 3)), s)
    assert color.shape == (2, 3) and np.all(color == 0) and np.all(opac == 0)


# -- marching + occupancy --------------------------------------------------------------
def test_march_samples_inside_box():
    rays = generate_rays(Camera(8, 8, 8.0), look_at([0.0, -4.0, 0.5]), near=2.0, far=6.0)
    aabb = np.array([[-1.0] * 3, [1.0] * 3])
    s = march_samples(rays, 4.0 / 256, aabb)
    assert np.all(np.abs(s.positions) <= 1.0 + 1e-9)
    u0, u1 = intersect_aabb(rays, aabb)
    hit = u1 > u0
    assert np.all(s.counts()[~hit] == 0)
    expected = np.floor((u1[hit] - 2.0) / (4.0 / 256) - 0.5) - np.ceil((u0[hit] - 2.0) / (4.0 / 256) - 0.5) + 1
    assert np.all(np.abs(s.counts()[hit] - expected) <= 1)


def test_occupancy_decay_and_zero_field():
    grid = OccupancyGrid([[-1.0] * 3, [1.0] * 3], resolution=4)
    assert grid.occupancy == 1.0
    grid.update(lambda x, t: np.zeros(len(x)), np.random.default_rng(0))
    assert grid.occupancy == 0.0
    grid.cache[:] = 0.5
    grid.update(lambda x, t: np.zeros(len(x)), np.random.default_rng(1))
    assert np.allclose(grid.cache, 0.5 * 0.99)


def test_occupancy_marks_late_cell_at_expected_rate():
    # density only for t > 0.9 inside one cell; hit rate p = 0.1 per update
    k, trials, hits = 5, 2000, 0
    rng = np.random.default_rng(7)
    for _ in range(trials):
        grid = OccupancyGrid([[0.0] * 3, [1.0] * 3], resolution=1)
        for _ in range(k):
            grid.update(lambda x, t: np.where(t > 0.9, 1.0, 0.0), rng)
        hits += bool(grid.bits[0])
    p = 1 - 0.9 ** k
    assert abs(hits / trials - p) < 4 * math.sqrt(p * (1 - p) / trials)


def test_occupancy_skip_membership():
    rng = np.random.default_rng(8)
    grid = OccupancyGrid([[-1.0] * 3, [1.0] * 3], resolution=4)
    rays = generate_rays(Camera(6, 6, 6.0), look_at([0.3, -4.0, 0.8]), near=2.0, far=6.0)
    s = march_samples(rays, 0.05, grid.aabb)
    assert occupancy_skip(s, grid) is s  # fully occupied: identity
    grid.cache = rng.random(64) * 2e-4
    grid.bits = grid.cache > grid.threshold
    kept = occupancy_skip(s, grid)
    brute = [i for i, p in enumerate(s.positions)
             if grid.bits[(min(int((p[2] + 1) * 2), 3) * 4 + min(int((p[1] + 1) * 2), 3)) * 4
                          + min(int((p[0] + 1) * 2), 3)]]
    assert np.array_equal(kept.depths, s.depths[brute])
    grid.bits[:] = False
    empty = occupancy_skip(s, grid)
    assert len(empty) == 0
    color, _, _ = composite_np(np.zeros(0), np.zeros((0, 3)), empty)
    assert np.all(color == 0)


def test_threshold_zero_never_skips_density():
    grid = OccupancyGrid([[-1.0] * 3, [1.0] * 3], resolution=8, threshold=0.0)
    # tiny but nonzero density on a cell-aligned half space
    field = lambda x, t: np.where(x[..., 0] > 0.0, 1e-9, 0.0)
    grid.update(field, np.random.default_rng(9))
    pts = np.random.default_rng(10).uniform(-1, 1, (5000, 3))
    dense = field(pts, None) > 0
    assert np.all(grid.occupied(pts[dense]))


def test_skip_bound_holds_on_random_rays():
    rng = np.random.default_rng(11)
    for _ in range(200):
        N = 12
        s = stratified_samples(_rays(1, 0.0, 1.0), N, rng)
        sigma = rng.exponential(1.0, N) * rng.integers(0, 2, N)
        rgb = rng.random((N, 3))
        drop = rng.random(N) < 0.3
        full, _, _ = composite_np(sigma, rgb, s)
        part, _, _ = composite_np(sigma[~drop], rgb[~drop], s.select(~drop))
        tau = float(np.sum(sigma[drop] * s.deltas[drop]))
        assert np.max(np.abs(full - part)) <= skip_bound(tau) + 1e-12
