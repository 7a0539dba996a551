"""Gaussians, deformation, projection, rasterization, losses, densification and fitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from fourd import autodiff as ad
from fourd.errors import InputError
from fourd.geometry import CameraPose, DepthMap, look_at
from fourd.splat import (
    DeformationField,
    Gaussians,
    LossWeights,
    OptimizeConfig,
    SceneState,
    Splats2D,
    arap_loss,
    deform,
    densify_prune,
    init_from_depth,
    optimize,
    project_gaussians,
    rasterize,
    rasterize_grad,
    recon_loss,
    render,
    rot_loss,
    ssim,
)
from fourd.splat.gaussians import logit, sigmoid
from fourd.splat.losses import deformation_rot_loss
from fourd.splat.raster import DILATION, composite_weights, covariance_3d, rasterize_dense

from fdcheck import central_difference, relative_error


def axis_camera(f=50.0, size=32):
    """Camera at the origin looking down +z."""
    return CameraPose.from_extrinsic(np.eye(3), np.zeros(3), f, f, size / 2, size / 2, size, size)


def random_splats(rng, n, H, W, dtype=np.float64):
    means = rng.uniform([2, 2], [W - 2, H - 2], (n, 2))
    sx, sy = rng.uniform(1.0, 3.0, (2, n))
    rho = rng.uniform(-0.6, 0.6, n)
    cov = np.stack([sx * sx, rho * sx * sy, sy * sy], axis=1)
    return Splats2D(
        means.astype(dtype),
        cov.astype(dtype),
        rng.uniform(0.2, 0.9, n).astype(dtype),
        rng.uniform(0, 1, (n, 3)).astype(dtype),
        rng.permutation(n) + rng.uniform(0, 0.5, n),
    )


def small_scene(n=30, n_frames=4, seed=0):
    rng = np.random.default_rng(seed)
    g = Gaussians.isotropic(rng.uniform(-0.5, 0.5, (n, 3)), 0.08, rng.uniform(0, 1, (n, 3)), opacity=0.6)
    return SceneState(g, DeformationField(n_frames, hidden=16, seed=seed), extent=1.0)


def last_layer(field: DeformationField) -> str:
    return f"deform.l{field.n_layers - 1}"


class TestDeform:
    def test_identity_at_init(self):
        scene = small_scene()
        for t in range(1, scene.n_frames + 1):
            d = deform(scene, t)
            assert np.array_equal(d.means, scene.gaussians.means)
            assert np.array_equal(d.log_scales, scene.gaussians.log_scales)
            assert np.allclose(d.quats, scene.gaussians.quats, atol=1e-15)

    def test_constant_translation(self):
        scene = small_scene()
        scene.deformation.params[last_layer(scene.deformation) + ".b"][0] = 1.0
        for t in (1, 3):
            assert np.allclose(deform(scene, t).means - scene.gaussians.means, [1.0, 0.0, 0.0], atol=1e-15)

    def test_nonzero_field_depends_on_time(self):
        scene = small_scene()
        key = last_layer(scene.deformation) + ".w"
        scene.deformation.params[key] = np.random.default_rng(1).standard_normal(scene.deformation.params[key].shape)
        assert np.abs(deform(scene, 1).means - deform(scene, 2).means).max() > 1e-6

    def test_quaternions_renormalized(self):
        scene = small_scene()
        scene.deformation.params[last_layer(scene.deformation) + ".b"][3:7] = [0.5, 0.2, 0.0, 0.1]
        q = deform(scene, 2).quats
        assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-14)

    @pytest.mark.parametrize("t", [0, 5, 1.5, -1])
    def test_time_out_of_range(self, t):
        with pytest.raises(InputError):
            deform(small_scene(), t)

    def test_identity_start_renders_equal_for_all_t(self):
        scene = small_scene()
        cam = look_at([0, 0, -3], [0, 0, 0], fx=40, fy=40, cx=16, cy=16, width=32, height=32)
        first = render(scene, cam, 1)
        assert first.max() > 0
        for t in range(2, scene.n_frames + 1):
            assert np.array_equal(render(scene, cam, t), first)


class TestProjection:
    def test_isotropic_on_axis(self):
        cam = axis_camera()
        sigma, z = 0.01, 2.0
        p = project_gaussians(np.array([[0.0, 0.0, z]]), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), np.log(sigma)), cam)
        expected = (cam.fx * sigma / z) ** 2
        cov = p.cov2d.data[0]
        assert abs(cov[0] - DILATION - expected) < 0.01 * expected
        assert abs(cov[2] - DILATION - expected) < 0.01 * expected
        assert abs(cov[1]) < 1e-12
        assert np.allclose(p.means2d.data[0], [cam.cx, cam.cy])
        assert p.depth[0] == z

    def test_identity_rotation_gives_diagonal_3d_covariance(self):
        s = np.array([[0.1, -0.4, 0.7]])
        cov = covariance_3d(ad.Tensor(np.array([[1.0, 0, 0, 0]])), ad.Tensor(s)).data[0]
        assert np.allclose(cov, np.diag(np.exp(2 * s[0])), atol=1e-15)

    def test_rotated_covariance(self):
        q = np.array([[0.3, -0.2, 0.9, 0.1]])
        s = np.array([[0.2, -0.5, 0.1]])
        R = Rotation.from_quat(np.roll(q[0], -1)).as_matrix()
        cov = covariance_3d(ad.Tensor(q), ad.Tensor(s)).data[0]
        assert np.allclose(cov, R @ np.diag(np.exp(2 * s[0])) @ R.T, atol=1e-14)

    def test_doubling_depth_halves_std(self):
        cam = axis_camera()
        q, s = np.array([[1.0, 0, 0, 0]]), np.full((1, 3), np.log(0.5))
        near = project_gaussians(np.array([[0.0, 0.0, 2.0]]), q, s, cam).cov2d.data[0, 0]
        far = project_gaussians(np.array([[0.0, 0.0, 4.0]]), q, s, cam).cov2d.data[0, 0]
        assert abs(np.sqrt(near) / np.sqrt(far) - 2.0) < 0.02
        assert abs(np.sqrt(near - DILATION) / np.sqrt(far - DILATION) - 2.0) < 1e-12

    def test_behind_camera_is_culled(self):
        cam = axis_camera()
        means = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0], [0.0, 0.0, 0.01]])
        p = project_gaussians(means, np.tile([1.0, 0, 0, 0], (3, 1)), np.zeros((3, 3)), cam)
        assert list(p.index) == [0]

    def test_projection_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        cam = look_at([0.3, -0.2, -3], [0, 0, 0], fx=30, fy=32, cx=16, cy=15, width=32, height=32)
        arrays = [rng.uniform(-0.5, 0.5, (4, 3)), rng.standard_normal((4, 4)), rng.uniform(-2, -1, (4, 3))]
        W1, W2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))

        def objective(*xs):
            p = project_gaussians(*xs, cam)
            return (p.means2d * W1).sum() + (p.cov2d * W2).sum()

        tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        objective(*tensors).backward()
        for t, a in zip(tensors, arrays):
            fd = central_difference(lambda: objective(*arrays).data, a, 1e-6)
            assert relative_error(t.grad, fd) < 1e-6


class TestRasterize:
    def test_empty_is_black(self):
        img = rasterize(Splats2D(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0)), 5, 7)
        assert img.shape == (5, 7, 3) and not img.any()

    def test_single_gaussian(self):
        cov = np.array([[2.0, 0.5, 1.0]])
        s = Splats2D(np.array([[4.5, 3.5]]), cov, np.array([0.9]), np.array([[1.0, 0.0, 0.0]]), np.array([1.0]))
        img = rasterize(s, 8, 8)
        assert np.allclose(img[3, 4], [0.9, 0, 0], atol=1e-15)
        # pixel (row 4, col 6) has center (6.5, 4.5), offset (2, 1) from the mean
        d = np.array([2.0, 1.0])
        inv = np.linalg.inv([[2.0, 0.5], [0.5, 1.0]])
        expected = 0.9 * np.exp(-0.5 * d @ inv @ d)
        assert abs(img[4, 6, 0] - expected) < 1e-14
        assert not img[..., 1:].any()

    @pytest.mark.parametrize("order", [[0, 1], [1, 0]])
    def test_two_stacked(self, order):
        s = Splats2D(
            np.array([[2.5, 2.5], [2.5, 3.0]]),
            np.array([[1.0, 0.0, 1.0], [2.0, 0.0, 2.0]]),
            np.array([0.5, 0.8]),
            np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            np.array([1.0, 2.0]),
        ).permuted(order)
        img = rasterize(s, 5, 5)
        w_back = 0.8 * np.exp(-0.5 * 0.25 / 2.0)
        assert np.allclose(img[2, 2], [0.5, 0.5 * w_back, 0.0], atol=1e-15)

    def test_background_fills_transmittance(self):
        s = Splats2D(np.array([[3.5, 3.5]]), np.array([[1.0, 0.0, 1.0]]), np.array([0.4]), np.array([[1.0, 1.0, 1.0]]), np.array([1.0]))
        img, alpha = rasterize(s, 7, 7, background=0.5, return_alpha=True)
        assert np.allclose(img[3, 3], 0.4 + 0.6 * 0.5)
        # the corner pixel lies beyond the cutoff radius
        assert img[0, 0, 0] == 0.5 and alpha[0, 0] == 0.0 and abs(alpha[3, 3] - 0.4) < 1e-15

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 25))
    def test_matches_dense_reference(self, seed, n):
        s = random_splats(np.random.default_rng(seed), n, 18, 22)
        assert np.abs(rasterize(s, 18, 22) - rasterize_dense(s, 18, 22)).max() < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_weights_and_transmittance_sum_to_one(self, seed):
        s = random_splats(np.random.default_rng(seed), 12, 16, 16)
        total, T = composite_weights(s, 16, 16)
        assert np.abs(total + T - 1.0).max() < 1e-9

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_input_order_does_not_change_image(self, seed):
        rng = np.random.default_rng(seed)
        s = random_splats(rng, 10, 16, 16)
        img = rasterize(s, 16, 16)
        assert np.array_equal(rasterize(s.permuted(rng.permutation(10)), 16, 16), img)

    def test_output_dtype_follows_colors(self):
        s = random_splats(np.random.default_rng(0), 3, 8, 8, dtype=np.float32)
        assert rasterize(s, 8, 8).dtype == np.float32

    def test_opacity_of_one_is_rejected(self):
        s = Splats2D(np.array([[1.5, 1.5]]), np.array([[1.0, 0.0, 1.0]]), np.array([1.0]), np.ones((1, 3)), np.array([1.0]))
        with pytest.raises(InputError):
            rasterize(s, 3, 3)

    def test_degenerate_covariance_is_rejected(self):
        s = Splats2D(np.array([[1.5, 1.5]]), np.array([[1.0, 1.0, 1.0]]), np.array([0.5]), np.ones((1, 3)), np.array([1.0]))
        with pytest.raises(InputError):
            rasterize(s, 3, 3)


class TestRasterizeGradient:
    H = W = 16

    @pytest.fixture
    def instance(self):
        rng = np.random.default_rng(11)
        return random_splats(rng, 5, self.H, self.W), rng.standard_normal((self.H, self.W, 3))

    def fd_gradients(self, s, g_img):
        fields = {k: getattr(s, k).astype(np.float64).copy() for k in ("means", "cov", "opacity", "colors")}
        ref = Splats2D(fields["means"], fields["cov"], fields["opacity"], fields["colors"], s.depth)

        def objective():
            return np.sum(g_img * rasterize(ref, self.H, self.W, background=0.25))

        return {k: central_difference(objective, getattr(ref, k), 1e-4) for k in fields}

    def test_float64(self, instance):
        s, g_img = instance
        analytic = rasterize_grad(s, self.H, self.W, g_img, background=0.25)
        for k, fd in self.fd_gradients(s, g_img).items():
            assert relative_error(analytic[k], fd) < 1e-6, k

    def test_float32(self, instance):
        s64, g_img = instance
        s = Splats2D(*(getattr(s64, k).astype(np.float32) for k in ("means", "cov", "opacity", "colors")), s64.depth)
        analytic = rasterize_grad(s, self.H, self.W, g_img.astype(np.float32), background=0.25)
        assert all(v.dtype == np.float32 for v in analytic.values())
        for k, fd in self.fd_gradients(s, g_img).items():
            assert relative_error(analytic[k], fd) < 1e-3, k

    def test_tape_op_agrees(self, instance):
        from fourd.splat.raster import rasterize_op

        s, g_img = instance
        ts = [ad.Tensor(getattr(s, k).copy(), requires_grad=True) for k in ("means", "cov", "opacity", "colors")]
        (rasterize_op(*ts, s.depth, self.H, self.W) * g_img).sum().backward()
        direct = rasterize_grad(s, self.H, self.W, g_img)
        for t, k in zip(ts, ("means", "cov", "opacity", "colors")):
            assert np.allclose(t.grad, direct[k], atol=1e-14)


class TestReconLoss:
    def test_equal_images(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        loss, grad = recon_loss(img, img)
        assert abs(loss) < 1e-12 and np.abs(grad).max() < 1e-12

    def test_constant_offset(self):
        loss, _ = recon_loss(np.full((8, 8, 3), 0.7), np.full((8, 8, 3), 0.2), lambda_ssim=0.0)
        assert abs(loss - 0.5) < 1e-15

    def test_ssim_self(self):
        img = np.random.default_rng(1).uniform(size=(12, 10, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_ssim_range(self):
        rng = np.random.default_rng(2)
        assert -1.0 <= ssim(rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))) < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            recon_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        r, t = rng.uniform(size=(2, 9, 9, 3))
        _, grad = recon_loss(r, t, 0.2)
        fd = central_difference(lambda: recon_loss(r, t, 0.2)[0], r, 1e-6)
        assert relative_error(grad, fd) < 1e-6


class TestArap:
    def test_three_point_scaling(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2.0, 0]])
        loss, _ = arap_loss(pts, 2 * pts, k_neighbors=2)
        # six directed edges with lengths 1, 1, 2, 2, sqrt5, sqrt5 all doubled
        assert abs(loss - (1 + 1 + 4 + 4 + 5 + 5) / 6) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rigid_motion_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, (20, 3))
        R = Rotation.random(random_state=seed).as_matrix()
        loss, grad = arap_loss(pts, pts @ R.T + rng.uniform(-5, 5, 3))
        assert loss < 1e-10 and np.abs(grad).max() < 1e-5

    def test_too_few_points(self):
        with pytest.raises(InputError):
            arap_loss(np.zeros((8, 3)), np.zeros((8, 3)), k_neighbors=8)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, (12, 3))
        moved = pts + 0.1 * rng.standard_normal(pts.shape)
        _, grad = arap_loss(pts, moved, 4)
        fd = central_difference(lambda: arap_loss(pts, moved, 4)[0], moved, 1e-6)
        assert relative_error(grad, fd) < 1e-7


class TestRotLoss:
    def test_constant(self):
        dq = np.tile(np.random.default_rng(0).standard_normal((1, 5, 4)), (4, 1, 1))
        assert rot_loss(dq)[0] == 0.0

    def test_zero_deformation(self):
        scene = small_scene()
        loss, grads = deformation_rot_loss(scene.deformation, scene.gaussians.means, [1, 2, 3, 4])
        assert loss == 0.0
        assert set(grads) == set(scene.deformation.params)

    def test_alternating_sign(self):
        delta = np.array([0.1, -0.2, 0.05, 0.3])
        dq = np.stack([delta, -delta, delta])[:, None, :]
        assert abs(rot_loss(dq)[0] - 4 * np.sum(delta**2)) < 1e-15

    def test_needs_two_timestamps(self):
        with pytest.raises(InputError):
            rot_loss(np.zeros((1, 3, 4)))

    def test_gradient_matches_finite_differences(self):
        dq = np.random.default_rng(5).standard_normal((3, 4, 4))
        _, grad = rot_loss(dq)
        assert relative_error(grad, central_difference(lambda: rot_loss(dq)[0], dq, 1e-6)) < 1e-8


def crowd(n, opacity, seed=0):
    rng = np.random.default_rng(seed)
    g = Gaussians.isotropic(rng.uniform(-1, 1, (n, 3)), 0.001, rng.uniform(0, 1, (n, 3)))
    g.opacity_logits = logit(np.broadcast_to(opacity, (n,))).astype(np.float64)
    return SceneState(g, DeformationField(2, hidden=4, depth=1), extent=1.0)


class TestDensify:
    def test_cap_stops_growth(self):
        scene = crowd(120_000, 0.5)
        scene.grad_accum[:] = 1.0
        scene.grad_count[:] = 1.0
        stats = densify_prune(scene)
        assert stats.cloned == stats.split == 0 and len(scene) == 120_000

    def test_growth_fills_to_the_cap(self):
        scene = crowd(119_990, 0.5)
        scene.grad_accum[:] = 1.0
        scene.grad_count[:] = 1.0
        densify_prune(scene)
        assert len(scene) == 120_000

    def test_faint_gaussians_pruned_above_trigger(self):
        opacity = np.full(90_000, 0.5)
        opacity[::6] = 0.01
        scene = crowd(90_000, opacity)
        keep = scene.gaussians.means[opacity > 0.01]
        stats = densify_prune(scene)
        assert stats.pruned == 15_000 and len(scene) == 75_000
        assert np.array_equal(scene.gaussians.means, keep)

    def test_no_pruning_below_trigger(self):
        scene = crowd(1000, 0.01)
        assert densify_prune(scene).pruned == 0 and len(scene) == 1000

    def test_quiet_scene_unchanged(self):
        scene = crowd(500, 0.3)
        scene.grad_accum[:] = 1e-5
        scene.grad_count[:] = 1.0
        before = {k: v.copy() for k, v in scene.gaussians.arrays().items()}
        densify_prune(scene)
        assert all(np.array_equal(before[k], v) for k, v in scene.gaussians.arrays().items())
        assert not scene.grad_accum.any() and not scene.grad_count.any()

    @pytest.mark.parametrize("seed", [1, 2])
    def test_prunes_exactly_the_faint(self, seed):
        rng = np.random.default_rng(seed)
        scene = crowd(81_000, rng.uniform(0.01, 0.02, 81_000), seed)
        op = sigmoid(scene.gaussians.opacity_logits)
        kept = scene.gaussians.means[op >= 0.015]
        densify_prune(scene)
        assert np.array_equal(scene.gaussians.means, kept)
        assert sigmoid(scene.gaussians.opacity_logits).min() >= 0.015

    def test_clone_and_split(self):
        scene = crowd(10, 0.5)
        scene.gaussians.log_scales[5:] = np.log(0.5)
        scene.grad_accum[[0, 7]] = 1.0
        scene.grad_count[:] = 1.0
        stats = densify_prune(scene, rng=np.random.default_rng(0))
        assert (stats.cloned, stats.split) == (1, 1)
        assert len(scene) == 10 + 1 + 1
        assert np.allclose(scene.gaussians.log_scales[-2:], np.log(0.5) - np.log(1.6))

    def test_cap_on_construction(self):
        with pytest.raises(InputError):
            crowd(120_001, 0.5)


def pixel_center_camera(size=8, f=10.0):
    return CameraPose.from_extrinsic(np.eye(3), np.zeros(3), f, f, size / 2, size / 2, size, size)


class TestInitFromDepth:
    def test_single_pixel(self):
        cam = pixel_center_camera()
        video = np.zeros((1, 1, 8, 8, 3))
        video[0, 0, 2, 5] = [0.2, 0.4, 0.6]
        depth = np.zeros((1, 1, 8, 8))
        depth[0, 0, 2, 5] = 3.0
        scene = init_from_depth(video, depth, [cam])
        assert len(scene) == 1
        expected = np.array([(5.5 - 4) / 10 * 3, (2.5 - 4) / 10 * 3, 3.0])
        assert np.allclose(scene.gaussians.means[0], expected, atol=1e-14)
        assert np.allclose(scene.gaussians.colors[0], [0.2, 0.4, 0.6])
        assert abs(scene.gaussians.opacity[0] - 0.1) < 1e-12

    def test_empty_fusion(self):
        with pytest.raises(InputError):
            init_from_depth(np.zeros((1, 1, 4, 4, 3)), np.zeros((1, 1, 4, 4)), [pixel_center_camera(4)])

    def sphere_views(self, size=24):
        center, radius = np.array([0.0, 0.0, 0.0]), 1.0
        cams = [
            look_at(4 * np.array([np.sin(a), 0.0, np.cos(a)]), center, fx=30, fy=30, cx=size / 2, cy=size / 2, width=size, height=size)
            for a in (0.0, 0.5)
        ]
        depths = []
        for cam in cams:
            rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
            d = np.stack([(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, np.ones_like(rows)], axis=-1)
            o = cam.world_to_camera(center[None])[0]
            # |s d - o|^2 = r^2, nearest root
            a = np.sum(d * d, axis=-1)
            b = -2 * d @ o
            c = o @ o - radius**2
            disc = b * b - 4 * a * c
            s = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
            depths.append(np.where(disc > 0, s, 0.0)[None])
        video = np.full((2, 1, size, size, 3), 0.5)
        return video, np.array(depths), cams, center, radius

    def test_two_views_bounded_by_sum(self):
        video, depths, cams, *_ = self.sphere_views()
        per_view = [len(init_from_depth(video[i : i + 1], depths[i : i + 1], cams[i : i + 1], voxel_size=0.05)) for i in range(2)]
        both = init_from_depth(video, depths, cams, voxel_size=0.05)
        assert len(both) <= sum(per_view)
        assert len(both) >= max(per_view)

    def test_sphere_surface(self):
        video, depths, cams, center, radius = self.sphere_views()
        voxel = 0.05
        scene = init_from_depth(video, depths, cams, voxel_size=voxel)
        dist = np.abs(np.linalg.norm(scene.gaussians.means - center, axis=1) - radius)
        assert dist.max() < 2 * voxel

    def test_accepts_depth_maps(self):
        cam = pixel_center_camera(4)
        valid = np.zeros((4, 4), bool)
        valid[1, 1] = True
        scene = init_from_depth(np.ones((1, 2, 4, 4, 3)), [[DepthMap(np.full((4, 4), 2.0), valid)]], [cam])
        assert len(scene) == 1 and scene.n_frames == 2


class TestOptimize:
    def test_ground_truth_is_a_fixed_point(self):
        scene = small_scene(n=25, n_frames=2, seed=4)
        cams = [
            look_at([np.sin(a) * 3, 0, -np.cos(a) * 3], [0, 0, 0], fx=24, fy=24, cx=12, cy=12, width=24, height=24)
            for a in (0.0, 1.0)
        ]
        videos = np.array([[render(scene, cam, t) for t in (1, 2)] for cam in cams])
        before = {k: v.copy() for k, v in scene.parameters().items()}
        weights = LossWeights(ssim=0.2, fmd=0.0, arap=0.0, rot=0.0)
        hist = optimize(scene, videos, cams, weights=weights, iters=100, seed=0, config=OptimizeConfig(densify_from=10_000))
        assert max(hist.loss) < 1e-12
        drift = max(np.abs(scene.parameters()[k] - v).max() for k, v in before.items())
        assert drift < 1e-6

    def test_fits_a_colour_change(self):
        scene = small_scene(n=25, n_frames=1, seed=5)
        cam = look_at([0, 0, -3], [0, 0, 0], fx=24, fy=24, cx=12, cy=12, width=24, height=24)
        target = render(scene, cam, 1)[None, None]
        scene.gaussians.colors[:] = 0.5
        start = recon_loss(render(scene, cam, 1), target[0, 0])[0]
        optimize(scene, target, [cam], weights=LossWeights(fmd=0, arap=0, rot=0), iters=60, seed=0, config=OptimizeConfig(lr_colors=2e-2, densify_from=10_000))
        assert recon_loss(render(scene, cam, 1), target[0, 0])[0] < 0.5 * start

    def test_negative_weight(self):
        with pytest.raises(InputError):
            LossWeights(arap=-1.0)

    def test_weight_aliases(self):
        assert LossWeights.from_dict({"lambda_fmd": 0.1, "rot": 0.0}) == LossWeights(fmd=0.1, rot=0.0)
        with pytest.raises(InputError):
            LossWeights.from_dict({"lambda_lpips": 1.0})

    def test_frame_count_mismatch(self):
        scene = small_scene(n_frames=3)
        with pytest.raises(InputError):
            optimize(scene, np.zeros((1, 2, 8, 8, 3)), [pixel_center_camera()], iters=1)


@pytest.fixture(scope="module")
def setup():
    """A tiny synthetic scene, an untrained prior and a 12-pose loop for the distillation term."""
    from fourd.geometry import interpolate_trajectory
    from fourd.model import VelocityField
    from fourd.pipeline.synth import synth_scene
    from fourd.splat import FMDContext

    bundle = synth_scene(3, {"width": 16, "height": 16, "n_frames": 2, "n_gaussians": [50, 80]})
    ctx = FMDContext(VelocityField(d=8, n_blocks=1, n_heads=2, seed=0), bundle.frames[0], bundle.depth_maps(0), bundle.cams[0], downsample=2)
    return bundle, ctx, interpolate_trajectory(bundle.cams, 12)


class TestOptimizeDistillation:
    def fit(self, setup, p_fmd, with_fmd=True):
        bundle, ctx, traj = setup
        scene = init_from_depth(bundle.frames, bundle.depths, bundle.cams, seed=0)
        cfg = OptimizeConfig(p_fmd=p_fmd, densify_from=10, densify_every=10)
        hist = optimize(scene, bundle.frames, bundle.cams, traj, weights=LossWeights(fmd=0.5), iters=25, seed=1, config=cfg, fmd=ctx if with_fmd else None)
        return scene, hist

    def test_schedule_is_shared_with_the_plain_run(self, setup):
        # the distillation draws use their own stream, so a term that never fires changes nothing
        plain, _ = self.fit(setup, 0.0, with_fmd=False)
        idle, hist = self.fit(setup, 0.0)
        assert not hist.fmd
        assert len(plain) == len(idle)
        assert all(np.array_equal(v, idle.parameters()[k]) for k, v in plain.parameters().items())

    def test_term_fires_and_changes_the_fit(self, setup):
        plain, _ = self.fit(setup, 0.0, with_fmd=False)
        distilled, hist = self.fit(setup, 1.0)
        assert [it for it, _ in hist.fmd] == list(range(25))
        assert all(np.isfinite(v) and v >= 0 for _, v in hist.fmd)
        assert not np.array_equal(plain.gaussians.colors, distilled.gaussians.colors)


class TestSceneCheckpoint:
    def test_round_trip(self, tmp_path):
        scene = small_scene()
        key = last_layer(scene.deformation) + ".w"
        scene.deformation.params[key] = np.random.default_rng(2).standard_normal(scene.deformation.params[key].shape) * 0.01
        scene.save(tmp_path / "scene.bin")
        back = SceneState.load(tmp_path / "scene.bin")
        assert all(np.array_equal(v, back.parameters()[k]) for k, v in scene.parameters().items())
        assert back.extent == scene.extent and back.n_frames == scene.n_frames
        assert np.array_equal(deform(back, 3).means, deform(scene, 3).means)

    def test_wrong_kind(self, tmp_path):
        from fourd.io import save_arrays

        save_arrays(tmp_path / "x.bin", {"a": np.zeros(2)}, {"kind": "other"})
        with pytest.raises(InputError):
            SceneState.load(tmp_path / "x.bin")
