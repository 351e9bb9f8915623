"""Loss terms: frozen arithmetic, masking, schedules, gradient estimation."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from shadowart.field import OccupancyField
from shadowart.geometry import DTYPE, ProjectionConstraint
from shadowart.images import TargetImage
from shadowart.losses import (
    LossWeights,
    RayBatch,
    RayBlock,
    _segment_weights,
    assemble_batch,
    binarization_loss,
    cohesion_loss,
    detect_surface_points,
    effective_betas,
    estimate_gradients,
    rendering_loss,
    ray_occupancy,
    smoothness_loss,
    total_loss,
    volume_loss,
)
from shadowart.sampler import build_dataset

AXIS_Z = ProjectionConstraint.create([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], index=0)
AXIS_X = ProjectionConstraint.create([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], index=1)


def _block(f, labels, positions=None, mask=None, alpha=1.0, width=1, trunc_len=None):
    f = torch.as_tensor(f, dtype=DTYPE)
    g, n = f.shape
    if mask is None:
        mask = torch.ones(g, n, dtype=torch.bool)
    else:
        mask = torch.as_tensor(mask, dtype=torch.bool)
    if positions is None:
        t = torch.linspace(0.0, 1.0, n, dtype=DTYPE)
        positions = torch.zeros(g, n, 3, dtype=DTYPE)
        positions[:, :, 2] = t
    else:
        positions = torch.as_tensor(positions, dtype=DTYPE)
    if trunc_len is None:
        trunc_len = torch.ones(g, dtype=DTYPE)
    else:
        trunc_len = torch.as_tensor(trunc_len, dtype=DTYPE)
    return RayBlock(
        constraint_index=0,
        width=width,
        height=width,
        f=f * mask,
        mask=mask,
        positions=positions,
        labels=torch.as_tensor(labels, dtype=DTYPE),
        trunc_len=trunc_len,
        alpha=alpha,
    )


class TestRayOccupancy:
    def test_two_half_samples(self):
        f = torch.tensor([[0.5, 0.5]], dtype=DTYPE)
        npt.assert_allclose(ray_occupancy(f).numpy(), [0.75])

    def test_saturated_sample_dominates(self):
        f = torch.tensor([[1.0, 0.2, 0.0]], dtype=DTYPE)
        npt.assert_allclose(ray_occupancy(f).numpy(), [1.0])

    def test_empty_field_gives_zero(self):
        f = torch.zeros(3, 4, dtype=DTYPE)
        npt.assert_allclose(ray_occupancy(f).numpy(), [0.0, 0.0, 0.0])

    def test_mask_drops_samples(self):
        f = torch.tensor([[0.3, 0.9]], dtype=DTYPE)
        mask = torch.tensor([[True, False]])
        npt.assert_allclose(ray_occupancy(f, mask).numpy(), [0.3])


class TestRenderingLoss:
    def test_frozen_arithmetic(self):
        # Ray 0: label 1, occupancy 0.75 -> 0.0625. Ray 1: label 0,
        # occupancy 0.5 -> 0.25. alpha 4, two rays: 4 * 0.3125 / 2.
        blk = _block([[0.5, 0.5], [0.5, 0.0]], [1.0, 0.0], alpha=4.0)
        loss = rendering_loss(RayBatch([blk]))
        npt.assert_allclose(float(loss), 0.625, rtol=0, atol=1e-15)

    def test_perfect_match_is_zero(self):
        blk = _block([[1.0, 0.0], [0.0, 0.0]], [1.0, 0.0])
        assert float(rendering_loss(RayBatch([blk]))) == 0.0

    def test_mixed_blocks_pool_ray_count(self):
        # Same per-ray errors split across blocks must match one block.
        a = _block([[0.5, 0.5]], [1.0], alpha=2.0)
        b = _block([[0.5, 0.0]], [0.0], alpha=2.0)
        merged = _block([[0.5, 0.5], [0.5, 0.0]], [1.0, 0.0], alpha=2.0)
        npt.assert_allclose(
            float(rendering_loss(RayBatch([a, b]))),
            float(rendering_loss(RayBatch([merged]))),
        )

    def test_per_block_alpha(self):
        a = _block([[0.5, 0.5]], [1.0], alpha=1.0)
        b = _block([[0.5, 0.5]], [1.0], alpha=3.0)
        loss = rendering_loss(RayBatch([a, b]))
        npt.assert_allclose(float(loss), (0.0625 + 3 * 0.0625) / 2)


class TestCohesionLoss:
    def test_frozen_jump(self):
        # (0, 1, 0): squared jumps 1 + 1, inner mean over 3 samples.
        blk = _block([[0.0, 1.0, 0.0]], [1.0])
        npt.assert_allclose(float(cohesion_loss(RayBatch([blk]))), 2.0 / 3.0)

    def test_block_beats_alternation(self):
        alt = _block([[1.0, 0.0, 1.0, 0.0]], [1.0])
        solid = _block([[1.0, 1.0, 0.0, 0.0]], [1.0])
        assert float(cohesion_loss(RayBatch([solid]))) < float(
            cohesion_loss(RayBatch([alt]))
        )

    def test_constant_ray_is_zero(self):
        blk = _block([[0.7, 0.7, 0.7]], [1.0])
        assert float(cohesion_loss(RayBatch([blk]))) == 0.0

    def test_mask_breaks_pairs(self):
        # Dead tail sample: only the 0->1 jump inside the surviving run
        # counts, normalized by the 2 surviving samples.
        blk = _block([[0.0, 1.0, 0.3]], [1.0], mask=[[True, True, False]])
        npt.assert_allclose(float(cohesion_loss(RayBatch([blk]))), 1.0 / 2.0)


class TestBinarizationLoss:
    def test_frozen_values(self):
        blk = _block([[0.0, 1.0, 0.5]], [1.0])
        npt.assert_allclose(float(binarization_loss(RayBatch([blk]))), 0.25 / 3.0)

    def test_binary_field_is_zero(self):
        blk = _block([[0.0, 1.0, 1.0, 0.0]], [1.0])
        assert float(binarization_loss(RayBatch([blk]))) == 0.0

    def test_worst_case_quarter(self):
        blk = _block([[0.5, 0.5]], [1.0])
        npt.assert_allclose(float(binarization_loss(RayBatch([blk]))), 0.25)


class TestSegmentWeights:
    def test_uniform_spacing(self):
        # 5 samples, spacing 0.25: edges take the adjacent spacing, interiors
        # the half-sum, so all weights are 0.25.
        blk = _block([[0.5] * 5], [1.0])
        omega = _segment_weights(blk)
        npt.assert_allclose(omega.detach().numpy(), [[0.25] * 5])

    def test_nonuniform_spacing(self):
        pos = torch.zeros(1, 3, 3, dtype=DTYPE)
        pos[0, :, 2] = torch.tensor([0.0, 0.1, 0.4], dtype=DTYPE)
        blk = _block([[0.5, 0.5, 0.5]], [1.0], positions=pos)
        omega = _segment_weights(blk)
        npt.assert_allclose(omega.detach().numpy(), [[0.1, 0.2, 0.3]], atol=1e-15)

    def test_masked_prefix(self):
        pos = torch.zeros(1, 4, 3, dtype=DTYPE)
        pos[0, :, 2] = torch.tensor([0.0, 0.2, 0.5, 0.9], dtype=DTYPE)
        blk = _block(
            [[0.5] * 4], [1.0], positions=pos, mask=[[False, True, True, True]]
        )
        omega = _segment_weights(blk)
        npt.assert_allclose(omega.detach().numpy(), [[0.0, 0.3, 0.35, 0.4]], atol=1e-15)

    def test_single_sample_falls_back_to_length(self):
        blk = _block(
            [[0.5, 0.5, 0.5]],
            [1.0],
            mask=[[False, True, False]],
            trunc_len=[0.7],
        )
        omega = _segment_weights(blk)
        npt.assert_allclose(omega.detach().numpy(), [[0.0, 0.7, 0.0]])


class TestVolumeLoss:
    def test_single_sample_at_threshold(self):
        blk = _block([[0.5]], [1.0], trunc_len=[0.8])
        loss = volume_loss(RayBatch([blk]), tau=0.5, temperature=0.1)
        npt.assert_allclose(float(loss), 0.8 * 0.5)

    def test_saturated_ray(self):
        # f = 1 everywhere: each weight carries sigmoid(5).
        blk = _block([[1.0] * 5], [1.0])
        loss = volume_loss(RayBatch([blk]), tau=0.5, temperature=0.1)
        expected = 1.25 / (1.0 + math.exp(-5.0))
        npt.assert_allclose(float(loss), expected, rtol=1e-12)

    def test_monotone_in_occupancy(self):
        low = _block([[0.3] * 4], [1.0])
        high = _block([[0.8] * 4], [1.0])
        v = lambda blk: float(volume_loss(RayBatch([blk]), 0.5, 0.1))
        assert v(low) < v(high)

    def test_empty_field_is_cheap(self):
        blk = _block([[0.0] * 4], [1.0])
        loss = float(volume_loss(RayBatch([blk]), 0.5, 0.1))
        assert loss < 0.01


class TestEstimateGradients:
    def _cloud(self, m, k, seed=0):
        rng = np.random.default_rng(seed)
        p0 = torch.as_tensor(rng.normal(size=(m, 3)), dtype=DTYPE)
        nb = p0.unsqueeze(1) + torch.as_tensor(
            rng.normal(scale=0.05, size=(m, k, 3)), dtype=DTYPE
        )
        return p0, nb

    def test_affine_field_exact(self):
        a = torch.tensor([1.5, -2.0, 0.25], dtype=DTYPE)
        p0, nb = self._cloud(10, 8)
        g, deficient = estimate_gradients(p0, p0 @ a, nb, nb @ a)
        npt.assert_allclose(g.numpy(), np.tile(a.numpy(), (10, 1)), atol=1e-9)
        assert not bool(deficient.any())

    def test_constant_field_zero(self):
        p0, nb = self._cloud(6, 5)
        g, _ = estimate_gradients(p0, torch.ones(6, dtype=DTYPE), nb, torch.ones(6, 5, dtype=DTYPE))
        npt.assert_allclose(g.numpy(), 0.0, atol=1e-12)

    def test_quadratic_error_shrinks_with_scale(self):
        # Least squares over offsets of scale h has O(h) bias on x^2.
        f = lambda p: p[..., 0] ** 2
        p0 = torch.tensor([[0.3, 0.1, -0.2]], dtype=DTYPE)
        rng = np.random.default_rng(3)
        raw = torch.as_tensor(rng.normal(size=(1, 12, 3)), dtype=DTYPE)
        errs = []
        for h in (0.1, 0.05):
            nb = p0.unsqueeze(1) + h * raw
            g, _ = estimate_gradients(p0, f(p0), nb, f(nb))
            errs.append(abs(float(g[0, 0]) - 0.6))
        assert errs[1] < 0.75 * errs[0]

    def test_coplanar_neighbors_flagged_and_finite(self):
        p0 = torch.zeros(1, 3, dtype=DTYPE)
        nb = torch.tensor(
            [[[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0], [0.5, 0.25, 0]]], dtype=DTYPE
        )
        f0 = torch.zeros(1, dtype=DTYPE)
        fn = nb[..., 0] + nb[..., 1]
        g, deficient = estimate_gradients(p0, f0, nb, fn)
        assert bool(deficient[0])
        assert bool(torch.isfinite(g).all())
        npt.assert_allclose(g[0, :2].numpy(), [1.0, 1.0], atol=1e-5)

    def test_gradient_flows_to_inputs(self):
        p0, nb = self._cloud(4, 6)
        p0.requires_grad_(True)
        a = torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
        g, _ = estimate_gradients(p0, (p0 @ a).detach(), nb, nb @ a)
        g.sum().backward()
        assert p0.grad is not None and bool(torch.isfinite(p0.grad).all())


class TestDetectSurfacePoints:
    def test_threshold_scales_with_width(self):
        pos = torch.zeros(3, 3, dtype=DTYPE)
        grads = torch.tensor(
            [[10.0, 0, 0], [30.0, 0, 0], [10.0, 0, 0]], dtype=DTYPE
        )
        widths = torch.tensor([48.0, 48.0, 16.0], dtype=DTYPE)
        out = detect_surface_points(pos, grads, theta=0.4, widths=widths)
        # thresholds: 19.2, 19.2, 6.4 -> only rows 1 and 2 pass
        npt.assert_array_equal(out.selected.numpy(), [False, True, True])
        assert out.positions.shape == (2, 3)

    def test_strict_inequality(self):
        grads = torch.tensor([[0.4, 0, 0]], dtype=DTYPE)
        out = detect_surface_points(
            torch.zeros(1, 3, dtype=DTYPE), grads, theta=0.4, widths=torch.ones(1, dtype=DTYPE)
        )
        assert not bool(out.selected[0])


def _tetra_cluster(center, scale, slope, offset=0.0):
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64
    ) * scale + np.asarray(center, dtype=np.float64)
    f = verts @ np.asarray(slope, dtype=np.float64) + offset
    return verts, f


def _pool_block(verts, f, width=1):
    # One ray per point with a single surviving sample.
    g = verts.shape[0]
    positions = torch.as_tensor(verts, dtype=DTYPE).view(g, 1, 3)
    return RayBlock(
        constraint_index=0,
        width=width,
        height=width,
        f=torch.as_tensor(f, dtype=DTYPE).view(g, 1),
        mask=torch.ones(g, 1, dtype=torch.bool),
        positions=positions,
        labels=torch.ones(g, dtype=DTYPE),
        trunc_len=torch.ones(g, dtype=DTYPE),
    )


class TestSmoothnessLoss:
    def test_tiny_pool_returns_zero(self):
        blk = _block([[0.5, 0.5]], [1.0])
        assert float(smoothness_loss(RayBatch([blk]), 0.4, 26, 6)) == 0.0

    def test_uniform_gradient_is_smooth(self):
        rng = np.random.default_rng(1)
        verts = rng.uniform(-0.4, 0.4, size=(30, 3))
        f = verts @ np.array([2.0, 0.5, -1.0])
        blk = _pool_block(verts, f)
        loss = smoothness_loss(RayBatch([blk]), theta=0.4, k1=6, k2=4)
        npt.assert_allclose(float(loss), 0.0, atol=1e-8)

    def test_subthreshold_slope_gives_no_surface(self):
        rng = np.random.default_rng(2)
        verts = rng.uniform(-0.4, 0.4, size=(20, 3))
        f = verts @ np.array([0.1, 0.0, 0.0])
        blk = _pool_block(verts, f, width=1)
        diag = {}
        loss = smoothness_loss(RayBatch([blk]), 0.4, 6, 4, diagnostics=diag)
        assert float(loss) == 0.0
        assert diag["surface_points"] == 0

    def test_two_cluster_gradient_contrast(self):
        # Affine patches with slopes (1,0,0) and (3,0,0) one unit apart.
        # Each point's k1=3 neighbors stay in its own tetrahedron, so the
        # gradient estimates are exact; k2=6 pairs each surface point with 3
        # same-slope and 3 cross-slope partners at distance ~1.
        va, fa = _tetra_cluster([0, 0, 0], 0.01, [1.0, 0, 0])
        vb, fb = _tetra_cluster([1.0, 0, 0], 0.01, [3.0, 0, 0])
        blk = _pool_block(np.vstack([va, vb]), np.concatenate([fa, fb]))
        diag = {}
        loss = float(
            smoothness_loss(RayBatch([blk]), theta=0.4, k1=3, k2=6, diagnostics=diag)
        )
        assert diag["surface_points"] == 8
        assert 0.97 <= loss <= 1.03

    def test_duplicate_point_skipped_not_nan(self):
        # Exact duplicate of a strong-slope vertex: the twins lose a spanning
        # neighbor direction (damped, deficient) yet their damped estimate is
        # still the true (3, 0, 0), so both survive to the surface stage where
        # their zero-distance pair is skipped rather than divided by.
        va, fa = _tetra_cluster([0, 0, 0], 0.01, [1.0, 0, 0])
        vb, fb = _tetra_cluster([1.0, 0, 0], 0.01, [3.0, 0, 0])
        verts = np.vstack([va, vb, vb[1:2]])
        f = np.concatenate([fa, fb, fb[1:2]])
        blk = _pool_block(verts, f)
        diag = {}
        loss = float(smoothness_loss(RayBatch([blk]), 0.4, 3, 6, diagnostics=diag))
        assert math.isfinite(loss) and loss >= 0.0
        assert diag["surface_points"] == 9
        assert diag["skipped_pairs"] == 2
        assert diag["deficient_solves"] >= 2


class TestEffectiveBetas:
    def test_schedule_table(self):
        w = LossWeights()
        assert effective_betas(w, 0) == (1e-3, 0.0, 0.0, 5e-2)
        assert effective_betas(w, 1) == (2e-3, 0.0, 0.0, 1e-1)
        assert effective_betas(w, 3) == (8e-3, 0.0, 0.0, 4e-1)
        assert effective_betas(w, 4) == (8e-3, 1e-4, 1e-4, 4e-1)
        assert effective_betas(w, 12) == (8e-3, 1e-4, 1e-4, 4e-1)

    def test_custom_bases_scale(self):
        w = LossWeights(beta1=2e-3, beta4=1e-1)
        assert effective_betas(w, 2) == (8e-3, 0.0, 0.0, 4e-1)


def _full_target(w, h, index=0):
    return TargetImage(np.ones((h, w), dtype=bool), index=index)


class TestAssembleBatch:
    def test_shapes_and_alpha(self):
        ds = build_dataset([_full_target(8, 8)], [AXIS_Z], seed=0, epoch=0)
        groups = {0: np.arange(10)}
        batch = assemble_batch(OccupancyField(hidden_layers=1, hidden_width=8), [AXIS_Z], ds, groups, alphas=[2.5])
        assert len(batch.blocks) == 1
        blk = batch.blocks[0]
        assert blk.f.shape == (10, 8)
        assert blk.alpha == 2.5
        npt.assert_allclose(blk.f.detach().numpy(), 0.5)

    def test_truncation_zeroes_dead_samples(self):
        wide = _full_target(16, 16, 0)
        narrow = _full_target(8, 32, 1)
        ds = build_dataset([wide, narrow], [AXIS_Z, AXIS_X], seed=0, epoch=0)
        blk0 = ds.per_constraint[0]
        # Pick one fully dead ray and confirm it is dropped from the block.
        dead_rows = np.nonzero(blk0.t_lo > blk0.t_hi)[0]
        live_rows = np.nonzero(blk0.t_lo <= blk0.t_hi)[0]
        groups = {0: np.array([dead_rows[0], live_rows[0]])}
        batch = assemble_batch(
            OccupancyField(hidden_layers=1, hidden_width=8), [AXIS_Z, AXIS_X], ds, groups
        )
        assert batch.blocks[0].ray_count == 1
        assert batch.total_rays == 1

    def test_trunc_len_scales_with_distance(self):
        far = ProjectionConstraint.create([0, 0, -1.0], [0, 0, 1.0], distance=0.75)
        ds = build_dataset([_full_target(8, 8)], [far], seed=0, epoch=0)
        batch = assemble_batch(
            OccupancyField(hidden_layers=1, hidden_width=8), [far], ds, {0: np.arange(4)}
        )
        # Full interval on a ray of length 2 * 0.75.
        npt.assert_allclose(batch.blocks[0].trunc_len.detach().numpy(), 1.5)

    def test_positions_lie_on_rays(self):
        ds = build_dataset([_full_target(8, 8)], [AXIS_Z], seed=0, epoch=0)
        batch = assemble_batch(
            OccupancyField(hidden_layers=1, hidden_width=8), [AXIS_Z], ds, {0: np.arange(64)}
        )
        pos = batch.blocks[0].positions.detach().numpy()
        # Head-on constraint: all sample z values within the scene slab.
        assert pos[..., 2].min() >= -0.5 - 1e-12
        assert pos[..., 2].max() <= 0.5 + 1e-12


class TestTotalLoss:
    def _batch(self):
        ds = build_dataset([_full_target(8, 8)], [AXIS_Z], seed=0, epoch=0)
        fld = OccupancyField(hidden_layers=2, hidden_width=16, seed=1)
        with torch.no_grad():
            fld.weights[-1].copy_(torch.randn(16, 1, dtype=DTYPE) * 0.5)
        return assemble_batch(fld, [AXIS_Z], ds, {0: np.arange(64)})

    def test_parts_sum_to_total(self):
        batch = self._batch()
        w = LossWeights()
        for epoch in (0, 4):
            total, parts, _ = total_loss(batch, w, epoch)
            b1, b2, b3, b4 = effective_betas(w, epoch)
            expected = (
                parts["rendering"]
                + b1 * parts["cohesion"]
                + b2 * parts["smoothness"]
                + b3 * parts["volume"]
                + b4 * parts["binarization"]
            )
            npt.assert_allclose(float(total.detach()), expected, rtol=1e-12)

    def test_smoothness_skipped_early(self):
        batch = self._batch()
        _, parts, diag = total_loss(batch, LossWeights(), epoch=0)
        assert parts["smoothness"] == 0.0
        assert "surface_points" not in diag

    def test_empty_batch_raises(self):
        with pytest.raises(ValueError, match="no surviving rays"):
            total_loss(RayBatch([]), LossWeights(), 0)

    def test_gradients_reach_field_and_directions(self):
        ds = build_dataset([_full_target(8, 8)], [AXIS_Z], seed=0, epoch=0)
        fld = OccupancyField(hidden_layers=2, hidden_width=16, seed=1)
        with torch.no_grad():
            fld.weights[-1].copy_(torch.randn(16, 1, dtype=DTYPE) * 0.5)
        con = ProjectionConstraint.create([0.1, 0.0, -1.0], [0.0, 0.0, 1.0])
        con.light.requires_grad_(True)
        con.screen.requires_grad_(True)
        batch = assemble_batch(fld, [con], ds, {0: np.arange(64)})
        total, _, _ = total_loss(batch, LossWeights(), epoch=0)
        grads = torch.autograd.grad(total, [con.light, con.screen] + fld.parameters(), allow_unused=True)
        assert grads[0] is not None and float(grads[0].abs().sum()) > 0
        assert grads[1] is not None and float(grads[1].abs().sum()) > 0
        assert any(g is not None and float(g.abs().sum()) > 0 for g in grads[2:])
