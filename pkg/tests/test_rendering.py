import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rawfield.field import VoxelField, softplus_inverse
from rawfield.rendering import (
    composite_weights,
    ray_aabb_intersect,
    render_rays,
    sample_boundaries,
    weight_variance,
)


def uniform_field(resolution=(4, 4, 4), bbox=((-1, -1, -1), (1, 1, 1)),
                  density=0.5, color=0.5, **kw):
    f = VoxelField(resolution, bbox, **kw)
    with torch.no_grad():
        f.density_raw.fill_(softplus_inverse(density))
        f.color_raw.fill_(math.log(color))
    return f


def z_ray(batch=1):
    o = torch.zeros(batch, 3, dtype=torch.float64)
    o[:, 2] = -1.0
    d = torch.zeros(batch, 3, dtype=torch.float64)
    d[:, 2] = 1.0
    return o, d


class TestSampleField:
    def test_grid_node_exact(self):
        f = VoxelField((3, 3, 3), ((0, 0, 0), (2, 2, 2)))
        with torch.no_grad():
            f.density_raw.uniform_(-1, 1, generator=torch.Generator().manual_seed(0))
            f.color_raw.uniform_(-1, 1, generator=torch.Generator().manual_seed(1))
        s, c = f.sample(torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64))
        assert abs(s.item() - F.softplus(f.density_raw[1, 1, 1]).item()) < 1e-14
        np.testing.assert_allclose(
            c.detach().numpy()[0], torch.exp(f.color_raw[1, 1, 1]).detach().numpy(),
            atol=1e-14)

    def test_uniform_grid_constant_inside(self):
        f = uniform_field(density=0.7, color=0.3)
        pts = torch.rand(64, 3, dtype=torch.float64) * 1.8 - 0.9
        s, c = f.sample(pts)
        np.testing.assert_allclose(s.detach().numpy(), 0.7, atol=1e-12)
        np.testing.assert_allclose(c.detach().numpy(), 0.3, atol=1e-12)

    def test_midpoint_activates_average_raw(self):
        f = VoxelField((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
        with torch.no_grad():
            f.density_raw[0, 0, 0] = -1.0
            f.density_raw[1, 0, 0] = 3.0
        s, _ = f.sample(torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))
        np.testing.assert_allclose(s.item(), F.softplus(torch.tensor(1.0)).item(), atol=1e-14)

    def test_outside_bbox_zero_density(self):
        f = uniform_field(density=2.0)
        s, _ = f.sample(torch.tensor([[3.0, 0.0, 0.0]], dtype=torch.float64))
        assert s.item() == 0.0


class TestCompositeWeights:
    def test_empty_space(self):
        f = VoxelField((2, 2, 2), ((-1, -1, -1), (1, 1, 1)))
        with torch.no_grad():
            f.density_raw.fill_(-1e4)  # softplus underflows to exactly 0
        o, d = z_ray()
        res = render_rays(f, o, d, 8)
        np.testing.assert_array_equal(res.weights.detach().numpy(), 0.0)
        np.testing.assert_array_equal(res.color.detach().numpy(), 0.0)

    def test_opaque_first_segment(self):
        # delta*sigma = 20: w_1 = 1 - e^-20 ~ 1, C ~ c_1
        sigmas = torch.tensor([[20.0, 1.0]], dtype=torch.float64)
        deltas = torch.ones(1, 2, dtype=torch.float64)
        w = composite_weights(sigmas, deltas)
        np.testing.assert_allclose(w[0, 0].item(), 1.0 - math.exp(-20.0), rtol=1e-12)
        assert w[0, 1].item() < 3e-9

    def test_two_segments_ln2(self):
        sigmas = torch.full((1, 2), math.log(2.0), dtype=torch.float64)
        deltas = torch.ones(1, 2, dtype=torch.float64)
        w = composite_weights(sigmas, deltas)
        np.testing.assert_allclose(w.detach().numpy(), [[0.5, 0.25]], atol=1e-14)

    def test_render_two_segment_color(self):
        f = uniform_field((1, 1, 1), bbox=((-1, -1, -1), (1, 1, 1)),
                          density=math.log(2.0), color=0.75)
        o, d = z_ray()
        res = render_rays(f, o, d, 2, t_bounds=torch.tensor([[0.0, 2.0]], dtype=torch.float64))
        np.testing.assert_allclose(res.weights.detach().numpy(), [[0.5, 0.25]], atol=1e-14)
        np.testing.assert_allclose(res.color.detach().numpy(), 0.75 * 0.75, atol=1e-14)

    def test_weight_normalization_telescopes(self):
        rng = torch.Generator().manual_seed(3)
        sigmas = torch.rand(16, 32, generator=rng, dtype=torch.float64) * 5
        deltas = torch.rand(16, 32, generator=rng, dtype=torch.float64) * 0.2
        w = composite_weights(sigmas, deltas)
        expected = 1.0 - torch.exp(-(sigmas * deltas).sum(dim=1))
        np.testing.assert_allclose(w.sum(dim=1).numpy(), expected.numpy(), atol=1e-10)
        assert (w >= 0).all()

    def test_monotone_occlusion(self):
        # raising sigma in segment k cannot increase any later weight
        rng = torch.Generator().manual_seed(4)
        sigmas = torch.rand(1, 16, generator=rng, dtype=torch.float64)
        deltas = torch.full((1, 16), 0.1, dtype=torch.float64)
        w0 = composite_weights(sigmas, deltas)
        bumped = sigmas.clone()
        bumped[0, 5] += 2.0
        w1 = composite_weights(bumped, deltas)
        assert (w1[0, 6:] <= w0[0, 6:] + 1e-15).all()

    def test_color_bounded_by_max(self):
        f = VoxelField((4, 4, 4), ((-1, -1, -1), (1, 1, 1)))
        with torch.no_grad():
            f.density_raw.uniform_(-2, 3, generator=torch.Generator().manual_seed(5))
            f.color_raw.uniform_(-2, 2, generator=torch.Generator().manual_seed(6))
        o, d = z_ray(8)
        d = torch.randn(8, 3, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
        d[:, 2] = d[:, 2].abs() + 1.0
        d = d / d.norm(dim=1, keepdim=True)
        res = render_rays(f, o, d, 24)
        bound = res.sum_weights[:, None] * res.colors.max(dim=1).values
        assert (res.color <= bound + 1e-12).all()

    def test_mean_depth_within_bounds(self):
        f = uniform_field(density=1.0)
        o, d = z_ray(4)
        res = render_rays(f, o, d, 16)
        t0 = res.boundaries[:, 0]
        tn = res.boundaries[:, -1]
        sel = res.sum_weights > 0
        assert (res.mean_depth[sel] >= t0[sel]).all()
        assert (res.mean_depth[sel] <= tn[sel]).all()

    def test_degenerate_bounds_rejected(self):
        f = uniform_field()
        o, d = z_ray()
        with pytest.raises(ValueError):
            render_rays(f, o, d, 4, t_bounds=torch.tensor([[2.0, 1.0]], dtype=torch.float64))


class TestRayAabb:
    def test_through_box(self):
        o = torch.tensor([[0.0, 0.0, -5.0]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        lo = torch.tensor([-1.0, -1.0, -1.0], dtype=torch.float64)
        hi = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)
        t0, t1 = ray_aabb_intersect(o, d, lo, hi)
        np.testing.assert_allclose([t0.item(), t1.item()], [4.0, 6.0], atol=1e-12)

    def test_miss_gives_empty(self):
        o = torch.tensor([[5.0, 5.0, -5.0]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        lo = torch.tensor([-1.0, -1.0, -1.0], dtype=torch.float64)
        hi = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)
        t0, t1 = ray_aabb_intersect(o, d, lo, hi)
        assert t0.item() == t1.item() == 0.0

    def test_origin_inside(self):
        o = torch.zeros(1, 3, dtype=torch.float64)
        d = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        lo = torch.tensor([-1.0, -1.0, -1.0], dtype=torch.float64)
        hi = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)
        t0, t1 = ray_aabb_intersect(o, d, lo, hi)
        np.testing.assert_allclose([t0.item(), t1.item()], [0.0, 1.0], atol=1e-12)


class TestSampleBoundaries:
    def test_unjittered_uniform(self):
        t0 = torch.tensor([1.0], dtype=torch.float64)
        t1 = torch.tensor([3.0], dtype=torch.float64)
        b = sample_boundaries(t0, t1, 4)
        np.testing.assert_allclose(b.numpy()[0], [1.0, 1.5, 2.0, 2.5, 3.0], atol=1e-12)

    def test_jittered_strictly_increasing_with_pinned_ends(self):
        g = torch.Generator().manual_seed(8)
        t0 = torch.zeros(64, dtype=torch.float64)
        t1 = torch.full((64,), 2.0, dtype=torch.float64)
        b = sample_boundaries(t0, t1, 16, generator=g)
        assert (b[:, 1:] > b[:, :-1]).all()
        np.testing.assert_allclose(b[:, 0].numpy(), 0.0)
        np.testing.assert_allclose(b[:, -1].numpy(), 2.0)


def variance_by_quadrature(weights, boundaries, points_per_segment=2000):
    """Dense midpoint-rule integration of the normalized piecewise-constant
    depth distribution; independent of the closed form."""
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(boundaries, dtype=np.float64)
    wn = w / w.sum()
    left, right = t[:-1], t[1:]
    widths = right - left
    k = points_per_segment
    offs = (np.arange(k) + 0.5) / k
    xs = left[:, None] + widths[:, None] * offs[None, :]
    # per-sample mass: wn_i / k (uniform density within the segment)
    mass = np.repeat(wn / k, k)
    xs = xs.ravel()
    mean = float((mass * xs).sum())
    return float((mass * (xs - mean) ** 2).sum())


class TestWeightVariance:
    def test_single_segment_uniform(self):
        # all mass on one segment: variance of U[t0, t1] = (t1 - t0)^2 / 12
        v = weight_variance(torch.tensor([0.37], dtype=torch.float64),
                            torch.tensor([2.0, 5.0], dtype=torch.float64))
        np.testing.assert_allclose(v.item(), 9.0 / 12.0, atol=1e-12)

    def test_two_point_distribution(self):
        # equal mass on two zero-length segments at a and b: var = (b-a)^2/4
        a, b = 1.0, 4.0
        weights = torch.tensor([0.2, 0.0, 0.2], dtype=torch.float64)
        boundaries = torch.tensor([a, a, b, b], dtype=torch.float64)
        v = weight_variance(weights, boundaries)
        np.testing.assert_allclose(v.item(), (b - a) ** 2 / 4.0, atol=1e-12)

    def test_translation_invariance(self):
        g = torch.Generator().manual_seed(9)
        w = torch.rand(8, generator=g, dtype=torch.float64)
        t = torch.cumsum(torch.rand(9, generator=g, dtype=torch.float64) + 0.1, dim=0)
        v0 = weight_variance(w, t)
        v1 = weight_variance(w, t + 17.3)
        np.testing.assert_allclose(v0.item(), v1.item(), atol=1e-9)

    def test_zero_total_weight_returns_zero(self):
        v = weight_variance(torch.zeros(4, dtype=torch.float64),
                            torch.linspace(0, 1, 5, dtype=torch.float64))
        assert v.item() == 0.0

    def test_matches_quadrature(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = rng.integers(1, 12)
            t = np.sort(rng.uniform(0, 10, n + 1))
            t += np.arange(n + 1) * 1e-3  # enforce strict increase
            w = rng.uniform(0, 1, n)
            w[rng.integers(0, n)] += 0.5  # ensure nonzero mass
            closed = weight_variance(torch.tensor(w), torch.tensor(t)).item()
            quad = variance_by_quadrature(w, t)
            np.testing.assert_allclose(closed, quad, atol=1e-6)

    def test_unnormalized_variant(self):
        # paper-literal form: weights used as-is
        w = torch.tensor([0.25], dtype=torch.float64)
        t = torch.tensor([0.0, 2.0], dtype=torch.float64)
        v = weight_variance(w, t, normalize=False)
        # mean = 0.25 * 1 = 0.25; integral of (x - 0.25)^2 * (0.25/2) over [0,2]
        expected = 0.125 * ((2 - 0.25) ** 3 - (0 - 0.25) ** 3) / 3
        np.testing.assert_allclose(v.item(), expected, atol=1e-12)


class TestGradients:
    def test_loss_independent_node_zero_grad(self):
        f = uniform_field((4, 4, 4), density=1.0)
        o, d = z_ray()
        res = render_rays(f, o, d, 8)
        res.color.sum().backward()
        # the z-axis ray through the center never touches corner (0,0,0)
        assert f.density_raw.grad[0, 0, 0].item() == 0.0
        assert f.density_raw.grad.abs().sum().item() > 0.0

    def test_single_segment_color_grad_chain_rule(self):
        # C = w * c with c = exp(color_raw): dC/dcolor_raw = w * c
        f = uniform_field((1, 1, 1), density=math.log(2.0), color=0.75)
        o, d = z_ray()
        res = render_rays(f, o, d, 1, t_bounds=torch.tensor([[0.0, 1.0]], dtype=torch.float64))
        res.color[0, 0].backward()
        w = res.weights[0, 0].item()
        np.testing.assert_allclose(f.color_raw.grad[0, 0, 0, 0].item(), w * 0.75, atol=1e-12)

    def test_finite_difference_agreement(self):
        # autograd vs central differences through render + weight variance
        torch.manual_seed(11)
        f = VoxelField((6, 6, 6), ((-1, -1, -1), (1, 1, 1)))
        with torch.no_grad():
            f.density_raw.uniform_(-1.0, 2.0)
            f.color_raw.uniform_(-1.5, 0.5)
        g = torch.Generator().manual_seed(12)
        d = torch.randn(12, 3, generator=g, dtype=torch.float64)
        d[:, 2] = d[:, 2].abs() + 1.5
        d = d / d.norm(dim=1, keepdim=True)
        o = torch.zeros(12, 3, dtype=torch.float64)
        o[:, 2] = -2.0

        def loss_fn():
            res = render_rays(f, o, d, 12)
            reg = res.sum_weights * weight_variance(res.weights, res.boundaries)
            return res.color.sum() + reg.sum()

        loss_fn().backward()
        h = 1e-4
        rng = np.random.default_rng(13)
        checked = 0
        for grid in (f.density_raw, f.color_raw):
            grad = grid.grad
            flat = grad.reshape(-1)
            candidates = torch.nonzero(flat.abs() > 1e-6).flatten().tolist()
            rng.shuffle(candidates)
            for idx in candidates[:20]:
                with torch.no_grad():
                    orig = grid.reshape(-1)[idx].item()
                    grid.reshape(-1)[idx] = orig + h
                    up = loss_fn().item()
                    grid.reshape(-1)[idx] = orig - h
                    down = loss_fn().item()
                    grid.reshape(-1)[idx] = orig
                fd = (up - down) / (2 * h)
                an = flat[idx].item()
                assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3
                checked += 1
        assert checked >= 30
