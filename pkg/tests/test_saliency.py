import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssldg.augment import FaParams, GaParams, IntensityMap, WeakAugConfig
from ssldg.gradcheck import rel_error
from ssldg.gradcore import ContractError, DimensionError
from ssldg.losses import dice_loss
from ssldg.rng import KeyedRNG
from ssldg.saliency import (
    GRID_PRESETS,
    SaliencyConfig,
    blend_sba,
    domain_diffusion,
    domain_diffusion_batch,
    input_gradient,
    smooth_saliency,
)
from ssldg.segnet import build_model, forward_branch


@pytest.fixture(scope="module")
def model():
    return build_model(k=3, channels=4, classes=3, seed=1)


def phantom(size=16, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), int)
    mask[3:9, 4:12] = 1
    mask[10:14, 2:7] = 2
    img = np.where(mask == 1, 0.7, np.where(mask == 2, 0.4, 0.2)) + rng.normal(0, 0.02, (size, size))
    return np.clip(img, 0, 1), mask


class TestInputGradient:
    def test_zero_head_gives_constant_gradient(self, model):
        m = model.copy()
        for name in ("dec1.out.w", "dec1.out.b"):
            m.params[name].data[...] = 0.0
        img, mask = phantom()
        g = input_gradient(m, img, mask)
        assert np.all(g == g.flat[0])

    def test_pure(self, model):
        img, mask = phantom()
        np.testing.assert_array_equal(input_gradient(model, img, mask), input_gradient(model, img, mask))

    def test_parameters_untouched(self, model):
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        input_gradient(model, *phantom())
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
            assert p.grad is None

    def test_finite_difference_probe(self, model):
        img, mask = phantom(seed=3)
        g = input_gradient(model, img, mask)
        rng = np.random.default_rng(4)
        h = 1e-5
        for _ in range(5):
            i, j = rng.integers(0, 16, size=2)
            up, dn = img.copy(), img.copy()
            up[i, j] += h
            dn[i, j] -= h
            f = lambda x: dice_loss(forward_branch(model.frozen(), x, 1), mask).item()  # noqa: E731
            num = (f(up) - f(dn)) / (2 * h)
            assert rel_error(np.array([g[i, j]]), np.array([num])) <= 1e-3

    def test_batch_rows_are_independent(self, model):
        a, ma = phantom(seed=5)
        b, mb = phantom(seed=6)
        both = input_gradient(model, np.stack([a, b]), np.stack([ma, mb]))
        np.testing.assert_allclose(both[0], input_gradient(model, a, ma), rtol=1e-10, atol=1e-15)

    def test_missing_mask(self, model):
        with pytest.raises(ContractError):
            input_gradient(model, np.zeros((8, 8)), None)


class TestSmoothSaliency:
    def test_constant_gradient(self):
        s = smooth_saliency(np.full((12, 12), -0.3), SaliencyConfig(3))
        assert np.all(s == s[0, 0])

    def test_zero_gradient(self):
        np.testing.assert_array_equal(smooth_saliency(np.zeros((9, 9)), SaliencyConfig(3)), np.zeros((9, 9)))

    def test_full_grid_is_minmax_of_magnitude(self):
        yy, xx = np.mgrid[0:10, 0:10]
        grad = -np.exp(-((yy - 4.0) ** 2 + (xx - 6.0) ** 2) / 20.0)
        s = smooth_saliency(grad, SaliencyConfig(10))
        a = np.abs(grad)
        np.testing.assert_allclose(s, (a - a.min()) / (a.max() - a.min()), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (12, 12), elements=st.floats(-1e3, 1e3)), st.sampled_from([1, 2, 3, 4, 6, 12]))
    def test_bounded(self, grad, g):
        s = smooth_saliency(grad, SaliencyConfig(g))
        assert s.shape == grad.shape
        assert s.min() >= 0.0 and s.max() <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (18, 18), elements=st.floats(-10, 10)), st.sampled_from([2, 3, 6, 9]))
    def test_commutes_with_transpose(self, grad, g):
        cfg = SaliencyConfig(g)
        np.testing.assert_allclose(smooth_saliency(grad.T, cfg), smooth_saliency(grad, cfg).T, atol=1e-12)

    def test_concentrated_gradient_peaks_nearby(self):
        grad = np.zeros((18, 18))
        grad[2:6, 2:6] = 1.0
        s = smooth_saliency(grad, SaliencyConfig(3))
        assert s[:6, :6].min() > s[6:, 6:].max()
        assert s[15, 15] < 0.1

    def test_presets(self):
        assert GRID_PRESETS == {"abdominal": 3, "cardiac": 18}
        grad = np.random.default_rng(0).normal(size=(36, 36))
        for g in GRID_PRESETS.values():
            s = smooth_saliency(grad, SaliencyConfig(g))
            assert 0.0 <= s.min() and s.max() <= 1.0

    def test_grid_out_of_range(self):
        with pytest.raises(ContractError):
            smooth_saliency(np.ones((4, 4)), SaliencyConfig(5))
        with pytest.raises(ContractError):
            SaliencyConfig(0)


class TestBlend:
    def test_endpoints(self):
        rng = np.random.default_rng(1)
        ga, fa = rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5))
        np.testing.assert_array_equal(blend_sba(ga, fa, np.ones((5, 5))), ga)
        np.testing.assert_array_equal(blend_sba(ga, fa, np.zeros((5, 5))), fa)
        np.testing.assert_allclose(blend_sba(ga, fa, np.full((5, 5), 0.5)), (ga + fa) / 2, atol=1e-15)

    @given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), arrays(np.float64, (4, 4), elements=st.floats(0, 1)),
           arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
    def test_between_inputs(self, ga, fa, s):
        out = blend_sba(ga, fa, s)
        assert np.all(out >= np.minimum(ga, fa) - 1e-15)
        assert np.all(out <= np.maximum(ga, fa) + 1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            blend_sba(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))


class TestDomainDiffusion:
    def test_degenerate_pipeline(self, model):
        img, mask = phantom()
        r = domain_diffusion(img, mask, model, GaParams(0, 0, 0), FaParams(0, 0), SaliencyConfig(mode="ga"),
                             KeyedRNG(0, 1), WeakAugConfig.all_off(), ga_map=IntensityMap.identity(),
                             fa_maps=IntensityMap.identity())
        np.testing.assert_allclose(r.ga, img, atol=1e-15)
        np.testing.assert_array_equal(r.sba, r.ga)
        np.testing.assert_array_equal(r.weak, img)
        np.testing.assert_array_equal(r.mask, mask)

    def test_outputs_in_unit_range(self, model):
        img, mask = phantom()
        for s in range(5):
            r = domain_diffusion(img, mask, model, GaParams(), FaParams(), SaliencyConfig(), KeyedRNG(s))
            for v in (r.weak, r.ga, r.fa, r.saliency, r.sba):
                assert v.min() >= 0.0 and v.max() <= 1.0

    def test_grid_only_changes_sba(self, model):
        img, mask = phantom()
        a = domain_diffusion(img, mask, model, GaParams(), FaParams(), SaliencyConfig(3), KeyedRNG(7))
        b = domain_diffusion(img, mask, model, GaParams(), FaParams(), SaliencyConfig(8), KeyedRNG(7))
        np.testing.assert_array_equal(a.ga, b.ga)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(a.sba, b.sba)

    def test_deterministic(self, model):
        img, mask = phantom()
        a = domain_diffusion(img, mask, model, GaParams(), FaParams(), SaliencyConfig(), KeyedRNG(3, 42))
        b = domain_diffusion(img, mask, model, GaParams(), FaParams(), SaliencyConfig(), KeyedRNG(3, 42))
        for x, y in zip((a.weak, a.ga, a.fa, a.sba, a.mask), (b.weak, b.ga, b.fa, b.sba, b.mask)):
            np.testing.assert_array_equal(x, y)

    def test_batch_matches_single(self, model):
        imgs = [phantom(seed=s)[0] for s in range(3)]
        masks = [phantom(seed=s)[1] for s in range(3)]
        rngs = [KeyedRNG(9, s) for s in range(3)]
        batch = domain_diffusion_batch(imgs, masks, model, GaParams(), FaParams(), SaliencyConfig(), rngs)
        single = domain_diffusion(imgs[1], masks[1], model, GaParams(), FaParams(), SaliencyConfig(), rngs[1])
        np.testing.assert_allclose(batch[1].sba, single.sba, atol=1e-12)

    def test_unlabeled_sample_gets_pseudo_mask(self, model):
        img, _ = phantom()
        r = domain_diffusion(img, None, model, GaParams(), FaParams(), SaliencyConfig(), KeyedRNG(1))
        assert not r.labeled
        assert r.mask.shape == img.shape
        assert set(np.unique(r.mask)) <= {0, 1, 2}

    def test_weak_geometry_shared_across_views(self, model):
        img, mask = phantom()
        cfg = WeakAugConfig(p=1.0, brightness=False, contrast=False, gamma=False, noise=False)
        r = domain_diffusion(img, mask, model, GaParams(0, 0, 0), FaParams(0, 0, psi_class=1.0),
                             SaliencyConfig(mode="fa"), KeyedRNG(2), cfg, ga_map=IntensityMap.identity(),
                             fa_maps=IntensityMap.identity())
        # identity GA and FA: all three views are the same warped image
        np.testing.assert_allclose(r.ga, r.weak, atol=1e-15)
        np.testing.assert_allclose(r.fa, r.weak, atol=1e-15)
        assert not np.array_equal(r.weak, img)
