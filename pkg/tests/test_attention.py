import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disdiff.attention import (
    AggregatedMaps,
    AttentionBundle,
    AttentionLayer,
    aggregate,
    cae_from_energy,
    cae_loss,
    relative_energy,
    smooth_all,
    subject_maps,
)
from disdiff.errors import ConfigurationError, DegenerateInputError
from disdiff.numerics import gaussian_kernel, gaussian_smooth, identity_kernel, softmax_rows


def random_layer(rng, name, resolution, heads=2, tokens=5):
    logits = rng.normal(size=(heads, resolution * resolution, tokens)) * 2
    return AttentionLayer(name, resolution, softmax_rows(logits))


def energy_oracle(maps, s):
    energies = [sum(float(a) ** 2 for a in np.asarray(m).ravel()) for m in maps]
    return energies[s] / sum(energies)


class TestAggregate:
    def test_single_head_is_reshape(self):
        probs = np.arange(16 * 3, dtype=np.float64).reshape(1, 16, 3)
        out = aggregate(AttentionBundle([AttentionLayer("l", 4, probs)]), 4)
        for tok in range(3):
            np.testing.assert_array_equal(out.maps[tok].numpy(), probs[0, :, tok].reshape(4, 4))

    def test_two_heads_average(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(16, 2)), rng.uniform(size=(16, 2))
        out = aggregate(AttentionBundle([AttentionLayer("l", 4, np.stack([a, b]))]), 4)
        np.testing.assert_allclose(out.maps.numpy(), ((a + b) / 2).T.reshape(2, 4, 4), atol=1e-15)

    def test_four_way_mean_matches_enumeration(self):
        rng = np.random.default_rng(1)
        layers = [random_layer(rng, "a", 4), random_layer(rng, "b", 4), random_layer(rng, "c", 8)]
        out = aggregate(AttentionBundle(layers), 4).maps.numpy()
        expected = np.zeros((5, 4, 4))
        for layer in layers[:2]:
            for head in range(2):
                for patch in range(16):
                    for tok in range(5):
                        expected[tok, patch // 4, patch % 4] += float(layer.probs[head, patch, tok]) / 4
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_missing_resolution(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ConfigurationError):
            aggregate(AttentionBundle([random_layer(rng, "a", 8)]), 16)

    def test_commutes_with_token_permutation(self):
        rng = np.random.default_rng(3)
        layers = [random_layer(rng, "a", 4), random_layer(rng, "b", 4)]
        perm = [3, 0, 4, 1, 2]
        permuted = [AttentionLayer(l.name, l.resolution, l.probs[..., perm]) for l in layers]
        base = aggregate(AttentionBundle(layers), 4).maps
        np.testing.assert_array_equal(aggregate(AttentionBundle(permuted), 4).maps.numpy(), base[perm].numpy())


class TestSmoothAll:
    def test_identity_kernel(self):
        maps = AggregatedMaps(np.random.default_rng(0).uniform(size=(3, 4, 4)))
        np.testing.assert_array_equal(smooth_all(maps, identity_kernel()).maps.numpy(), maps.maps.numpy())

    def test_constant_maps(self):
        maps = AggregatedMaps(np.full((2, 4, 4), 0.2))
        np.testing.assert_allclose(smooth_all(maps, gaussian_kernel()).maps.numpy(), 0.2, atol=1e-15)

    def test_spike_matches_per_token_numpy_path(self):
        grid = np.zeros((2, 5, 5))
        grid[0, 2, 2] = 1.0
        grid[1, 0, 4] = 1.0
        k = gaussian_kernel(3, 1.0)
        out = smooth_all(AggregatedMaps(grid), k).maps.numpy()
        for tok in range(2):
            np.testing.assert_allclose(out[tok], gaussian_smooth(grid[tok], k), atol=1e-15)


class TestRelativeEnergy:
    def test_only_subject_nonzero(self):
        maps = np.zeros((3, 4, 4))
        maps[1] = 0.3
        assert float(relative_energy(AggregatedMaps(maps), 1).relative[1]) == 1.0

    @pytest.mark.parametrize("n", [2, 5, 7])
    def test_identical_maps(self, n):
        m = np.random.default_rng(n).uniform(size=(4, 4))
        report = relative_energy(AggregatedMaps(np.stack([m] * n)), 0)
        assert report.subject_energy == pytest.approx(1 / n, abs=1e-12)

    def test_four_to_one(self):
        # squared energies 4 and 1: a single pixel of value 2 vs one of value 1
        maps = np.zeros((2, 2, 2))
        maps[0, 0, 0] = 2.0
        maps[1, 1, 1] = 1.0
        assert relative_energy(AggregatedMaps(maps), 0).subject_energy == pytest.approx(0.8, abs=1e-15)

    def test_matches_loop_oracle(self):
        maps = np.random.default_rng(7).uniform(size=(5, 4, 4))
        for s in range(5):
            assert relative_energy(AggregatedMaps(maps), s).subject_energy == pytest.approx(
                energy_oracle(maps, s), abs=1e-12
            )

    def test_all_zero(self):
        with pytest.raises(DegenerateInputError):
            relative_energy(AggregatedMaps(np.zeros((3, 4, 4))), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_scale_invariant_and_sums_to_one(self, seed, scale):
        maps = np.random.default_rng(seed).uniform(size=(4, 4, 4))
        a = relative_energy(AggregatedMaps(maps), 2)
        b = relative_energy(AggregatedMaps(maps * scale), 2)
        assert float(a.relative.sum()) == pytest.approx(1.0, abs=1e-9)
        assert b.subject_energy == pytest.approx(a.subject_energy, abs=1e-12)


class TestCae:
    def test_endpoints(self):
        assert cae_from_energy(1.0) == 0.0
        assert cae_from_energy(0.0) == 1.0

    def test_point_eight(self):
        assert cae_from_energy(0.8) == pytest.approx(0.04, abs=1e-15)

    def test_from_maps(self):
        maps = np.zeros((2, 2, 2))
        maps[0, 0, 0] = 2.0
        maps[1, 1, 1] = 1.0
        assert float(cae_loss(AggregatedMaps(maps), 0)) == pytest.approx(0.04, abs=1e-15)

    def test_monotone_decreasing(self):
        es = np.linspace(0, 1, 101)
        vals = [cae_from_energy(float(e)) for e in es]
        assert all(a > b for a, b in itertools.pairwise(vals))

    def test_differentiable(self):
        maps = torch.rand(3, 4, 4, dtype=torch.float64, requires_grad=True)
        loss = cae_loss(smooth_all(AggregatedMaps(maps), gaussian_kernel()), 1)
        (g,) = torch.autograd.grad(loss, maps)
        assert torch.isfinite(g).all() and g.abs().sum() > 0


def test_subject_maps_pipeline():
    rng = np.random.default_rng(9)
    bundle = AttentionBundle([random_layer(rng, "a", 4), random_layer(rng, "b", 4)], tokens=tuple("abcde"))
    out = subject_maps(bundle, 4, gaussian_kernel())
    assert out.tokens == tuple("abcde")
    assert tuple(out.maps.shape) == (5, 4, 4)
    assert (out.maps >= 0).all()
