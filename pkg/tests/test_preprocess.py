import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqfuse.phantom import PhantomSpec, generate_phantom
from seqfuse.preprocess import (
    build_sampler, equalize_slice, preprocess_volume, resize_slice, stack_2p5d,
)

from oracles import bilinear_resize_reference, empirical_cdf_map


class TestEqualize:
    def test_constant_slice_maps_to_zeros(self):
        out = equalize_slice(np.full((16, 16), 3.7), tiles=(4, 4))
        assert not np.isnan(out).any()
        np.testing.assert_array_equal(out, 0.0)

    def test_single_tile_is_rank_cdf(self):
        out = equalize_slice(np.array([[0.0, 1.0], [2.0, 3.0]]), tiles=(1, 1))
        np.testing.assert_allclose(out, [[0.25, 0.5], [0.75, 1.0]])

    def test_single_tile_matches_cdf_oracle(self, rng):
        a = rng.standard_normal((12, 10))
        out = equalize_slice(a, tiles=(1, 1))
        np.testing.assert_allclose(out, empirical_cdf_map(a), atol=1e-12)

    def test_range_contract(self, rng):
        a = rng.standard_normal((33, 47)) * 100
        out = equalize_slice(a, tiles=(8, 8))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_monotone_in_value_per_position(self, rng):
        """The blended map at any fixed pixel is monotone in the input value."""
        a = rng.standard_normal((32, 32))
        out1 = equalize_slice(a, tiles=(4, 4))
        bumped = a.copy()
        bumped[17, 5] = a[17, 5] + 0.5
        out2 = equalize_slice(bumped, tiles=(4, 4))
        assert out2[17, 5] >= out1[17, 5]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2),
           st.sampled_from([(1, 1), (2, 2), (4, 3)]))
    def test_invariant_under_monotone_rescale(self, seed, tiles):
        rng = np.random.default_rng(seed)
        # integer-valued slices keep the monotone transforms exact in float64
        a = rng.integers(0, 50, size=(16, 16)).astype(np.float64)
        for f in (lambda x: 2 * x + 16, lambda x: 8 * x - 5, lambda x: x ** 3):
            np.testing.assert_array_equal(equalize_slice(a, tiles=tiles),
                                          equalize_slice(f(a), tiles=tiles))

    def test_non_finite_rejected(self):
        a = np.zeros((4, 4))
        a[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            equalize_slice(a)


class TestResize:
    def test_identity(self, rng):
        a = rng.standard_normal((64, 64)).astype(np.float32)
        np.testing.assert_array_equal(resize_slice(a, (64, 64)), a)

    def test_constant_stays_constant(self):
        a = np.full((8, 8), 0.37, dtype=np.float32)
        out = resize_slice(a, (20, 12))
        np.testing.assert_allclose(out, 0.37, rtol=1e-6)

    def test_2x2_to_4x4_hand_values(self):
        out = resize_slice(np.array([[0.0, 0.0], [1.0, 1.0]], dtype=np.float32), (4, 4))
        # half-pixel centers: source rows at -0.25, 0.25, 0.75, 1.25 (clamped)
        expected_col = [0.0, 0.25, 0.75, 1.0]
        for j in range(4):
            np.testing.assert_allclose(out[:, j], expected_col, atol=1e-6)

    def test_matches_reference_implementation(self, rng):
        a = rng.standard_normal((7, 9))
        out = resize_slice(a, (13, 5))
        np.testing.assert_allclose(out, bilinear_resize_reference(a, (13, 5)), atol=1e-5)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            resize_slice(np.zeros((4, 4)), (0, 4))


class TestStack2p5d:
    @pytest.fixture
    def volume(self, tiny_phantom_spec):
        return generate_phantom(tiny_phantom_spec, "p0")

    def test_channel_count(self, volume):
        s = stack_2p5d(volume, 5, 5)
        assert s.stack.shape[0] == 20
        assert s.presence.present == (True,) * 4

    def test_edge_clamping_indices(self, volume):
        """z=0 with 5 slices replicates the boundary: indices (0,0,0,1,2)."""
        s = stack_2p5d(volume, 0, 5)
        seq = list(volume.sequences)[0]
        grid = volume.sequences[seq]
        for ch, zi in enumerate([0, 0, 0, 1, 2]):
            np.testing.assert_array_equal(s.stack[ch], grid[zi])

    def test_single_slice_single_sequence_identity(self, volume):
        name = "FLAIR"
        s = stack_2p5d(volume, 4, 1, sequence_order=(name,))
        np.testing.assert_array_equal(s.stack[0], volume.sequences[name][4])

    def test_center_slice_recovers_original(self, volume):
        s = stack_2p5d(volume, 6, 5)
        for i, name in enumerate(s.sequence_names):
            np.testing.assert_array_equal(s.stack[i * 5 + 2], volume.sequences[name][6])

    def test_target_is_gt_slice(self, volume):
        s = stack_2p5d(volume, 6, 5)
        np.testing.assert_array_equal(s.target, volume.gt_mask[6])

    def test_absent_sequence_zero_channels(self, volume):
        order = tuple(volume.sequences)
        del volume.sequences["BRAVO-post"]
        s = stack_2p5d(volume, 3, 5, sequence_order=order)
        assert s.presence.present == (False, True, True, True)
        np.testing.assert_array_equal(s.stack[:5], 0.0)
        assert s.stack[5:].any()

    def test_out_of_range_z_rejected(self, volume):
        with pytest.raises(ValueError):
            stack_2p5d(volume, 99, 5)

    def test_even_n_slices_rejected(self, volume):
        with pytest.raises(ValueError):
            stack_2p5d(volume, 3, 4)


class TestPreprocessVolume:
    def test_output_in_unit_range_and_spacing_scaled(self, tiny_phantom_spec):
        vol = generate_phantom(tiny_phantom_spec, "p0")
        prep = preprocess_volume(vol, tiles=(4, 4), out_hw=(16, 16))
        for g in prep.sequences.values():
            assert g.min() >= 0 and g.max() <= 1
            assert g.shape == (12, 16, 16)
        assert prep.spacing_mm == (2.0, 2.0, 2.0)
        assert prep.gt_mask.shape == (12, 16, 16)


class TestSampler:
    def _volumes_with_lesion_slices(self, n_lesion, n_empty):
        from seqfuse.phantom import StudyVolume
        depth = n_lesion + n_empty
        gt = np.zeros((depth, 4, 4), dtype=bool)
        gt[:n_lesion, 2, 2] = True
        grid = np.zeros((depth, 4, 4), dtype=np.float32)
        return [StudyVolume("p0", {"A": grid}, (1.0, 1.0, 1.0), gt)]

    def test_all_empty_is_uniform(self):
        sampler = build_sampler(self._volumes_with_lesion_slices(0, 10), 10.0)
        np.testing.assert_allclose(sampler.probabilities, 0.1)

    def test_factor_one_uniform_despite_lesions(self):
        sampler = build_sampler(self._volumes_with_lesion_slices(5, 5), 1.0)
        np.testing.assert_allclose(sampler.probabilities, 0.1)

    def test_monte_carlo_matches_closed_form(self):
        """10 lesion + 90 empty slices at 10x: lesion draw probability 100/190."""
        sampler = build_sampler(self._volumes_with_lesion_slices(10, 90), 10.0)
        rng = np.random.default_rng(0)
        draws = sampler.draw(rng, size=1_000_000)
        frac = np.mean([z < 10 for _, z in draws])
        assert abs(frac - 100 / 190) < 0.01 * (100 / 190)

    def test_weights_positive_and_normalized(self):
        sampler = build_sampler(self._volumes_with_lesion_slices(3, 7), 10.0)
        p = sampler.probabilities
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_deterministic_given_seed(self):
        sampler = build_sampler(self._volumes_with_lesion_slices(3, 7), 10.0)
        a = sampler.draw(np.random.default_rng(5), size=50)
        b = sampler.draw(np.random.default_rng(5), size=50)
        assert a == b

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            build_sampler([], 10.0)

    def test_factor_below_one_rejected(self):
        with pytest.raises(ValueError):
            build_sampler(self._volumes_with_lesion_slices(1, 1), 0.5)
