"""Resampler and quantizer oracles: constants, ramps, geometry, monotonicity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osvit.errors import ConfigError
from osvit.preprocess import (
    PreprocessConfig,
    preprocess_volume,
    quantize_u8,
    spline_downsample,
)
from osvit.volume_io import Volume


class TestSplineDownsample:
    @pytest.mark.parametrize("order", [1, 3])
    def test_constant_volume_reproduced_exactly(self, order):
        v = Volume(np.full((6, 9, 13), 7.0, dtype=np.float32))
        out = spline_downsample(v, (3, 4, 5), order=order)
        assert out.dims == (3, 4, 5)
        assert np.all(out.data == np.float32(7.0))

    def test_linear_ramp_matches_analytic_values(self):
        d, h, w = np.meshgrid(np.arange(8), np.arange(8), np.arange(16), indexing="ij")
        v = Volume(w.astype(np.float32))
        out = spline_downsample(v, (8, 8, 8), order=3)
        # align-corners: output column j samples the ramp at j * 15 / 7;
        # interior = mapped coordinate >= 3 source voxels from the edge,
        # where mirror-boundary effects of the prefilter have decayed
        x = np.arange(8) * (15.0 / 7.0)
        interior = (x >= 3.0) & (x <= 12.0)
        got = out.data[:, :, interior]
        want = np.broadcast_to(x[interior], got.shape)
        assert np.allclose(got, want, rtol=1e-3, atol=1e-3)

    def test_paper_scale_dims(self):
        v = Volume(np.zeros((155, 240, 240), dtype=np.float32))
        out = spline_downsample(v, (50, 64, 64))
        assert out.dims == (50, 64, 64)

    def test_identity_dims_recover_input(self):
        # evaluating the prefiltered spline at the original grid must return
        # the original samples (interpolation property)
        rng = np.random.default_rng(5)
        data = rng.standard_normal((6, 7, 8)).astype(np.float32)
        out = spline_downsample(Volume(data), (6, 7, 8), order=3)
        assert np.allclose(out.data, data, rtol=1e-5, atol=1e-5)

    def test_order_one_identity_is_exact_passthrough(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((4, 5, 6)).astype(np.float32)
        out = spline_downsample(Volume(data), (4, 5, 6), order=1)
        assert np.array_equal(out.data, data)

    def test_orders_agree_on_smooth_field(self):
        d, h, w = np.meshgrid(*[np.arange(16)] * 3, indexing="ij")
        v = Volume((0.5 * d + 0.25 * h + 0.125 * w).astype(np.float32))
        a = spline_downsample(v, (8, 8, 8), order=3)
        b = spline_downsample(v, (8, 8, 8), order=1)
        # trilinear reproduces a linear field exactly; compare where the
        # cubic prefilter's boundary zone (3 source voxels) has decayed
        assert np.allclose(a.data[2:-2, 2:-2, 2:-2], b.data[2:-2, 2:-2, 2:-2],
                           rtol=1e-3, atol=1e-3)

    def test_upsampling_refused(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ConfigError, match="only downsamples"):
            spline_downsample(v, (4, 4, 8))

    def test_bad_order_rejected(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ConfigError, match="spline_order"):
            spline_downsample(v, (2, 2, 2), order=2)

    def test_tiny_target_rejected(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(ConfigError, match="target_dims"):
            spline_downsample(v, (1, 4, 4))

    @settings(max_examples=20, deadline=None)
    @given(
        src=st.tuples(st.integers(2, 12), st.integers(2, 12), st.integers(2, 12)),
        frac=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
        order=st.sampled_from([1, 3]),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_output_dims_always_equal_target(self, src, frac, order, seed):
        target = tuple(2 + int(round(f * (s - 2))) for s, f in zip(src, frac))
        rng = np.random.default_rng(seed)
        v = Volume(rng.standard_normal(src).astype(np.float32))
        out = spline_downsample(v, target, order=order)
        assert out.dims == target
        assert out.dtype == np.float32


class TestQuantizeU8:
    def test_three_point_linear(self):
        v = Volume(np.array([0.0, 0.5, 1.0], dtype=np.float32).reshape(1, 1, 3))
        q = quantize_u8(v)
        assert q.data.flatten().tolist() == [0, 128, 255]

    def test_symmetric_range(self):
        v = Volume(np.array([-10.0, 0.0, 10.0], dtype=np.float32).reshape(1, 3, 1))
        assert quantize_u8(v).data.flatten().tolist() == [0, 128, 255]

    def test_constant_maps_to_zeros(self):
        v = Volume(np.full((2, 3, 4), 42.0, dtype=np.float32))
        q = quantize_u8(v)
        assert q.dtype == np.uint8
        assert np.all(q.data == 0)

    def test_non_finite_rejected(self):
        v = Volume(np.array([0.0, np.inf], dtype=np.float32).reshape(1, 1, 2))
        with pytest.raises(ConfigError, match="finite"):
            quantize_u8(v)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_quantization_is_monotone(self, seed):
        rng = np.random.default_rng(seed)
        data = (rng.standard_normal((3, 4, 5)) * rng.uniform(0.1, 100)).astype(np.float32)
        q = quantize_u8(Volume(data)).data.ravel()
        order = np.argsort(data.ravel(), kind="stable")
        assert np.all(np.diff(q[order].astype(np.int16)) >= 0)

    def test_extremes_hit_range_ends(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((4, 4, 4)).astype(np.float32)
        q = quantize_u8(Volume(data)).data
        assert q[np.unravel_index(np.argmin(data), data.shape)] == 0
        assert q[np.unravel_index(np.argmax(data), data.shape)] == 255


class TestPreprocessVolume:
    def test_constant_full_scale_input_is_all_zero(self):
        v = Volume(np.full((155, 240, 240), 9.0, dtype=np.float32))
        out = preprocess_volume(v, PreprocessConfig())
        assert out.dims == (50, 64, 64)
        assert out.dtype == np.uint8
        assert np.all(out.data == 0)

    def test_same_input_twice_is_bitwise_identical(self):
        rng = np.random.default_rng(21)
        data = rng.standard_normal((20, 24, 24)).astype(np.float32)
        cfg = PreprocessConfig(target_dims=(10, 12, 12))
        a = preprocess_volume(Volume(data.copy()), cfg)
        b = preprocess_volume(Volume(data.copy()), cfg)
        assert a.data.tobytes() == b.data.tobytes()

    def test_bright_cube_phantom_geometry(self):
        # one 40^3 bright cube in a 155x240x240 field; after downsampling the
        # bright region should cover roughly (40/3.75)^2 * (40/3.1) voxels
        data = np.zeros((155, 240, 240), dtype=np.float32)
        data[57:97, 100:140, 100:140] = 1000.0
        out = preprocess_volume(Volume(data), PreprocessConfig())
        bright = int(np.sum(out.data > 200))
        expected = (40 / (240 / 64)) ** 2 * (40 / (155 / 50))
        assert 0.6 * expected < bright < 1.4 * expected

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(target_dims=(50, 64))
        with pytest.raises(ConfigError):
            PreprocessConfig(target_dims=(1, 64, 64))
        with pytest.raises(ConfigError):
            PreprocessConfig(spline_order=2)

    def test_u8_input_accepted(self):
        rng = np.random.default_rng(22)
        v = Volume(rng.integers(0, 256, size=(8, 8, 8), dtype=np.uint8))
        out = preprocess_volume(v, PreprocessConfig(target_dims=(4, 4, 4)))
        assert out.dims == (4, 4, 4)
        assert out.dtype == np.uint8
