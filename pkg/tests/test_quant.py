import numpy as np
import pytest

from crqat.autodiff import Tensor, backward, no_grad, tensor_sum, mul
from crqat.errors import CalibrationError, QuantSpecError, ShapeError
from crqat.quantization import (
    DegenerateRangeWarning,
    MinMaxObserver,
    QuantSpec,
    calibrate,
    fake_quantize,
    integer_levels,
    round_half_away,
)


def make_spec(bits, step, zero, axis=None, learnable=True):
    step = np.atleast_1d(np.asarray(step, dtype=np.float32))
    zero = np.atleast_1d(np.asarray(zero, dtype=np.int64))
    return QuantSpec(bits=bits, step=Tensor(step, requires_grad=learnable),
                     zero_point=zero, axis=axis, step_learnable=learnable)


def fq(x, spec):
    return fake_quantize(Tensor(np.asarray(x, dtype=np.float32)), spec).data


class TestRounding:
    def test_half_away_from_zero(self):
        vals = np.array([0.5, 1.5, 2.5, -0.5, -1.5, -2.5, 0.49, -0.49])
        expect = np.array([1.0, 2.0, 3.0, -1.0, -2.0, -3.0, 0.0, -0.0])
        np.testing.assert_array_equal(round_half_away(vals), expect)


class TestFakeQuantizeExamples:
    def test_zero_maps_to_zero(self):
        spec = make_spec(4, 0.5, 0)
        assert fq([0.0], spec)[0] == 0.0

    def test_saturation_clips_to_top_level(self):
        spec = make_spec(2, 1.0, 0)
        assert fq([10.0], spec)[0] == 3.0

    def test_negative_with_zero_point(self):
        # x=-1.3, s=0.5, z=2: round(-2.6) clips through z to level 0
        spec = make_spec(2, 0.5, 2)
        assert fq([-1.3], spec)[0] == pytest.approx(-1.0)

    def test_output_shape_and_spec_errors(self):
        with pytest.raises(QuantSpecError, match="positive"):
            make_spec(2, -1.0, 0)
        with pytest.raises(QuantSpecError, match="zero points"):
            make_spec(2, 1.0, 9)
        with pytest.raises(QuantSpecError, match="bit-width"):
            make_spec(1, 1.0, 0)
        spec = make_spec(2, [0.5, 0.5], [0, 0], axis=0)
        with pytest.raises(ShapeError, match="channels"):
            fq(np.zeros((3, 4)), spec)


class TestQuantizerProperties:
    CASES = 1000

    def _random_specs(self, rng):
        bits = int(rng.choice([2, 3, 4, 8]))
        step = float(rng.uniform(0.01, 2.0))
        zero = int(rng.integers(0, 2 ** bits))
        return bits, step, zero

    def test_idempotence_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(self.CASES):
            bits, step, zero = self._random_specs(rng)
            spec = make_spec(bits, step, zero)
            x = rng.normal(scale=3.0, size=7).astype(np.float32)
            once = fq(x, spec)
            twice = fq(once, spec)
            np.testing.assert_array_equal(once, twice)

    def test_grid_membership(self):
        rng = np.random.default_rng(1)
        for _ in range(self.CASES):
            bits, step, zero = self._random_specs(rng)
            spec = make_spec(bits, step, zero)
            x = rng.normal(scale=3.0, size=7).astype(np.float32)
            out = fq(x, spec)
            k = integer_levels(x, spec)
            grid = ((k - zero) * np.float32(step)).astype(np.float32)
            np.testing.assert_array_equal(out, grid)
            assert k.min() >= 0 and k.max() <= spec.level_max

    def test_bounded_error_in_range(self):
        rng = np.random.default_rng(2)
        for _ in range(self.CASES):
            bits, step, zero = self._random_specs(rng)
            spec = make_spec(bits, step, zero)
            lo = (0 - zero) * step
            hi = (spec.level_max - zero) * step
            x = rng.uniform(lo, hi, size=9).astype(np.float32)
            out = fq(x, spec)
            assert np.all(np.abs(out - x) <= step / 2 + 1e-6 * step)

    def test_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(self.CASES):
            bits, step, zero = self._random_specs(rng)
            spec = make_spec(bits, step, zero)
            x = np.sort(rng.normal(scale=4.0, size=9)).astype(np.float32)
            out = fq(x, spec)
            assert np.all(np.diff(out) >= 0)

    def test_per_channel_equals_per_tensor_slicewise(self):
        rng = np.random.default_rng(4)
        for _ in range(self.CASES):
            bits = int(rng.choice([2, 3, 4, 8]))
            channels = 3
            steps = rng.uniform(0.05, 1.5, size=channels).astype(np.float32)
            zeros = rng.integers(0, 2 ** bits, size=channels)
            spec_pc = make_spec(bits, steps, zeros, axis=0)
            x = rng.normal(scale=2.0, size=(channels, 5)).astype(np.float32)
            out = fq(x, spec_pc)
            for ch in range(channels):
                spec_pt = make_spec(bits, steps[ch], zeros[ch])
                np.testing.assert_array_equal(out[ch], fq(x[ch], spec_pt))


class TestSteBackward:
    def test_in_range_passes_upstream(self):
        spec = make_spec(4, 1.0, 0, learnable=False)
        x = Tensor(np.array([3.2], dtype=np.float32), requires_grad=True)
        out = fake_quantize(x, spec)
        backward(tensor_sum(out))
        assert x.grad[0] == 1.0

    def test_saturated_blocks_upstream(self):
        spec = make_spec(2, 1.0, 0, learnable=False)
        x = Tensor(np.array([50.0], dtype=np.float32), requires_grad=True)
        out = fake_quantize(x, spec)
        backward(tensor_sum(out))
        assert x.grad[0] == 0.0

    def test_region_mask_matches_indicator_exactly(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            bits = int(rng.choice([2, 3, 4]))
            step = float(rng.uniform(0.05, 1.5))
            zero = int(rng.integers(0, 2 ** bits))
            spec = make_spec(bits, step, zero, learnable=False)
            x = Tensor(rng.normal(scale=3.0, size=17).astype(np.float32),
                       requires_grad=True)
            out = fake_quantize(x, spec)
            backward(tensor_sum(out))
            v = x.data.astype(np.float64) / step + zero
            indicator = ((v >= 0) & (v <= spec.level_max)).astype(np.float32)
            np.testing.assert_array_equal(x.grad, indicator)

    def test_step_gradient_hand_case(self):
        # x=0.6, s=1, z=0, q=2: per-element ds = round(0.6) - 0.6 = 0.4,
        # scaled by 1/sqrt(N * (2^q - 1)) with N = 1
        spec = make_spec(2, 1.0, 0)
        x = Tensor(np.array([0.6], dtype=np.float32))
        out = fake_quantize(x, spec)
        backward(tensor_sum(out))
        expected = 0.4 / np.sqrt(1 * 3)
        assert abs(spec.step.grad[0] - expected) < 1e-6

    def test_step_gradient_clipped_regions(self):
        # below range: ds = -z; above range: ds = qmax - z
        spec = make_spec(2, 1.0, 2)
        x = Tensor(np.array([-10.0, 10.0], dtype=np.float32))
        out = fake_quantize(x, spec)
        backward(tensor_sum(out))
        expected = ((0 - 2) + (3 - 2)) / np.sqrt(2 * 3)
        assert abs(spec.step.grad[0] - expected) < 1e-6

    def test_per_channel_step_gradient_groups(self):
        spec = make_spec(2, [1.0, 1.0], [0, 0], axis=0)
        x = Tensor(np.array([[0.6, 0.6], [10.0, 10.0]], dtype=np.float32))
        out = fake_quantize(x, spec)
        backward(tensor_sum(out))
        g = 1.0 / np.sqrt(2 * 3)
        np.testing.assert_allclose(
            spec.step.grad, [2 * 0.4 * g, 2 * (3 - 0) * g], atol=1e-6
        )

    def test_no_grad_suppresses_everything(self):
        spec = make_spec(4, 0.5, 1)
        x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        with no_grad():
            out = fake_quantize(x, spec)
        assert not out.requires_grad


class TestObserverCalibrate:
    def test_min_max_running(self):
        obs = MinMaxObserver()
        obs.observe(np.array([1.0, 2.0, 3.0]))
        obs.observe(np.array([-5.0]))
        assert obs.min_val[0] == -5.0 and obs.max_val[0] == 3.0

    def test_idempotent_extrema(self):
        obs = MinMaxObserver()
        batch = np.array([[0.5, -1.5], [2.0, 0.0]])
        obs.observe(batch)
        lo, hi = obs.min_val.copy(), obs.max_val.copy()
        obs.observe(batch)
        np.testing.assert_array_equal(obs.min_val, lo)
        np.testing.assert_array_equal(obs.max_val, hi)

    def test_per_channel_matches_flatten_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 3, 5, 5))
        obs = MinMaxObserver(axis=0)
        obs.observe(x)
        for ch in range(4):
            flat = x[ch].reshape(-1)
            assert obs.min_val[ch] == flat.min()
            assert obs.max_val[ch] == flat.max()

    def test_calibrate_symmetric_range(self):
        obs = MinMaxObserver()
        obs.observe(np.array([-3.0, 3.0]))
        spec = calibrate(obs, bits=2)
        assert spec.step.data[0] == pytest.approx(2.0)
        assert spec.zero_point[0] == 2

    def test_calibrate_integer_aligned(self):
        obs = MinMaxObserver()
        obs.observe(np.array([0.0, 15.0]))
        spec = calibrate(obs, bits=4)
        assert spec.step.data[0] == pytest.approx(1.0)
        assert spec.zero_point[0] == 0

    def test_calibrate_degenerate_warns(self):
        obs = MinMaxObserver()
        obs.observe(np.zeros(5))
        with pytest.warns(DegenerateRangeWarning):
            spec = calibrate(obs, bits=4)
        assert spec.step.data[0] == pytest.approx(1e-8)
        assert spec.zero_point[0] == 0
        assert spec.degenerate[0]

    def test_calibrate_empty_observer(self):
        with pytest.raises(CalibrationError):
            calibrate(MinMaxObserver(), bits=4)

    def test_spec_invariants_after_calibrate(self):
        rng = np.random.default_rng(10)
        obs = MinMaxObserver(axis=0)
        obs.observe(rng.normal(size=(6, 20)))
        spec = calibrate(obs, bits=3)
        assert spec.step.data.shape == (6,)
        assert np.all(spec.step.data > 0)
        assert np.all(spec.zero_point >= 0)
        assert np.all(spec.zero_point <= spec.level_max)
