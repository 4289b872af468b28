import numpy as np
import pytest

from crqat.data import make_synthetic, normalize_images
from crqat.errors import UsageError
from crqat.metrics import (
    ENTROPY_BINS,
    EntropyReport,
    WeightTrace,
    evaluate_accuracy,
    oscillation_count,
    total_oscillations,
    weight_entropy,
)
from crqat.models import build_model, calibrate_model


class TestOscillationCount:
    def test_constant_trace(self):
        assert oscillation_count([2, 2, 2, 2]) == 0

    def test_alternating_trace(self):
        assert oscillation_count([1, 2, 1, 2, 1]) == 3

    def test_monotone_trace(self):
        assert oscillation_count([0, 1, 2, 3]) == 0

    def test_plateaus_break_reversals(self):
        # move up, flat, move down: the flat step separates the two moves
        assert oscillation_count([1, 2, 2, 1]) == 0
        assert oscillation_count([1, 2, 1, 1, 2]) == 1

    def test_too_short_rejected(self):
        with pytest.raises(UsageError):
            oscillation_count([1])

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        levels = rng.integers(0, 8, size=50)
        base = oscillation_count(levels)
        assert oscillation_count(levels + 3) == base
        assert oscillation_count(-levels) == base

    def test_weight_trace_wrapper(self):
        trace = WeightTrace(site="conv1[0]", levels=np.array([0, 1, 0, 1]))
        assert oscillation_count(trace) == 2

    def test_total_over_columns(self):
        levels = np.array([[0, 0], [1, 1], [0, 2], [1, 3]])
        assert total_oscillations(levels) == 2 + 0


class TestWeightEntropy:
    def _model(self):
        ds = make_synthetic(32, 10, seed=0)
        m = build_model("tinycnn", 10, wbits=4, abits=4, seed=0)
        calibrate_model(
            m, normalize_images(ds.images, ds.channel_mean, ds.channel_std)
        )
        return m

    def test_constant_kernel_entropy_zero(self):
        m = self._model()
        conv = m.conv_layers()[0]
        conv.weight.data = np.full_like(conv.weight.data, 0.25)
        report = weight_entropy(m)
        first = [k for k in report.per_kernel if k.layer == "conv1"]
        assert all(k.entropy == 0.0 and k.degenerate for k in first)

    def test_uniform_bins_max_entropy(self):
        from crqat.metrics import _histogram_entropy
        # one value per bin center: exactly uniform occupancy
        vals = (np.arange(ENTROPY_BINS, dtype=np.float64) + 0.5) / ENTROPY_BINS
        h, degenerate = _histogram_entropy(vals, ENTROPY_BINS)
        assert not degenerate
        assert h == pytest.approx(np.log2(ENTROPY_BINS), abs=1e-9)

    def test_bounds_and_total(self):
        m = self._model()
        report = weight_entropy(m)
        assert len(report.per_kernel) == 16 + 32
        for k in report.per_kernel:
            assert 0.0 <= k.entropy <= np.log2(ENTROPY_BINS) + 1e-12
        assert report.total == pytest.approx(sum(k.entropy
                                                 for k in report.per_kernel))

    def test_matches_direct_histogram_oracle(self):
        m = self._model()
        report = weight_entropy(m)
        total = 0.0
        for layer in m.conv_layers():
            w = layer.weight.data
            for ch in range(w.shape[0]):
                vals = w[ch].reshape(-1)
                counts, _ = np.histogram(vals, bins=70,
                                         range=(vals.min(), vals.max()))
                p = counts / counts.sum()
                nz = p[p > 0]
                total += float(-(nz * np.log2(nz)).sum())
        assert abs(report.total - total) < 1e-9

    def test_affine_rescale_invariance(self):
        m = self._model()
        base = weight_entropy(m).total
        for layer in m.conv_layers():
            layer.weight.data = layer.weight.data * 3.0 + 0.7
        assert weight_entropy(m).total == pytest.approx(base, abs=1e-9)

    def test_mlp_has_no_conv_layers(self):
        m = build_model("mlp", 10, wbits=32, abits=32)
        with pytest.raises(UsageError, match="conv"):
            weight_entropy(m)


class TestEvaluateAccuracy:
    @pytest.fixture(scope="class")
    def setup(self):
        ds = make_synthetic(200, 10, seed=0)
        m = build_model("tinycnn", 10, wbits=32, abits=32, seed=0)
        calibrate_model(
            m, normalize_images(ds.images[:32], ds.channel_mean, ds.channel_std)
        )
        return m, ds

    def test_constant_predictor_near_chance(self, setup):
        m, ds = setup
        fc = m.layers[-1]
        fc.weight.data = np.zeros_like(fc.weight.data)
        bias = np.zeros_like(fc.bias.data)
        bias[0] = 10.0
        fc.bias.data = bias
        acc = evaluate_accuracy(m, ds)
        counts = np.bincount(ds.labels, minlength=10)
        assert acc == pytest.approx(100.0 * counts[0] / len(ds))

    def test_same_seed_same_accuracy(self, setup):
        m, ds = setup
        a = evaluate_accuracy(m, ds, n_samples=100, seed=7)
        b = evaluate_accuracy(m, ds, n_samples=100, seed=7)
        assert a == b

    def test_matches_counting_oracle(self, setup):
        m, ds = setup
        from crqat.metrics import predict_logits
        acc = evaluate_accuracy(m, ds, n_samples=150, seed=3)
        idx = np.random.default_rng(3).permutation(len(ds))[:150]
        logits = predict_logits(m, ds.images[idx], ds.channel_mean,
                                ds.channel_std)
        expected = 100.0 * float(
            (logits.argmax(axis=1) == ds.labels[idx]).sum()
        ) / 150
        assert acc == pytest.approx(expected)

    def test_bounds_and_errors(self, setup):
        m, ds = setup
        acc = evaluate_accuracy(m, ds, n_samples=50, seed=0)
        assert 0.0 <= acc <= 100.0
        with pytest.raises(UsageError):
            evaluate_accuracy(m, ds, n_samples=10_000, seed=0)
