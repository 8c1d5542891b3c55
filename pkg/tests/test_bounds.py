import math

import mpmath as mp
import numpy as np
import pytest

from distreg.bounds import (
    BoundReport,
    CSV_HEADER,
    LayerStats,
    ZeroNormError,
    bound_report,
    confidence_term,
    frobenius_complexity,
    generalization_bound,
    input_bounds,
    layer_stats,
    mars_complexity,
    spectral_complexity,
)
from distreg.data import Dataset
from distreg.nn import ConvLayer, DenseLayer, MaxPoolLayer, Network

mp.mp.dps = 50


def single_stats(b=1.0, d=0.5, n_cols=4, params=4):
    return [LayerStats(layer=0, kind="dense", b_mars=b, d_mars=d, b_fro=b,
                       d_fro=d, b_spec=b, d_spec=d, n_cols=n_cols,
                       param_count=params)]


class TestMarsComplexity:
    def test_single_layer_oracle(self):
        # frozen from: 4*sqrt(ln(2*2)) * c * rho * C_inf * (D/B) * (2B) / sqrt(m)
        oracle = float(4 * mp.sqrt(mp.log(4)) * 2 * 1 * 1 * mp.mpf("0.5") * 2
                       / mp.sqrt(4))
        assert oracle == pytest.approx(4.709640090061899, abs=1e-12)
        got = mars_complexity(single_stats(), m=4, c=2, d=2, c_inf=1.0, rho=1.0)
        assert got == pytest.approx(oracle, abs=1e-9)

    def test_zero_distances_give_zero(self):
        got = mars_complexity(single_stats(d=0.0), m=4, c=2, d=2, c_inf=1.0)
        assert got == 0.0

    def test_linear_in_distances(self):
        base = mars_complexity(single_stats(d=0.25), m=4, c=2, d=2, c_inf=1.0)
        doubled = mars_complexity(single_stats(d=0.5), m=4, c=2, d=2, c_inf=1.0)
        assert doubled == pytest.approx(2.0 * base, rel=1e-15)

    def test_zero_norm_names_layer(self):
        with pytest.raises(ZeroNormError) as err:
            mars_complexity(single_stats(b=0.0), m=4, c=2, d=2, c_inf=1.0)
        assert err.value.layer == 0

    def test_inverse_sqrt_m_scaling(self):
        a = mars_complexity(single_stats(), m=4, c=2, d=2, c_inf=1.0)
        b = mars_complexity(single_stats(), m=16, c=2, d=2, c_inf=1.0)
        assert b == pytest.approx(a / 2.0, rel=1e-15)


class TestFrobeniusComplexity:
    def test_single_layer_oracle(self):
        oracle = float(2 * mp.sqrt(2) * 2 * 1 * 1
                       * (mp.mpf("0.5") / (2 * mp.sqrt(4)))
                       * (2 * mp.sqrt(4)) / mp.sqrt(4))
        assert oracle == pytest.approx(1.4142135623730951, abs=1e-12)
        got = frobenius_complexity(single_stats(), m=4, c=2, c_2=1.0, rho=1.0)
        assert got == pytest.approx(oracle, abs=1e-9)

    def test_zero_distances_give_zero(self):
        assert frobenius_complexity(single_stats(d=0.0), m=4, c=2, c_2=1.0) == 0.0

    def test_single_layer_column_count_cancels(self):
        # at L=1 the sum term carries 1/sqrt(n) and the product sqrt(n)
        a = frobenius_complexity(single_stats(n_cols=4), m=4, c=2, c_2=1.0)
        b = frobenius_complexity(single_stats(n_cols=16), m=4, c=2, c_2=1.0)
        assert a == pytest.approx(b, rel=1e-15)

    def test_two_layer_downstream_columns_matter(self):
        def stats(n2):
            return [
                LayerStats(0, "dense", 1, 0.5, 1.0, 0.5, 1.0, 0.5, 4, 4),
                LayerStats(1, "dense", 1, 0.5, 2.0, 0.25, 2.0, 0.25, n2, 8),
            ]
        a = frobenius_complexity(stats(4), m=4, c=2, c_2=1.0)
        b = frobenius_complexity(stats(16), m=4, c=2, c_2=1.0)
        assert b > a


class TestSpectralComplexity:
    def test_single_layer_oracle(self):
        got = spectral_complexity(single_stats(params=4), m=4, c_2=1.0, rho=1.0)
        assert got == pytest.approx(0.5, abs=1e-9)

    def test_zero_distances_give_zero(self):
        assert spectral_complexity(single_stats(d=0.0), m=4, c_2=1.0) == 0.0

    def test_unit_norm_layer_contributes_factor_one(self):
        one = single_stats(params=4)
        two = one + [LayerStats(1, "dense", 1, 0.0, 1, 0.0, 1.0, 0.0, 4, 0)]
        a = spectral_complexity(one, m=4, c_2=1.0)
        b = spectral_complexity(two, m=4, c_2=1.0)
        assert a == pytest.approx(b, rel=1e-15)


class TestConfidenceAndBound:
    def test_confidence_oracle(self):
        oracle = float(3 * mp.sqrt(mp.log(20) / 400))
        assert oracle == pytest.approx(0.2596227573903428, abs=1e-15)
        assert confidence_term(200, 0.1) == pytest.approx(oracle, abs=1e-9)

    def test_bound_is_sum_of_parts(self):
        got = generalization_bound(0.1, 2.0, 200, 0.1)
        assert got == pytest.approx(2.3596227573903428, abs=1e-9)

    def test_delta_near_one_keeps_log_two_term(self):
        # as delta -> 1 the slack tends to 3*sqrt(ln(2)/(2m)), not to zero
        target = 3.0 * math.sqrt(math.log(2.0) / (2.0 * 200))
        got = generalization_bound(0.0, 0.0, 200, 1.0 - 1e-12)
        assert got == pytest.approx(target, rel=1e-9)

    def test_delta_range_enforced(self):
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValueError):
                confidence_term(100, bad)


class TestInputBounds:
    def test_max_per_example_norms(self):
        ds = Dataset(np.array([[1.0, -2.0], [0.0, 3.0]]), np.array([0, 1]), 2)
        c_inf, c_2 = input_bounds(ds)
        assert c_inf == 3.0
        assert c_2 == 3.0  # max(sqrt(5), 3)

    def test_single_dominant_example(self):
        ds = Dataset(np.array([[-2.0, 3.0], [1.0, 0.0]]), np.array([0, 1]), 2)
        c_inf, c_2 = input_bounds(ds)
        assert c_inf == 3.0
        assert c_2 == pytest.approx(math.sqrt(13), rel=1e-15)

    def test_unit_pixels(self):
        ds = Dataset(np.random.default_rng(0).uniform(0, 1, (10, 1, 3, 3)),
                     np.zeros(10, dtype=int), 1)
        c_inf, _ = input_bounds(ds)
        assert c_inf <= 1.0

    def test_zero_vector(self):
        ds = Dataset(np.zeros((1, 4)), np.zeros(1, dtype=int), 1)
        assert input_bounds(ds) == (0.0, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            input_bounds(Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 1))


class TestLayerStats:
    def test_zero_distance_at_reference(self):
        rng = np.random.default_rng(0)
        net = Network([DenseLayer.from_init(4, 3, rng)], (4,))
        net.capture_reference()
        (s,) = layer_stats(net)
        assert s.d_mars == s.d_fro == s.d_spec == 0.0

    def test_scalar_conv_example(self):
        layer = ConvLayer(np.full((1, 1, 1, 1), 2.0), np.zeros(1),
                          activation="identity")
        net = Network([layer], (1, 3, 3))
        net.capture_reference()
        (s,) = layer_stats(net)
        assert s.b_mars == 2.0
        assert s.b_fro == pytest.approx(6.0, rel=1e-12)  # 2 * sqrt(9)
        assert s.b_spec == pytest.approx(2.0, rel=1e-9)
        assert s.n_cols == 9
        assert s.param_count == 1

    def test_dense_example_against_svd(self):
        w = np.array([[1.0, -2.0], [3.0, 4.0]])
        layer = DenseLayer(w, np.zeros(2), activation="identity")
        net = Network([layer], (2,))
        net.capture_reference()
        (s,) = layer_stats(net)
        assert s.b_mars == 7.0
        assert s.b_fro == pytest.approx(math.sqrt(30), rel=1e-12)
        assert s.b_spec == pytest.approx(np.linalg.svd(w, compute_uv=False)[0],
                                         rel=1e-6)

    def test_conv_spectral_matches_unfolded_svd(self):
        rng = np.random.default_rng(1)
        kernel = rng.standard_normal((2, 1, 2, 2))
        layer = ConvLayer(kernel, np.zeros(2), activation="identity")
        net = Network([layer], (1, 3, 3))
        net.capture_reference()
        unfolded = np.zeros((2 * 4, 9))
        row = 0
        for oc in range(2):
            for i in range(2):
                for j in range(2):
                    patch = np.zeros((3, 3))
                    patch[i : i + 2, j : j + 2] = kernel[oc, 0]
                    unfolded[row] = patch.ravel()
                    row += 1
        expected = np.linalg.svd(unfolded, compute_uv=False)[0]
        (s,) = layer_stats(net)
        assert s.b_spec == pytest.approx(expected, rel=1e-6)

    def test_mars_resolution_invariant_frobenius_grows(self):
        rng = np.random.default_rng(2)
        kernel = rng.standard_normal((3, 1, 3, 3))

        def stats_at(side):
            layer = ConvLayer(kernel.copy(), np.zeros(3))
            net = Network([layer], (1, side, side))
            net.capture_reference()
            return layer_stats(net)[0]

        low = stats_at(8)    # output 6x6
        high = stats_at(16)  # output 14x14
        assert low.b_mars == high.b_mars
        assert high.b_fro == pytest.approx(low.b_fro * math.sqrt((14 * 14) / (6 * 6)),
                                           rel=1e-12)

    def test_reference_shape_mismatch(self):
        rng = np.random.default_rng(3)
        net = Network([DenseLayer.from_init(4, 3, rng)], (4,))
        net.capture_reference()
        bad_ref = [{"weight": np.zeros((2, 4)), "bias": np.zeros(2)}]
        with pytest.raises(ValueError, match="layer 0"):
            layer_stats(net, bad_ref)


class TestBoundReport:
    def make_net(self):
        rng = np.random.default_rng(4)
        net = Network(
            [ConvLayer.from_init(1, 2, 3, 3, rng),
             MaxPoolLayer((2, 2)),
             DenseLayer.from_init(2 * 3 * 3, 3, rng, "identity")],
            (1, 8, 8))
        net.capture_reference()
        return net

    def make_data(self):
        rng = np.random.default_rng(5)
        return Dataset(rng.uniform(0, 1, (20, 1, 8, 8)),
                       rng.integers(0, 3, 20), 3)

    def test_csv_row_matches_header(self):
        net = self.make_net()
        for entry in net.params():
            if entry is not None:
                entry["weight"] += 0.01
        report = bound_report(net, self.make_data())
        assert len(report.csv_row().split(",")) == len(CSV_HEADER.split(","))
        assert report.mars > 0 and report.frobenius > 0 and report.spectral > 0
        assert 0.0 <= report.empirical_risk <= 1.0

    def test_zero_norm_layer_reports_infinity_with_note(self):
        net = self.make_net()
        net.layers[0].weight[:] = 0.0
        report = bound_report(net, self.make_data())
        assert math.isinf(report.mars) and math.isinf(report.frobenius)
        assert any("layer 0" in note for note in report.notes)

    def test_bound_accessor(self):
        report = BoundReport(epoch=1, mars=2.0, frobenius=3.0, spectral=1.0,
                             empirical_risk=0.1, confidence=0.2, m=10, c=2, d=4,
                             c_inf=1.0, c_2=2.0, rho=1.0, delta=0.1, margin=1.0,
                             power_seed=0)
        assert report.bound("mars") == pytest.approx(2.3)
