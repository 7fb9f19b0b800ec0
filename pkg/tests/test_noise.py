import math

import numpy as np
import pytest

from equant.equalize import two_step_equalize
from equant.errors import CalibrationError, EquantError
from equant.graph import Graph, LayerNode
from equant.modelio import FixtureSpec, make_fixture
from equant.noise import (
    attach_predictions,
    compare_runs,
    measure_sqnr,
    optimal_equalization_bound,
    predict_sqnr,
    sqnr_linear,
    to_db,
)
from equant.quantsim import LayerQuant, QuantSpec, calibrate, weight_spec
from equant.tensors import LINEAR

from conftest import chain_graph, random_chain


def synthetic_layer(rng, kh=3, cin=16, cout=16, spatial=12):
    kernel = rng.uniform(-1, 1, (kh, kh, cin, cout))
    node = LayerNode("L", "conv", ("input",), kernel, np.zeros(cout), LINEAR,
                     padding="valid")
    g = Graph([node], ["L"], (spatial, spatial, cin))
    samples = [rng.uniform(-1, 1, (1, spatial, spatial, cin)) for _ in range(32)]
    return g, samples


class TestMeasureSqnr:
    def test_high_bits_high_sqnr(self, rng):
        g = random_chain(rng, layers=3, channels=4)
        samples = [rng.random((1, 6, 6, 3)) for _ in range(8)]
        rec = calibrate(g, samples, count=8)
        rep = measure_sqnr(g, rec, samples, bits=(24, 24, 30))
        for row in rep.layers:
            for mode in ("w", "a", "full"):
                assert row.sqnr_db(mode) >= 100.0

    def test_on_grid_weights_give_infinite_weight_sqnr(self, rng):
        spec = QuantSpec.symmetric(1.0, bits=8)
        grid = spec.scale * rng.integers(-128, 129, size=(1, 1, 2, 2)).astype(float)
        grid[0, 0, 0, 0] = 1.0
        g = chain_graph([grid], (3, 3, 2), activation=LINEAR)
        samples = [rng.random((1, 3, 3, 2)) for _ in range(4)]
        rec = calibrate(g, samples, count=4)
        rep = measure_sqnr(g, rec, samples)
        assert rep.layers[0].sqnr_db("w") == math.inf
        assert "inf" in rep.to_csv()

    def test_zero_signal_reported_undefined(self):
        assert sqnr_linear(0.0, 1.0) is None
        assert to_db(None) is None

    def test_csv_schema(self, rng):
        g = random_chain(rng, layers=2)
        samples = [rng.random((1, 6, 6, 3)) for _ in range(4)]
        rec = calibrate(g, samples, count=4)
        rep = measure_sqnr(g, rec, samples)
        attach_predictions(rep, predict_sqnr(g, rec))
        csv = rep.to_csv(header_comment="test")
        lines = csv.strip().split("\n")
        assert lines[0] == "# test"
        assert lines[1] == (
            "layer_id,topo_index,signal_energy,noise_w,noise_a,noise_full,"
            "sqnr_w_db,sqnr_a_db,sqnr_full_db,pred_sqnr_w_db,pred_sqnr_a_db"
        )
        assert len(lines) == 2 + len(g.layer_ids)

    def test_threads_do_not_change_result(self, rng):
        g = random_chain(rng, layers=2)
        samples = [rng.random((1, 6, 6, 3)) for _ in range(8)]
        rec = calibrate(g, samples, count=8)
        a = measure_sqnr(g, rec, samples, threads=1)
        b = measure_sqnr(g, rec, samples, threads=3)
        for ra, rb in zip(a.layers, b.layers):
            assert ra.signal_energy == rb.signal_energy
            assert ra.noise == rb.noise

    def test_two_layer_noise_decomposition(self, rng):
        # full-mode noise at the first layer roughly splits into the
        # weight-only and activation-only contributions
        g, samples = synthetic_layer(rng)
        rec = calibrate(g, samples, count=32)
        rep = measure_sqnr(g, rec, samples)
        row = rep.layers[0]
        total = row.noise["full"]
        parts = row.noise["w"] + row.noise["a"]
        assert 0.5 * parts <= total <= 1.6 * parts


class TestPredictSqnr:
    def test_worked_example_weight_noise(self, rng):
        # 1x1 kernel, one input channel, X ~ U(0,1), W ~ U(-1,1), 8 bits:
        # E{dW^2} = (2/256)^2/12 ~ 5.09e-6, output noise ~ that/3 ~ 1.70e-6
        kernel = np.array([[[[0.999999988]]]])
        node = LayerNode("L", "conv", ("input",), kernel, np.zeros(1), LINEAR)
        g = Graph([node], ["L"], (16, 16, 1))
        samples = [rng.random((1, 16, 16, 1)) for _ in range(64)]
        rec = calibrate(g, samples, count=64)
        pred = predict_sqnr(g, rec)["L"]
        assert pred.own_var_w == pytest.approx(1.70e-6, rel=0.02)
        # Monte-Carlo oracle: average realized weight-quantization noise over
        # many kernel draws
        total = 0.0
        draws = 400
        x_energy = rec.input_stats.mean_sq
        for _ in range(draws):
            w = rng.uniform(-1, 1)
            spec = QuantSpec.symmetric(1.0, bits=8)
            dw = (spec.scale * np.clip(np.round(w / spec.scale), -128, 128)) - w
            total += dw * dw * x_energy
        assert total / draws == pytest.approx(pred.own_var_w, rel=0.15)

    def test_extra_bit_quarters_noise(self, rng):
        g, samples = synthetic_layer(rng, cin=4, cout=4, spatial=8)
        rec = calibrate(g, samples, count=32)
        p8 = predict_sqnr(g, rec, bits_w=8, bits_a=8)["L"]
        p9 = predict_sqnr(g, rec, bits_w=9, bits_a=9)["L"]
        assert p9.own_var_w == pytest.approx(p8.own_var_w / 4, rel=1e-12)
        assert p9.own_var_a == pytest.approx(p8.own_var_a / 4, rel=1e-12)
        assert p9.sqnr_w_db - p8.sqnr_w_db == pytest.approx(10 * math.log10(4), abs=1e-9)

    def test_synthetic_layers_within_25_percent(self, rng):
        from equant.quantsim import quantize_graph

        for trial in range(10):
            g, samples = synthetic_layer(rng)
            rec = calibrate(g, samples, count=32)
            pred = predict_sqnr(g, rec)["L"]
            qw = quantize_graph(g, rec, "weights-only")
            qa = quantize_graph(g, rec, "activations-only")
            ew = ea = n = 0.0
            for s in samples:
                ref = g.run(s)
                dw = qw.run(s) - ref
                da = qa.run(s) - ref
                ew += np.sum(dw * dw)
                ea += np.sum(da * da)
                n += ref.size
            assert 0.75 <= (ew / n) / pred.own_var_w <= 1.25
            assert 0.75 <= (ea / n) / pred.own_var_a <= 1.25

    def test_propagation_within_25_percent(self, rng):
        # activation noise injected at layer 1 arrives at layer 2 scaled by
        # the mean squared-weight sum of layer 2's kernel
        from dataclasses import replace

        for trial in range(5):
            k1 = rng.uniform(-1, 1, (1, 1, 8, 8))
            k2 = rng.uniform(-1, 1, (3, 3, 8, 8))
            g = chain_graph([k1, k2], (10, 10, 8), activation=LINEAR,
                            padding="valid")
            samples = [rng.uniform(-1, 1, (1, 10, 10, 8)) for _ in range(32)]
            rec = calibrate(g, samples, count=32)
            # quantize only layer 1's activations
            spec = rec.act_spec("c0", 8)
            node = g.nodes["c0"]
            qg = g.with_nodes({"c0": replace(node, quant=LayerQuant(act=spec))})
            e1 = e2 = n1 = n2 = 0.0
            for s in samples:
                ref = g.execute(s, taps=["c0", "c1"]).taps
                got = qg.execute(s, taps=["c0", "c1"]).taps
                e1 += np.sum((got["c0"] - ref["c0"]) ** 2)
                n1 += ref["c0"].size
                e2 += np.sum((got["c1"] - ref["c1"]) ** 2)
                n2 += ref["c1"].size
            gain = float(np.sum(k2 * k2)) / k2.shape[3]
            predicted_l2 = gain * (e1 / n1)
            assert 0.75 <= (e2 / n2) / predicted_l2 <= 1.25

    def test_two_layer_full_three_term_sum(self, rng):
        # noise at layer 2 under (W1, Y1, W2) quantization is within 2x of the
        # sum of the three predicted terms
        from dataclasses import replace

        k1 = rng.uniform(-1, 1, (1, 1, 8, 8))
        k2 = rng.uniform(-1, 1, (3, 3, 8, 8))
        g = chain_graph([k1, k2], (10, 10, 8), activation=LINEAR, padding="valid")
        samples = [rng.uniform(-1, 1, (1, 10, 10, 8)) for _ in range(32)]
        rec = calibrate(g, samples, count=32)
        pred = predict_sqnr(g, rec)
        n1, n2 = g.nodes["c0"], g.nodes["c1"]
        qg = g.with_nodes({
            "c0": replace(n1, quant=LayerQuant(weight=weight_spec(n1),
                                               act=rec.act_spec("c0"))),
            "c1": replace(n2, quant=LayerQuant(weight=weight_spec(n2))),
        })
        err = n = 0.0
        for s in samples:
            ref = g.run(s)
            err += np.sum((qg.run(s) - ref) ** 2)
            n += ref.size
        measured = err / n
        gain = float(np.sum(k2 * k2)) / k2.shape[3]
        three_terms = (
            gain * pred["c0"].own_var_w
            + gain * pred["c0"].own_var_a
            + pred["c1"].own_var_w
        )
        assert three_terms / 2 <= measured <= three_terms * 2

    def test_missing_energy_statistics_error(self, rng):
        g = random_chain(rng, layers=2)
        rec = calibrate(g, [rng.random((1, 6, 6, 3)) for _ in range(4)], count=4)
        del rec.acts["c0"]
        with pytest.raises(CalibrationError, match="calibrat"):
            predict_sqnr(g, rec)

    def test_fixture_prediction_agreement(self, rng):
        # linear-activation fixtures satisfy the model's assumptions; most
        # layers agree within 3 dB
        within = total = 0
        for seed in range(3):
            fx = make_fixture(FixtureSpec(topology="chain", layers=6, channels=8,
                                          imbalance=1.0, seed=seed,
                                          activation="linear"))
            rec = calibrate(fx.graph, fx.samples(64), count=64)
            rep = measure_sqnr(fx.graph, rec, list(fx.samples(64)))
            pred = predict_sqnr(fx.graph, rec)
            for row in rep.layers:
                for meas, pr in (
                    (row.sqnr_db("w"), pred[row.layer_id].sqnr_w_db),
                    (row.sqnr_db("a"), pred[row.layer_id].sqnr_a_db),
                ):
                    total += 1
                    within += abs(meas - pr) <= 3.0
        assert within / total >= 0.8


class TestOptimalEqualizationBound:
    def test_equal_extrema_is_fixed_point(self):
        k = np.zeros((1, 1, 1, 2))
        k[0, 0, 0] = [1.0, -1.0]
        g = chain_graph([k], (2, 2, 1), activation=LINEAR)
        from equant.quantsim import CalibrationRecord, TensorStats

        stats = TensorStats(
            min=-2.0, max=2.0,
            ch_min=np.array([-2.0, -2.0]),
            ch_max=np.array([2.0, 2.0]),
            mean_sq=1.0,
            ch_mean_sq=np.array([1.3, 0.7]),
        )
        rec = CalibrationRecord(
            acts={"c0": stats},
            input_stats=TensorStats(0.0, 1.0, np.zeros(1), np.ones(1), 1 / 3,
                                    np.array([1 / 3])),
            sample_count=1,
        )
        rec.refresh_weights(g)
        for target in ("weights", "activations"):
            bound = optimal_equalization_bound(g, rec, target)["c0"]
            assert bound.gap_db == pytest.approx(0.0, abs=1e-12)

    def test_two_channel_closed_form(self):
        # channels with extrema [1, 10] and equal energies: OE scales channel
        # 0 by 10, gain = 10*log10((100 + 1) * e / (2 * e))
        k = np.zeros((1, 1, 1, 2))
        k[0, 0, 0] = [0.3, 0.7]
        g = chain_graph([k], (2, 2, 1), activation=LINEAR)
        from equant.quantsim import CalibrationRecord, TensorStats

        stats = TensorStats(
            min=0.0, max=10.0,
            ch_min=np.array([0.0, 0.0]),
            ch_max=np.array([1.0, 10.0]),
            mean_sq=5.0,
            ch_mean_sq=np.array([5.0, 5.0]),
        )
        rec = CalibrationRecord(
            acts={"c0": stats},
            input_stats=TensorStats(0.0, 1.0, np.zeros(1), np.ones(1), 1 / 3,
                                    np.array([1 / 3])),
            sample_count=1,
        )
        rec.refresh_weights(g)
        bound = optimal_equalization_bound(g, rec, "activations")["c0"]
        expected_gain = 10 * math.log10((100 * 5.0 + 5.0) / 10.0)
        assert bound.gap_db == pytest.approx(expected_gain, rel=1e-9)

    def test_equalization_narrows_gap_to_bound(self, rng):
        # greedy passes may regress single layers; the mean gap must shrink
        fx = make_fixture(FixtureSpec(topology="chain", layers=4, channels=8,
                                      imbalance=50.0, seed=0))
        rec = calibrate(fx.graph, fx.samples(32), count=32)
        before = optimal_equalization_bound(fx.graph, rec, "activations")
        res = two_step_equalize(fx.graph, rec)
        after = optimal_equalization_bound(res.graph, res.calibration, "activations")
        gaps_before = [before[lid].gap_db for lid in res.scales]
        gaps_after = [after[lid].gap_db for lid in res.scales]
        assert np.mean(gaps_after) < np.mean(gaps_before)

    def test_weights_target(self, rng):
        g = random_chain(rng, layers=2)
        rec = calibrate(g, [rng.random((1, 6, 6, 3)) for _ in range(4)], count=4)
        bounds = optimal_equalization_bound(g, rec, "weights")
        for b in bounds.values():
            assert b.oe_db >= b.current_db - 1e-9

    def test_unknown_target_rejected(self, rng):
        g = random_chain(rng, layers=1)
        rec = calibrate(g, [rng.random((1, 6, 6, 3)) for _ in range(2)], count=2)
        with pytest.raises(EquantError, match="target"):
            optimal_equalization_bound(g, rec, "biases")


class TestCompareRuns:
    def _report(self, rng, seed=0):
        fx = make_fixture(FixtureSpec(topology="chain", layers=3, channels=4,
                                      imbalance=10.0, seed=seed))
        rec = calibrate(fx.graph, fx.samples(16), count=16)
        return fx, rec, measure_sqnr(fx.graph, rec, list(fx.samples(16)))

    def test_single_report_identity_table(self, rng):
        _, _, rep = self._report(rng)
        csv = compare_runs([rep], ["base"])
        lines = csv.strip().split("\n")
        assert lines[0].startswith("index,layer_id,base_sqnr_w_db")
        assert len(lines) == 1 + len(rep.layers)

    def test_post_equalization_dominates(self, rng):
        from equant.equalize import one_step_equalize

        fx, rec, before = self._report(rng)
        res = one_step_equalize(fx.graph, rec)
        after = measure_sqnr(res.graph, res.calibration, list(fx.samples(16)))
        csv = compare_runs([before, after], ["pre", "post"])
        assert sum(r.sqnr_db("a") for r in after.layers) > sum(
            r.sqnr_db("a") for r in before.layers
        )
        assert "pre_sqnr_a_db" in csv and "post_sqnr_a_db" in csv

    def test_per_run_sort_is_monotone(self, rng):
        _, _, rep = self._report(rng)
        csv = compare_runs([rep], ["r"], sort="per-run")
        lines = csv.strip().split("\n")
        col = [float(line.split(",")[1]) for line in lines[1:]]
        assert col == sorted(col, reverse=True)

    def test_by_first_run_sort_is_monotone_in_key(self, rng):
        _, _, rep = self._report(rng)
        csv = compare_runs([rep], ["r"], sort="by-first-run")
        lines = csv.strip().split("\n")
        header = lines[0].split(",")
        a_col = header.index("r_sqnr_a_db")
        vals = [float(line.split(",")[a_col]) for line in lines[1:]]
        assert vals == sorted(vals, reverse=True)

    def test_mismatched_layer_sets_rejected(self, rng):
        _, _, a = self._report(rng, seed=0)
        fx = make_fixture(FixtureSpec(topology="chain", layers=4, channels=4,
                                      imbalance=10.0, seed=1))
        rec = calibrate(fx.graph, fx.samples(8), count=8)
        b = measure_sqnr(fx.graph, rec, list(fx.samples(8)))
        with pytest.raises(EquantError, match="different layer sets"):
            compare_runs([a, b])

    def test_label_count_mismatch(self, rng):
        _, _, rep = self._report(rng)
        with pytest.raises(EquantError, match="label"):
            compare_runs([rep], ["a", "b"])
