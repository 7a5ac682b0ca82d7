import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstad import data as d
from mstad import evaluation as ev
from mstad import model as mdl
from mstad import training as tr
from mstad.errors import ConfigError, ContractError, MetricError, ReportError


class TestConfusion:
    def test_basic_counts(self):
        c = ev.confusion([0.9, 0.1], [1, 0])
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 0, 1, 0)

    def test_tie_at_threshold_predicts_positive(self):
        c = ev.confusion([0.5], [0])
        assert c.fp == 1

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=1000)
        labels = rng.integers(0, 2, 1000)
        c = ev.confusion(scores, labels, threshold=0.35)
        tp = fp = tn = fn = 0
        for s, y in zip(scores, labels):
            pred = s >= 0.35
            if pred and y == 1:
                tp += 1
            elif pred and y == 0:
                fp += 1
            elif not pred and y == 0:
                tn += 1
            else:
                fn += 1
        assert (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            ev.confusion([0.5, 0.5], [1])


class TestPrecisionRecallF1:
    def test_closed_form(self):
        p, r, f1 = ev.precision_recall_f1(ev.ConfusionCounts(tp=9, fp=1, tn=0, fn=3))
        assert p == 0.9
        assert r == 0.75
        assert abs(f1 - 2 * 0.9 * 0.75 / 1.65) < 1e-12

    def test_zero_denominator_convention(self):
        p, r, f1 = ev.precision_recall_f1(ev.ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
        assert (p, r, f1) == (0.0, 0.0, 0.0)

    def test_published_row_arithmetic(self):
        # published headline row: P=0.902, R=0.887 must give F1 ~ 0.894
        p, r = 0.902, 0.887
        f1 = 2 * p * r / (p + r)
        assert abs(f1 - 0.894) < 0.0005


class TestAuc:
    def test_perfect_separation(self):
        assert ev.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert ev.auc([0.5] * 6, [1, 1, 1, 0, 0, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            ev.auc([0.5, 0.6], [1, 1])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n = int(rng.integers(10, 200))
            scores = np.round(rng.uniform(size=n), 2)  # rounding forces ties
            labels = rng.integers(0, 2, n)
            if labels.sum() in (0, n):
                continue
            assert abs(ev.auc(scores, labels) - ev.auc_pairwise(scores, labels)) < 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=300)
        labels = rng.integers(0, 2, 300)
        base = ev.auc(scores, labels)
        assert abs(ev.auc(np.exp(scores), labels) - base) < 1e-12
        assert abs(ev.auc(3 * scores + 1, labels) - base) < 1e-12

    @given(st.lists(st.tuples(st.integers(0, 100), st.integers(0, 1)),
                    min_size=4, max_size=60))
    @settings(max_examples=80, deadline=None)
    def test_sort_based_equals_pairwise(self, pairs):
        scores = np.array([p[0] for p in pairs], dtype=float)
        labels = np.array([p[1] for p in pairs])
        if labels.sum() in (0, len(labels)):
            return
        assert abs(ev.auc(scores, labels) - ev.auc_pairwise(scores, labels)) < 1e-12


def tiny_trained(seed=0):
    cfg = mdl.ModelConfig(feature_dim=3, window_len=8, model_dim=8, heads=2,
                          layers_per_scale=1, ffn_dim=16, num_scales=2,
                          scale_factors=(1, 2))
    params = mdl.init_params(cfg, seed)
    return cfg, params


def tiny_windows(n=40, seed=0):
    rng = np.random.default_rng(seed)
    windows = rng.normal(0, 0.3, size=(n, 8, 3))
    labels = np.zeros(n, dtype=int)
    labels[: n // 2] = 1
    windows[: n // 2, 4, :] += 4.0
    order = rng.permutation(n)
    return d.WindowSet(windows[order], labels[order], np.arange(n))


class TestEvaluate:
    def test_counts_sum_to_window_count(self):
        cfg, params = tiny_trained()
        ws = tiny_windows(30)
        rep = ev.evaluate(params, ws)
        assert rep.tp + rep.fp + rep.tn + rep.fn == len(ws)
        assert rep.n_samples == len(ws)

    def test_f1_identity_holds(self):
        cfg, params = tiny_trained(1)
        rep = ev.evaluate(params, tiny_windows(50, seed=3))
        if rep.precision + rep.recall > 0:
            want = 2 * rep.precision * rep.recall / (rep.precision + rep.recall)
            assert abs(rep.f1 - want) < 1e-12

    def test_report_matches_score_dump_recomputation(self, tmp_path):
        cfg, params = tiny_trained(2)
        ws = tiny_windows(40, seed=4)
        scores = mdl.score_windows(ws.windows, params)
        rep = ev.evaluate(params, ws)
        dump = tmp_path / "scores.txt"
        ev.write_score_dump(scores, ws.labels, dump)
        s2, y2 = ev.read_score_dump(dump)
        rep2 = ev.report_from_scores(s2, y2)
        assert rep2 == rep

    def test_constant_scorer_ties(self):
        scores = np.full(20, 0.5)
        labels = np.array([1] * 5 + [0] * 15)
        rep = ev.report_from_scores(scores, labels)
        assert rep.auc == 0.5           # all ties get half credit
        assert rep.tp == 5 and rep.fp == 15  # tie at threshold predicts positive


def sweep_fixtures():
    ws = tiny_windows(60, seed=7)
    train_ws, test_ws = d.split_train_test(ws, 0.7, seed=1)
    mcfg = mdl.ModelConfig(feature_dim=3, window_len=8, model_dim=8, heads=2,
                           layers_per_scale=1, ffn_dim=16, num_scales=2,
                           scale_factors=(1, 2))
    tcfg = tr.TrainConfig(max_epochs=2, batch_size=16, initial_lr=1e-3,
                          val_fraction=0.25, patience=2)
    return mcfg, tcfg, train_ws, test_ws


class TestRunSweep:
    def test_single_value_grid_equals_direct_evaluate(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        res = ev.run_sweep("learning_rate", [1e-3], mcfg, tcfg, train_ws, test_ws,
                           seeds=[5])
        params = mdl.init_params(mcfg, 5)
        from dataclasses import replace
        params, _ = tr.train(params, train_ws, replace(tcfg, initial_lr=1e-3, seed=5))
        direct = ev.evaluate(params, test_ws)
        row = res.rows[0]
        assert row.status == "ok"
        assert row.n_seeds == 1
        assert abs(row.f1 - direct.f1) < 1e-12
        assert abs(row.auc - direct.auc) < 1e-12

    def test_noise_grid_emits_all_rows(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        res = ev.run_sweep("noise", [0.0, 0.1, 0.25, 0.5], mcfg, tcfg,
                           train_ws, test_ws, seeds=[0])
        assert [r.value for r in res.rows] == [0.0, 0.1, 0.25, 0.5]

    def test_rows_follow_grid_order_and_share_seeds(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        res = ev.run_sweep("optimizer", ["adagrad", "sgd"], mcfg, tcfg,
                           train_ws, test_ws, seeds=[0, 1])
        assert [r.value for r in res.rows] == ["adagrad", "sgd"]
        assert all(r.n_seeds == 2 for r in res.rows)

    def test_trial_failure_recorded_row_continues(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        # optimizer name is validated inside the trial, so the bad row fails
        # while the good row still completes
        res = ev.run_sweep("optimizer", ["bogus", "sgd"], mcfg, tcfg,
                           train_ws, test_ws, seeds=[0])
        assert res.rows[0].status.startswith("failed")
        assert math.isnan(res.rows[0].f1)
        assert res.rows[1].status == "ok"

    def test_empty_grid_rejected(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        with pytest.raises(ConfigError):
            ev.run_sweep("noise", [], mcfg, tcfg, train_ws, test_ws, seeds=[0])

    def test_deterministic_rows(self):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        r1 = ev.run_sweep("activation", ["relu"], mcfg, tcfg, train_ws, test_ws, seeds=[3])
        r2 = ev.run_sweep("activation", ["relu"], mcfg, tcfg, train_ws, test_ws, seeds=[3])
        assert r1.rows[0] == r2.rows[0]


class TestEmitReport:
    def test_sweep_csv_header_and_roundtrip(self, tmp_path):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        res = ev.run_sweep("learning_rate", [1e-3, 3e-4], mcfg, tcfg,
                           train_ws, test_ws, seeds=[0])
        path = tmp_path / "sweep.csv"
        ev.emit_report(res, path, "csv")
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "value,precision,recall,auc,f1,n_seeds,status"
        rows = ev.parse_sweep_csv(path)
        assert len(rows) == 2
        for row, orig in zip(rows, res.rows):
            assert abs(row["f1"] - orig.f1) < 1e-6
            assert abs(row["auc"] - orig.auc) < 1e-6

    def test_metrics_roundtrip_csv_and_json(self, tmp_path):
        rep = ev.MetricsReport(precision=0.9, recall=0.75, f1=0.818182, auc=0.95,
                               tp=9, fp=1, tn=20, fn=3, threshold=0.5, n_samples=33)
        cpath = tmp_path / "m.csv"
        ev.emit_report(rep, cpath, "csv")
        back = ev.parse_metrics_csv(cpath)
        assert abs(back.precision - rep.precision) < 1e-6
        assert back.tp == rep.tp
        jpath = tmp_path / "m.json"
        ev.emit_report(rep, jpath, "json")
        import json
        assert ev.MetricsReport.from_dict(json.loads(jpath.read_text())) == rep

    def test_emitted_bytes_deterministic(self, tmp_path):
        mcfg, tcfg, train_ws, test_ws = sweep_fixtures()
        paths = []
        for i in range(2):
            res = ev.run_sweep("noise", [0.0, 0.1], mcfg, tcfg, train_ws, test_ws,
                               seeds=[0, 1])
            p = tmp_path / f"s{i}.csv"
            ev.emit_report(res, p, "csv")
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]

    def test_empty_write_rejected(self, tmp_path):
        with pytest.raises(ReportError):
            ev.emit_report("not a report", tmp_path / "x.csv", "csv")

    def test_unknown_format_rejected(self, tmp_path):
        rep = ev.MetricsReport(precision=1, recall=1, f1=1, auc=1, tp=1, fp=0,
                               tn=1, fn=0, threshold=0.5, n_samples=2)
        with pytest.raises(ConfigError):
            ev.emit_report(rep, tmp_path / "x.yaml", "yaml")
