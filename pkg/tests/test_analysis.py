import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from entvae.analysis import (
    LatentRule,
    SweepResult,
    beta_sweep,
    export_latent_csv,
    fit_latent_rule,
    latent_rule_accuracy,
    train_and_score,
)
from entvae.bvae import BvaeConfig
from entvae.dataset import generate, generate_split, project
from entvae.trainer import TrainConfig

SMALL = BvaeConfig().scaled(16)


@pytest.fixture(scope="module")
def split():
    return generate_split(60, 40, seed=2)


class TestLatentRule:
    def test_all_positive_separable(self):
        rule, acc = fit_latent_rule(np.ones((10, 2)), np.zeros(10, dtype=int))
        assert acc == 1.0 and rule.separable_positive

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(0)
        _, acc = fit_latent_rule(rng.standard_normal((1000, 2)), rng.integers(0, 2, 1000))
        assert abs(acc - 0.5) <= 0.03

    def test_mirror_flips_polarity(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((200, 2))
        y = (z[:, 1] < 0.2).astype(int)
        rule, acc = fit_latent_rule(z, y)
        mirrored = z.copy()
        mirrored[:, rule.axis] *= -1
        rule_m, acc_m = fit_latent_rule(mirrored, y)
        assert acc_m == acc
        assert (rule_m.axis, rule_m.separable_positive) == (rule.axis, not rule.separable_positive)

    def test_reported_accuracy_is_consistent(self):
        rng = np.random.default_rng(2)
        z, y = rng.standard_normal((300, 2)), rng.integers(0, 2, 300)
        rule, acc = fit_latent_rule(z, y)
        assert latent_rule_accuracy(rule, z, y) == acc

    def test_tie_break_order(self):
        # every rule scores 0.5 here, so the first candidate wins
        z = np.array([[1.0, 1.0], [-1.0, -1.0]])
        rule, acc = fit_latent_rule(z, np.array([0, 0]))
        assert acc == 0.5 and rule == LatentRule(0, True)

    def test_zero_is_on_the_negative_side(self):
        assert LatentRule(0, True).predict(np.zeros((1, 2)))[0] == 1
        assert LatentRule(0, False).predict(np.zeros((1, 2)))[0] == 0

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_latent_rule(np.empty((0, 2)), np.empty(0, dtype=int))
        with pytest.raises(ValueError):
            LatentRule(axis=2)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(2)), elements=st.floats(-5, 5)),
           st.data())
    def test_best_rule_at_least_half(self, z, data):
        y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(z), max_size=len(z))))
        assert fit_latent_rule(z, y)[1] >= 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1), st.booleans())
    def test_positive_rescaling_invariant(self, scale, axis, positive):
        rng = np.random.default_rng(3)
        z, y = rng.standard_normal((100, 2)), rng.integers(0, 2, 100)
        rule = LatentRule(axis, positive)
        scaled = z.copy()
        scaled[:, axis] *= scale
        assert latent_rule_accuracy(rule, scaled, y) == latent_rule_accuracy(rule, z, y)


class TestSweep:
    def test_single_point_matches_standalone_fit(self, split):
        train, test = split
        base = TrainConfig(epochs=2, seed=4)
        sweep = beta_sweep(base, train, test, [0.01], model_config=SMALL)
        solo = train_and_score(train, test, TrainConfig(epochs=2, seed=4, beta=5.0), SMALL)
        assert len(sweep) == 1
        row = sweep.rows[0]
        assert (row.ratio, row.seed) == (0.01, 4)
        assert row.model_acc == solo.model_acc and row.latent_acc == solo.latent_acc

    def test_empty(self, split):
        assert len(beta_sweep(TrainConfig(epochs=1), *split, [])) == 0

    def test_rejects_non_positive(self, split):
        with pytest.raises(ValueError):
            beta_sweep(TrainConfig(epochs=1), *split, [0.1, 0.0])

    def test_rows_sorted_and_reproducible(self, split):
        base = TrainConfig(epochs=1, seed=1)
        a = beta_sweep(base, *split, [1.0, 1e-3], seeds=[1, 2], model_config=SMALL)
        b = beta_sweep(base, *split, [1e-3, 1.0], seeds=[1, 2], model_config=SMALL)
        assert [r.ratio for r in a.rows] == [1e-3, 1e-3, 1.0, 1.0]
        assert a.to_csv_text() == b.to_csv_text()
        assert a.to_csv_text().splitlines()[0] == "ratio,seed,model_acc,latent_acc"

    def test_accuracy_lookup(self):
        from entvae.analysis import SweepRow
        res = SweepResult([SweepRow(0.1, 0, 0.8, 0.7), SweepRow(0.1, 1, 0.6, 0.5)])
        assert res.accuracy(0.1) == pytest.approx(0.7)
        assert res.accuracy(0.1, "latent_acc") == pytest.approx(0.6)
        with pytest.raises(KeyError):
            res.accuracy(0.2)


@pytest.fixture(scope="module")
def run():
    train, test = generate_split(40, 30, seed=6)
    return train_and_score(train, test, TrainConfig(epochs=1), SMALL), test


class TestExport:
    def test_rows_and_labels(self, run, tmp_path):
        res, test = run
        path = tmp_path / "latent.csv"
        export_latent_csv(res.model, test, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(test)
        assert list(rows[0]) == ["z0", "z1", "label"]
        assert [int(r["label"]) for r in rows] == test.labels.tolist()
        np.testing.assert_array_equal([[float(r["z0"]), float(r["z1"])] for r in rows],
                                      res.model.latent_mean(test.features))

    def test_re_export_identical(self, run, tmp_path):
        res, test = run
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        export_latent_csv(res.model, test, a)
        export_latent_csv(res.model, test, b)
        assert a.read_bytes() == b.read_bytes()

    def test_subset_mismatch(self, run, tmp_path):
        res, _ = run
        with pytest.raises(ValueError):
            export_latent_csv(res.model, project(generate(5, 1), "local"), tmp_path / "x.csv")

    def test_unwritable(self, run, tmp_path):
        res, test = run
        with pytest.raises(OSError):
            export_latent_csv(res.model, test, tmp_path / "missing" / "x.csv")
