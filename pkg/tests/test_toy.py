import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from glpe_marl.estimators import FlatMlpRegressor, GlpeRegressor
from glpe_marl.toy import (MODES, VARIANTS, ToyRunConfig, ToyTask, final_mse, generate_batch, joint_targets,
                           read_rows, run_single, run_toy_experiment, write_rows)


def brute_force_targets(mode, x):
    """Independent per-agent loop over the target formulas."""
    count, n, d = x.shape
    y = np.empty_like(x)
    for b in range(count):
        for k in range(d):
            col = [x[b, j, k] for j in range(n)]
            total = 0.0
            for v in col:
                total += v
            mean, peak = total / n, max(col)
            stat = {"mean": mean, "sum": total, "max": peak, "mix": (mean + total + peak) / 3.0}[mode]
            for i in range(n):
                y[b, i, k] = x[b, i, k] + stat
    return y


class TestTargets:
    def test_mean_example(self):
        np.testing.assert_array_equal(joint_targets("mean", np.array([[1.0, 2.0], [3.0, 4.0]])),
                                      [[3.0, 5.0], [5.0, 7.0]])

    def test_sum_of_zeros(self):
        assert not joint_targets("sum", np.zeros((4, 2))).any()

    def test_mix_single_agent_doubles(self):
        x = np.array([[1.5, -2.0]])
        np.testing.assert_array_equal(joint_targets("mix", x), 2 * x)

    @pytest.mark.parametrize("mode", MODES)
    def test_matches_brute_force(self, mode):
        rng = np.random.default_rng(0)
        x, y = generate_batch(ToyTask(mode, 7), 1000, rng)
        np.testing.assert_allclose(y, brute_force_targets(mode, x), rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from(MODES), st.integers(1, 9), st.integers(0, 10_000))
    def test_targets_permute_with_inputs(self, mode, n, seed):
        rng = np.random.default_rng(seed)
        x, y = generate_batch(ToyTask(mode, n), 3, rng)
        perm = rng.permutation(n)
        np.testing.assert_allclose(joint_targets(mode, x[:, perm]), y[:, perm], rtol=0, atol=1e-12)

    def test_inputs_in_range(self):
        x, _ = generate_batch(ToyTask("mean", 5), 500, np.random.default_rng(1))
        assert x.shape == (500, 5, 2)
        assert x.min() >= 0 and x.max() <= 5

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ToyTask("median", 3)


class TestRuns:
    def test_mlp_learns_mean_task(self):
        cfg = ToyRunConfig(epochs=300)
        curve = run_single("mean", 5, "mlp", 0, cfg)
        assert len(curve) == 300
        assert np.mean(curve[-10:]) * 10 <= curve[0]

    def test_deterministic_csv(self, tmp_path):
        cfg = ToyRunConfig(modes=("mix",), agents=(3,), seeds=2, variants=("mlp", "pe-mean-tanh"), epochs=5)
        for name in ("a.csv", "b.csv"):
            run_toy_experiment(cfg, tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_rows_round_trip(self, tmp_path):
        rows = [("mean", 5, "mlp", 0, 0, 1.25), ("mean", 5, "mlp", 0, 1, 0.5)]
        write_rows(tmp_path / "t.csv", rows)
        assert read_rows(tmp_path / "t.csv") == rows
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "mode,N,variant,seed,epoch,mse"

    def test_final_mse_window_and_divergence(self):
        rows = [("mean", 5, "mlp", 0, e, float(e)) for e in range(20)]
        rows += [("mean", 5, "mlp", 1, e, 1.0) for e in range(20)]
        rows += [("mean", 5, "pe-mean", 0, 0, 1.0), ("mean", 5, "pe-mean", 0, 1, float("nan"))]
        out = final_mse(rows, window=10)
        assert out[("mean", 5, "mlp")] == pytest.approx((14.5 + 1.0) / 2)
        assert out[("mean", 5, "pe-mean")] == float("inf")

    def test_seven_variants(self):
        assert len(VARIANTS) == 7 and "mlp" in VARIANTS


class TestEstimators:
    def test_get_params_and_clone(self):
        est = GlpeRegressor(hidden=8, pooling="max", random_state=3)
        params = est.get_params()
        assert params["pooling"] == "max" and params["hidden"] == 8
        cloned = clone(est)
        assert cloned.get_params() == params and cloned is not est

    def test_set_params(self):
        est = FlatMlpRegressor().set_params(hidden=4, epochs=2)
        assert est.hidden == 4 and est.epochs == 2

    def test_fit_predict_score(self):
        rng = np.random.default_rng(0)
        x, y = generate_batch(ToyTask("mean", 4), 128, rng)
        est = GlpeRegressor(hidden=16, epochs=40, lr=3e-3, global_activation="identity", random_state=0)
        est.fit(x, y)
        assert est.predict(x).shape == y.shape
        assert est.score(x, y) > 0.9
        assert est.n_features_in_ == 2 and est.n_agents_ == 4

    def test_glpe_regressor_accepts_other_agent_counts(self):
        rng = np.random.default_rng(0)
        x, y = generate_batch(ToyTask("mean", 4), 16, rng)
        est = GlpeRegressor(hidden=8, epochs=1, random_state=0).fit(x, y)
        assert est.predict(np.ones((2, 9, 2))).shape == (2, 9, 2)

    def test_flat_mlp_is_tied_to_agent_count(self):
        rng = np.random.default_rng(0)
        x, y = generate_batch(ToyTask("mean", 4), 16, rng)
        est = FlatMlpRegressor(hidden=8, epochs=1, random_state=0).fit(x, y)
        with pytest.raises(ValueError):
            est.predict(np.ones((2, 5, 2)))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            GlpeRegressor().predict(np.ones((1, 2, 2)))

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            GlpeRegressor(epochs=1).fit(np.ones((4, 3)), np.ones((4, 3, 1)))
        with pytest.raises(ValueError):
            GlpeRegressor(epochs=1).fit(np.full((2, 3, 1), np.nan), np.ones((2, 3, 1)))

    def test_same_seed_same_model(self):
        rng = np.random.default_rng(0)
        x, y = generate_batch(ToyTask("sum", 3), 32, rng)
        a = GlpeRegressor(hidden=8, epochs=3, random_state=5).fit(x, y).predict(x)
        b = GlpeRegressor(hidden=8, epochs=3, random_state=5).fit(x, y).predict(x)
        assert a.tobytes() == b.tobytes()
