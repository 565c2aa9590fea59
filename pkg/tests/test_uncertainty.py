import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aaforecast import uncertainty as unc
from aaforecast.model import AAModel, ModelConfig
from aaforecast.series import FeatureWindow
from oracles import two_pass_stats


def _model(seed=0, tau=4):
    return AAModel(ModelConfig(hidden=3, tau=tau, seed=seed))


def _window(seed=0, tau=4, critical=(1,)):
    f = np.random.default_rng(seed).normal(size=(tau, 6))
    f[:, 1] = 0.0
    f[:, 4] = 1.0
    for k in critical:
        f[k, 1] = 1.0
    return FeatureWindow(f, 0.0, ("s", 30))


def _digest(model):
    h = hashlib.sha256()
    for k in sorted(model.store.names()):
        h.update(k.encode())
        h.update(model.store[k].tobytes())
    return h.hexdigest()


class TestStats:
    def test_constant(self):
        assert unc.predictive_stats([2.5] * 7) == (2.5, 0.0)

    def test_hand(self):
        assert unc.predictive_stats([0.0, 2.0]) == (1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60))
    def test_two_pass_oracle(self, xs):
        mean, sd = unc.predictive_stats(xs)
        om, osd = two_pass_stats(xs)
        assert abs(mean - om) <= 1e-12 * max(1.0, abs(om))
        assert abs(sd - osd) <= 1e-12 * max(1.0, osd)

    def test_empty(self):
        with pytest.raises(ValueError):
            unc.predictive_stats([])


class TestMcSample:
    def test_p_zero_identical(self):
        s = unc.mc_sample(_model(), _window(), 0.0, 20, np.random.default_rng(0))
        assert np.all(s == s[0])
        assert unc.predictive_stats(s)[1] == 0.0

    def test_seeded(self):
        a = unc.mc_sample(_model(), _window(), 0.3, 50, np.random.default_rng(3))
        b = unc.mc_sample(_model(), _window(), 0.3, 50, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_sd_stabilizes(self):
        s = unc.mc_sample(_model(), _window(), 0.3, 1000, np.random.default_rng(1))
        sd1, sd2 = np.std(s[:500]), np.std(s[500:])
        assert abs(sd1 - sd2) / max(sd1, sd2) < 0.15

    def test_errors(self):
        with pytest.raises(ValueError):
            unc.mc_sample(_model(), _window(), 1.0, 10, np.random.default_rng(0))
        with pytest.raises(ValueError):
            unc.mc_sample(_model(), _window(), 0.2, 1, np.random.default_rng(0))


class TestDynamic:
    def test_minimum_at_half(self, monkeypatch):
        def fake(model, A, p, n, rng):
            base = rng.normal(size=n)
            base = (base - base.mean()) / base.std()
            return 3.0 + (0.1 + abs(p - 0.5)) * base
        monkeypatch.setattr(unc, "sample_encoded", fake)
        d = unc.dynamic_optimize(_model(), _window(), n_samples=50, seed=0)
        assert d.chosen_p == 0.5
        assert d.sd == pytest.approx(0.1)

    def test_tie_prefers_smaller_p(self, monkeypatch):
        monkeypatch.setattr(unc, "sample_encoded", lambda m, A, p, n, rng: np.array([0.0, 2.0] * (n // 2)))
        assert unc.dynamic_optimize(_model(), _window(), grid=(0.7, 0.3, 0.5), n_samples=10).chosen_p == 0.3

    def test_singleton_grid(self):
        assert unc.dynamic_optimize(_model(), _window(), grid=(0.4,), n_samples=20).chosen_p == 0.4

    def test_empty_grid(self):
        with pytest.raises(ValueError, match="empty"):
            unc.dynamic_optimize(_model(), _window(), grid=(), n_samples=20)

    @pytest.mark.parametrize("seed", range(4))
    def test_argmin_contract_and_no_training(self, seed):
        m = _model(seed)
        w = _window(seed)
        before = _digest(m)
        d = unc.dynamic_optimize(m, w, n_samples=40, seed=seed)
        assert _digest(m) == before
        A = unc._encode_window(m, w, None)
        replay = {p: unc.predictive_stats(unc.sample_encoded(m, A, p, 40, unc.stream(seed, 30, p)))[1]
                  for p in unc.DEFAULT_GRID}
        assert replay == d.grid_sd
        assert d.sd == min(replay.values())
        assert d.chosen_p == min(p for p, s in replay.items() if s == d.sd)
        assert all(d.sd <= s for s in replay.values())
        assert d.mean == pytest.approx(float(np.mean(d.samples)), abs=1e-12)

    def test_reproducible(self):
        a = unc.dynamic_optimize(_model(), _window(), n_samples=30, seed=5)
        b = unc.dynamic_optimize(_model(), _window(), n_samples=30, seed=5)
        assert (a.chosen_p, a.mean, a.sd) == (b.chosen_p, b.mean, b.sd)

    def test_steps_use_independent_streams(self):
        m, w = _model(), _window()
        a = unc.dynamic_optimize(m, w, n_samples=30, seed=5, step=1)
        b = unc.dynamic_optimize(m, w, n_samples=30, seed=5, step=2)
        again = unc.dynamic_optimize(m, w, n_samples=30, seed=5, step=2)
        assert not np.array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(b.samples, again.samples)

    def test_default_grid(self):
        assert unc.DEFAULT_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def test_quantiles(self):
        d = unc.static_encoded(_model(), unc._encode_window(_model(), _window(), None), 0.3, 200)
        q = d.quantiles()
        assert q[0] <= q[1] <= q[2]
