import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aaforecast.series import (CsvSchema, Dataset, FeatureWindow, Normalizer, RawSeries, ScenarioConfig,
                               SeriesError, load_csv, make_windows, split_80_20, synth_generate, write_csv)


def _series(T, sid="a", cycle=2):
    return RawSeries(sid, np.arange(T), np.linspace(1, 2, T), np.zeros(T), cycle)


class TestRawSeries:
    def test_valid(self):
        s = _series(6)
        assert len(s) == 6

    def test_length_mismatch(self):
        with pytest.raises(SeriesError, match="differ in length"):
            RawSeries("a", np.arange(3), [1.0, 2.0], [0, 0, 0], 1)

    def test_negative_event(self):
        with pytest.raises(SeriesError, match="negative event"):
            RawSeries("a", np.arange(3), [1.0, 2.0, 3.0], [0, -1, 0], 1)

    def test_non_uniform_spacing(self):
        with pytest.raises(SeriesError, match="non-uniform spacing"):
            RawSeries("a", np.array([0, 1, 3]), [1.0, 2.0, 3.0], [0, 0, 0], 1)

    def test_non_increasing(self):
        with pytest.raises(SeriesError, match="strictly increasing"):
            RawSeries("a", np.array([2, 1, 0]), [1.0, 2.0, 3.0], [0, 0, 0], 1)


class TestLoadCsv:
    def test_events_absent_default_zero(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value\nx,0,1.5\nx,1,2.5\nx,2,3.5\n")
        d = load_csv(p)
        assert len(d) == 1
        s = d.series[0]
        np.testing.assert_array_equal(s.events, [0, 0, 0])
        np.testing.assert_array_equal(s.values, [1.5, 2.5, 3.5])

    def test_interleaved_ids_sorted(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value,event_level\n"
                     "b,2,30,0\na,1,2,1\nb,0,10,0\na,0,1,0\nb,1,20,2\na,2,3,0\n")
        d = load_csv(p)
        assert sorted(d.ids) == ["a", "b"]
        b = d.subset(["b"]).series[0]
        np.testing.assert_array_equal(b.values, [10, 20, 30])
        np.testing.assert_array_equal(b.events, [0, 2, 0])

    def test_gap_is_error(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value\nx,0,1\nx,1,2\nx,3,3\n")
        with pytest.raises(SeriesError, match="non-uniform spacing"):
            load_csv(p)

    def test_iso_timestamps(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value\nx,2020-01-03,3\nx,2020-01-01,1\nx,2020-01-02,2\n")
        s = load_csv(p).series[0]
        np.testing.assert_array_equal(s.values, [1, 2, 3])

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,time,value\nx,0,1\n")
        with pytest.raises(SeriesError, match="missing column 'timestamp'"):
            load_csv(p)

    def test_duplicate_timestamp(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value\nx,0,1\nx,0,2\n")
        with pytest.raises(SeriesError, match="duplicate timestamp"):
            load_csv(p)

    def test_unparseable_number(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("series_id,timestamp,value\nx,0,abc\n")
        with pytest.raises(SeriesError, match="unparseable number"):
            load_csv(p)

    def test_custom_schema(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,t,y,lvl\nx,0,1,0\nx,1,2,3\n")
        s = load_csv(p, CsvSchema("id", "t", "y", "lvl", cycle=4)).series[0]
        assert s.cycle == 4
        np.testing.assert_array_equal(s.events, [0, 3])

    def test_write_read_roundtrip(self, tmp_path):
        cfg = ScenarioConfig(T=30, cycle=6, noise=0.05, events=[(4, 2.0)], series_id="r")
        d = Dataset([synth_generate(cfg, 3)])
        write_csv(tmp_path / "o.csv", d)
        back = load_csv(tmp_path / "o.csv", CsvSchema(cycle=6)).series[0]
        np.testing.assert_array_equal(back.values, d.series[0].values)
        np.testing.assert_array_equal(back.events, d.series[0].events)


class TestDataset:
    def test_unique_ids(self):
        with pytest.raises(SeriesError, match="unique"):
            Dataset([_series(4, "a"), _series(4, "a")])

    def test_split_tag(self):
        with pytest.raises(SeriesError):
            Dataset([], "validation")


class TestSplit:
    @pytest.mark.parametrize("T,expected", [(10, (8, 2)), (100, (80, 20)), (5, (4, 1))])
    def test_sizes(self, T, expected):
        tr, te = split_80_20(Dataset([_series(T)]))
        assert (len(tr.series[0]), len(te.series[0])) == expected

    def test_too_short(self):
        with pytest.raises(SeriesError, match="too short"):
            split_80_20(Dataset([_series(4)]))

    def test_order_preserved(self):
        tr, te = split_80_20(Dataset([_series(37)]))
        assert tr.series[0].timestamps[-1] < te.series[0].timestamps[0]
        assert len(tr.series[0]) + len(te.series[0]) == 37


class TestNormalizer:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50))
    def test_roundtrip(self, values):
        x = np.array(values)
        n = Normalizer.fit(x)
        back = n.denormalize(n.normalize(x))
        assert np.all(np.abs(back - x) <= 1e-12 * np.maximum(np.abs(x), 1.0) + 1e-9 * n.scale)

    def test_constant_segment_unit_scale(self):
        n = Normalizer.fit([3.0, 3.0, 3.0])
        assert n.scale == 1.0 and n.loc == 3.0

    def test_scale_positive(self):
        with pytest.raises(SeriesError):
            Normalizer(0.0, 0.0)


class TestWindows:
    def test_one_window(self):
        f = np.random.default_rng(0).normal(size=(13, 6))
        w = make_windows(f, 12)
        assert len(w) == 1
        assert w[0].label == f[12, 0]

    def test_labels_at_next_index(self):
        f = np.column_stack([np.arange(5.0), np.zeros((5, 5))])
        w = make_windows(f, 3)
        assert [x.label for x in w] == [3.0, 4.0]
        assert [x.origin[1] for x in w] == [2, 3]

    def test_tau_too_long(self):
        with pytest.raises(SeriesError):
            make_windows(np.zeros((20, 6)), 24)

    def test_count_and_causality(self):
        T, tau = 40, 6
        f = np.random.default_rng(1).normal(size=(T, 6))
        w = make_windows(f, tau)
        assert len(w) == T - tau
        for win in w:
            t = win.origin[1]
            np.testing.assert_array_equal(win.features, f[t - tau + 1:t + 1])

    def test_window_type(self):
        f = np.ones((3, 6))
        f[:, 1] = 0.0
        w = FeatureWindow(f, 0.0, ("a", 2))
        assert w.tau == 3
        assert not w.critical.any()
        f[1, 4] = 1.3
        assert FeatureWindow(f, 0.0, ("a", 2)).critical.tolist() == [False, True, False]


class TestSynth:
    def test_no_injection_zero_noise(self):
        cfg = ScenarioConfig(T=48, cycle=12, level=10, slope=0.1, amp=[0.2, 0.05])
        s = synth_generate(cfg, 0)
        t = np.arange(48)
        expected = (10 + 0.1 * t) * (1 + 0.2 * np.sin(2 * np.pi * t / 12) + 0.05 * np.sin(4 * np.pi * t / 12))
        np.testing.assert_allclose(s.values, expected, rtol=1e-14)

    def test_injection_multiplies(self):
        base = ScenarioConfig(T=80, cycle=12, noise=0.1)
        inj = ScenarioConfig(T=80, cycle=12, noise=0.1, anomalies=[(50, 3.0)])
        a, b = synth_generate(base, 7), synth_generate(inj, 7)
        assert b.values[50] == pytest.approx(3.0 * a.values[50], rel=1e-14)
        np.testing.assert_array_equal(np.delete(a.values, 50), np.delete(b.values, 50))

    def test_deterministic(self):
        cfg = ScenarioConfig(T=60, noise=0.2, events=[(3, 1.0)])
        np.testing.assert_array_equal(synth_generate(cfg, 11).values, synth_generate(cfg, 11).values)

    def test_events(self):
        s = synth_generate(ScenarioConfig(T=30, events=[(5, 2.0), (6, 1.0)]), 0)
        assert np.flatnonzero(s.events).tolist() == [5, 6]

    def test_out_of_range(self):
        with pytest.raises(SeriesError, match="out of range"):
            synth_generate(ScenarioConfig(T=30, anomalies=[(30, 2.0)]), 0)
        with pytest.raises(SeriesError, match="out of range"):
            synth_generate(ScenarioConfig(T=30, events=[(-1, 2.0)]), 0)

    def test_non_positive_base(self):
        with pytest.raises(SeriesError, match="non-positive"):
            synth_generate(ScenarioConfig(T=30, level=1.0, amp=[1.5]), 0)

    def test_from_mapping(self):
        cfg = ScenarioConfig.from_mapping({"T": "40", "cycle": "4", "slope": "0.5", "amp": "0.1, 0.2",
                                           "noise": "0.01", "anomalies": "3:2.0, 10:0.5", "events": "7:1"})
        assert cfg.T == 40 and cfg.cycle == 4 and cfg.slope == 0.5
        assert cfg.amp == [0.1, 0.2]
        assert cfg.anomalies == [(3, 2.0), (10, 0.5)]
        assert cfg.events == [(7, 1.0)]
