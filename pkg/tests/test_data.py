import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcontrast.data import (
    AUGMENTATIONS,
    LongTailSpec,
    SyntheticFaultModel,
    add_gaussian_noise,
    augment_once,
    build_long_tail_split,
    default_fault_models,
    generate_signal,
    ingest,
    make_view_pair,
    random_crop,
    random_scale,
    random_stretch,
    read_csv_signal,
    read_raw_f32le,
    standardize,
    Split,
    Splits,
    write_raw_f32le,
)
from qcontrast.errors import ConfigurationError, DegenerateInputError, IngestionError


class TestGenerateSignal:
    def test_silent(self):
        m = SyntheticFaultModel(amplitude=0.0, noise_std=0.0)
        assert not generate_signal(m, 500, 0).any()

    def test_impulse_onsets(self):
        m = SyntheticFaultModel(fault_period=100, resonance_freq=0.2, decay=0.9, amplitude=2.0, noise_std=0.0)
        x = generate_signal(m, 1000, 0)
        # each ring peaks at its onset; ring samples after it stay below 0.9 * amplitude
        onsets = np.flatnonzero(np.abs(x) > 0.95 * 2.0)
        np.testing.assert_array_equal(onsets, np.arange(0, 1000, 100))

    def test_deterministic(self):
        m = SyntheticFaultModel()
        np.testing.assert_array_equal(generate_signal(m, 300, 7), generate_signal(m, 300, 7))

    @pytest.mark.parametrize(
        "field,value", [("fault_period", 1), ("resonance_freq", 0.5), ("decay", 1.0), ("noise_std", -1.0)]
    )
    def test_invalid_model(self, field, value):
        m = SyntheticFaultModel(**{field: value})
        with pytest.raises(ConfigurationError):
            generate_signal(m, 1000, 0)

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            generate_signal(SyntheticFaultModel(fault_period=50), 10, 0)

    def test_default_ladder(self):
        models = default_fault_models(10)
        assert len(models) == 10 and models[0].amplitude == 0.0
        assert len({(m.fault_period, m.amplitude) for m in models[1:]}) == 9


def _recordings(c=4, length=5000):
    rng = np.random.default_rng(0)
    return [rng.normal(size=length) + i for i in range(c)]


class TestLongTailSplit:
    def test_ib_50(self):
        assert LongTailSpec(500, 50).n_fault_per_class == 10

    @pytest.mark.parametrize("ib", [5, 10, 20, 50])
    def test_counts(self, ib):
        spec = LongTailSpec(500, ib, 250)
        s = build_long_tail_split(_recordings(4), spec, 64, 0)
        np.testing.assert_array_equal(s.train.counts(4), [500] + [500 // ib] * 3)
        np.testing.assert_array_equal(s.val.counts(4), [250] * 4)
        np.testing.assert_array_equal(s.test.counts(4), [250] * 4)

    def test_balanced_when_rate_is_one(self):
        s = build_long_tail_split(_recordings(3), LongTailSpec(500, 1, 10), 32, 0)
        np.testing.assert_array_equal(s.train.counts(3), [500] * 3)

    def test_test_size(self):
        s = build_long_tail_split(_recordings(10, 3000), LongTailSpec(500, 50, 250), 32, 0)
        assert len(s.test) == 2500

    def test_rate_must_divide(self):
        with pytest.raises(ConfigurationError):
            build_long_tail_split(_recordings(2), LongTailSpec(500, 3), 32, 0)

    def test_windows_come_from_recording(self):
        rec = np.arange(1000.0)
        s = build_long_tail_split([rec, rec + 5000], LongTailSpec(4, 2, 3), 16, 1)
        for w in s.train.x:
            assert np.all(np.diff(w) == 1.0)
        assert s.train.x.shape[1] == 16

    def test_recording_too_short(self):
        with pytest.raises(ConfigurationError):
            build_long_tail_split([np.zeros(10), np.zeros(10)], LongTailSpec(2, 1, 1), 32, 0)


class TestStandardize:
    def _splits(self, train):
        train = np.asarray(train, dtype=float)
        return Splits(Split(train, np.zeros(len(train), int)), Split(train, np.zeros(len(train), int)), Split(train * 3, np.zeros(len(train), int)), 1)

    def test_arithmetic(self):
        out = standardize(self._splits([[0.0, 2.0]]))
        assert out.stats == {"mean": 1.0, "std": 1.0}
        np.testing.assert_array_equal(out.train.x, [[-1.0, 1.0]])
        np.testing.assert_array_equal(out.test.x, [[-1.0, 5.0]])

    def test_already_standard(self):
        x = np.random.default_rng(0).normal(size=(10, 50))
        x = (x - x.mean()) / x.std()
        np.testing.assert_allclose(standardize(self._splits(x)).train.x, x, atol=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(DegenerateInputError):
            standardize(self._splits([[3.0, 3.0]]))

    def test_train_moments(self):
        x = np.random.default_rng(1).normal(5.0, 3.0, size=(20, 64))
        out = standardize(self._splits(x)).train.x
        assert abs(out.mean()) < 1e-10 and abs(out.std() - 1) < 1e-10


class TestIngest:
    def test_csv(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1.0\n2.0\n")
        np.testing.assert_array_equal(read_csv_signal(p), [1.0, 2.0])

    def test_csv_error_names_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1.0\nabc\n")
        with pytest.raises(IngestionError, match="line 2"):
            read_csv_signal(p)

    def test_raw(self, tmp_path):
        p = tmp_path / "a.f32"
        p.write_bytes(struct.pack("<f", 1.0))
        np.testing.assert_array_equal(read_raw_f32le(p), [1.0])

    def test_raw_truncated(self, tmp_path):
        p = tmp_path / "a.f32"
        p.write_bytes(struct.pack("<f", 1.0) + b"\x00\x01")
        with pytest.raises(IngestionError, match="byte offset 4"):
            read_raw_f32le(p)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(width=32, allow_nan=False), max_size=50))
    def test_raw_round_trip(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "x.f32"
        raw = np.asarray(values, dtype="<f4").tobytes()
        p.write_bytes(raw)
        q = p.with_suffix(".out")
        write_raw_f32le(q, read_raw_f32le(p))
        assert q.read_bytes() == raw

    def test_manifest(self, tmp_path):
        write_raw_f32le(tmp_path / "c0.f32", [1.0, 2.0])
        (tmp_path / "c1.csv").write_text("3\n4\n")
        write_raw_f32le(tmp_path / "c1b.f32", [5.0])
        manifest = {
            "sample_rate": 12000,
            "files": [
                {"path": "c0.f32", "label": 0},
                {"path": "c1.csv", "label": 1, "format": "csv"},
                {"path": "c1b.f32", "label": 1},
            ],
        }
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        recs, meta = ingest(tmp_path / "manifest.json")
        assert meta["sample_rate"] == 12000
        np.testing.assert_array_equal(recs[0], [1, 2])
        np.testing.assert_array_equal(recs[1], [3, 4, 5])

    def test_manifest_missing_file(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"files": [{"path": "nope.f32", "label": 0}]}))
        with pytest.raises(IngestionError):
            ingest(tmp_path / "manifest.json")


class TestAugmentations:
    def test_noise_zero_variance(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(add_gaussian_noise(x, 0, var=0.0), x)

    def test_noise_moments(self):
        d = add_gaussian_noise(np.zeros(100_000), 3)
        assert abs(d.mean()) < 0.05 * 0.1
        assert d.var() == pytest.approx(0.01, rel=0.05)

    def test_noise_seeded(self):
        x = np.ones(10)
        np.testing.assert_array_equal(add_gaussian_noise(x, 4), add_gaussian_noise(x, 4))

    def test_scale_zero_variance(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(random_scale(x, 0, var=0.0), x)

    def test_scale_mean(self):
        rng = np.random.default_rng(0)
        x = np.array([2.0, -1.0])
        factors = [random_scale(x, rng)[0] / 2.0 for _ in range(100_000)]
        assert np.mean(factors) == pytest.approx(1.0, rel=0.01)

    def test_scale_zero_input(self):
        assert not random_scale(np.zeros(7), 1).any()

    def test_stretch_identity(self):
        x = np.random.default_rng(0).normal(size=9)
        np.testing.assert_array_equal(random_stretch(x, None, r=1.0), x)

    def test_stretch_half(self):
        np.testing.assert_allclose(random_stretch([0.0, 2.0, 4.0, 6.0], None, r=0.5), [0, 1, 2, 3])

    def test_stretch_near_zero(self):
        x = np.array([3.0, 9.0, -1.0, 4.0])
        np.testing.assert_allclose(random_stretch(x, None, r=1e-12), 3.0)

    def test_crop_zeroes_thirty(self):
        x = np.random.default_rng(0).uniform(1.0, 2.0, 100)
        out = random_crop(x, 5)
        zero = np.flatnonzero(out == 0)
        assert len(zero) == 30 and np.all(np.diff(zero) == 1)
        keep = np.ones(100, bool)
        keep[zero] = False
        np.testing.assert_array_equal(out[keep], x[keep])

    def test_crop_zero_input(self):
        assert not random_crop(np.zeros(64), 0).any()

    def test_crop_needs_length(self):
        with pytest.raises(ConfigurationError):
            random_crop(np.ones(30), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(31, 200))
    def test_length_preserved(self, seed, n):
        x = np.random.default_rng(seed).normal(size=n)
        for fn in (add_gaussian_noise, random_scale, random_stretch, random_crop):
            assert len(fn(x, seed)) == n
        v1, v2 = make_view_pair(x, seed)
        assert len(v1) == len(v2) == n


class TestViewPair:
    def test_forced_off(self):
        x = np.arange(40.0)
        v1, v2 = make_view_pair(x, 0, p=0.0, require_change=False)
        np.testing.assert_array_equal(v1, x)
        np.testing.assert_array_equal(v2, x)

    def test_seeded(self):
        x = np.random.default_rng(0).normal(size=64)
        a, b = make_view_pair(x, 11), make_view_pair(x, 11)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_views_differ_from_raw(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=64)
        for _ in range(200):
            v, fired = augment_once(x, rng)
            assert fired and not np.array_equal(v, x)

    def _frequencies(self, require_change):
        rng = np.random.default_rng(0)
        x = np.random.default_rng(1).normal(size=40)
        hits = dict.fromkeys(AUGMENTATIONS, 0)
        views = 20_000  # 10^4 pairs
        for _ in range(views):
            _, fired = augment_once(x, rng, require_change=require_change)
            for name in fired:
                hits[name] += 1
        return {k: v / views for k, v in hits.items()}

    def test_bernoulli_frequency(self):
        for name, freq in self._frequencies(require_change=False).items():
            assert freq == pytest.approx(0.5, abs=0.02), name

    def test_frequency_with_retry(self):
        # retrying empty draws conditions on "at least one fires": 0.5 / (1 - 0.5**4)
        for name, freq in self._frequencies(require_change=True).items():
            assert freq == pytest.approx(0.5 / 0.9375, abs=0.02), name
