import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcmkd import signal as sg
from tcmkd.signal import Recording, Segment, SynthSpec


def enumerate_segment_starts(n_samples, seg_len=1024, hop=512):
    """Slide a start index one sample at a time and keep hop-aligned full fits."""
    starts = []
    pos = 0
    while pos + seg_len <= n_samples:
        if pos % hop == 0:
            starts.append(pos)
        pos += 1
    return starts


def enumerate_window_centres(n_segments):
    return [i for i in range(n_segments) if i - 2 >= 0 and i + 2 <= n_segments - 1]


def ramp_recording(n, label=1, rid="r"):
    t = np.arange(n, dtype=np.float32)
    return Recording(rid, 1000, np.stack([t, -t, t * 0]), label)


def test_enumerator_oracle_counts():
    # frozen from the brute-force enumerators above
    assert len(enumerate_segment_starts(250_000)) == 487
    assert len(enumerate_segment_starts(25_000)) == 47
    assert len(enumerate_window_centres(487)) == 483
    assert len(enumerate_window_centres(47)) == 43


@pytest.mark.parametrize("n,expected", [(1024, 1), (250_000, 487), (25_000, 47)])
def test_segment_counts(n, expected):
    segs = sg.segment_recording(ramp_recording(n))
    assert len(segs) == expected
    assert [s.start for s in segs] == enumerate_segment_starts(n)


def test_segment_content_and_label():
    rec = ramp_recording(3000, label=3)
    segs = sg.segment_recording(rec)
    for j, s in enumerate(segs):
        assert s.data.shape == (2, 1024)
        np.testing.assert_array_equal(s.data, rec.channels[:2, j * 512:j * 512 + 1024])
        assert s.label == 3 and s.index == j


@settings(max_examples=40, deadline=None)
@given(st.integers(1024, 12_000))
def test_count_law_sweep(n):
    assert sg.segment_count(n) == len(enumerate_segment_starts(n)) == (n - 1024) // 512 + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 60))
def test_window_count_law(n):
    segs = [Segment("a", i, np.full((2, 1024), i, np.float32), 0) for i in range(n)]
    wins = sg.build_windows(segs)
    assert len(wins) == max(n - 4, 0) == len(enumerate_window_centres(n))
    assert [w.center_index for w in wins] == enumerate_window_centres(n)


def test_even_segments_reconstruct_stream():
    rec = Recording("r", 10, np.random.default_rng(0).standard_normal((2, 9000)).astype(np.float32))
    segs = sg.segment_recording(rec)
    stream = np.concatenate([s.data for s in segs[::2]], axis=1)
    np.testing.assert_array_equal(stream, rec.channels[:, :stream.shape[1]])


def test_segment_errors():
    with pytest.raises(sg.ChannelCountError):
        sg.segment_recording(Recording("mono", 10, np.zeros((1, 4096))))
    with pytest.raises(sg.EmptySegmentationError):
        sg.segment_recording(Recording("short", 10, np.zeros((2, 1000))))


def test_windows_small_inputs():
    mk = lambda n: [Segment("a", i, np.zeros((2, 1024), np.float32), 0) for i in range(n)]
    w5 = sg.build_windows(mk(5))
    assert len(w5) == 1 and w5[0].center_index == 2
    assert sg.build_windows(mk(4)) == []


def test_window_centre_columns_bit_equal():
    rec = Recording("r", 10, np.random.default_rng(1).standard_normal((2, 8000)).astype(np.float32), 2)
    segs = sg.segment_recording(rec)
    for w in sg.build_windows(segs):
        assert w.data.shape == (2, 5120)
        centre = segs[w.center_index]
        assert w.data[:, 2048:3072].tobytes() == centre.data.tobytes()
        assert w.label == centre.label
        expected = np.concatenate([segs[w.center_index + d].data for d in range(-2, 3)], axis=1)
        np.testing.assert_array_equal(w.data, expected)


def test_window_errors():
    a = [Segment("a", i, np.zeros((2, 1024), np.float32), 0) for i in range(3)]
    b = [Segment("b", i, np.zeros((2, 1024), np.float32), 0) for i in range(3)]
    with pytest.raises(sg.WindowAssemblyError):
        sg.build_windows(a + b)
    with pytest.raises(sg.WindowAssemblyError):
        sg.build_windows([a[0], a[2]])


# ---------------------------------------------------------------- normaliser

def seg(val, ch1=None):
    data = np.full((2, 1024), val, np.float32)
    if ch1 is not None:
        data[1] = ch1
    return Segment("s", 0, data, 0)


def test_normalizer_hand_example():
    stats = sg.fit_normalizer([seg(0.0), seg(2.0)])
    np.testing.assert_allclose(stats.mean, [1, 1])
    np.testing.assert_allclose(stats.std, [1, 1])
    np.testing.assert_allclose(sg.apply_normalizer(seg(0.0), stats).data, -1)
    np.testing.assert_allclose(sg.apply_normalizer(seg(2.0), stats).data, 1)


def test_normalizer_constant_channel(caplog):
    with caplog.at_level(logging.WARNING):
        stats = sg.fit_normalizer([seg(5.0), seg(5.0)])
    assert "zero variance" in caplog.text
    assert np.all(np.abs(sg.apply_normalizer(seg(5.0), stats).data) < 1e-6)


def test_normalizer_identity_case():
    rng = np.random.default_rng(2)
    data = rng.standard_normal((50, 2, 1024))
    data = (data - data.mean(axis=(0, 2), keepdims=True)) / data.std(axis=(0, 2), keepdims=True)
    segs = [Segment("s", i, d.astype(np.float32), 0) for i, d in enumerate(data)]
    stats = sg.fit_normalizer(segs)
    np.testing.assert_allclose(sg.apply_normalizer(segs[3], stats).data, segs[3].data, atol=1e-6)


def test_normalizer_applies_same_stats_to_windows():
    rec = ramp_recording(6000)
    segs = sg.segment_recording(rec)
    stats = sg.fit_normalizer(segs)
    win = sg.build_windows(segs)[0]
    nw = sg.apply_normalizer(win, stats)
    ns = sg.apply_normalizer(segs[win.center_index], stats)
    np.testing.assert_array_equal(nw.data[:, 2048:3072], ns.data)


def test_normalizer_empty():
    with pytest.raises(ValueError):
        sg.fit_normalizer([])


# ---------------------------------------------------------------- split

def shared_samples(train, test):
    """Overlap audit: raw-sample index ranges shared between the two sides."""
    used = set()
    for s in train:
        used.update(range(s.start, s.start + s.data.shape[1]))
    return sum(1 for s in test for i in range(s.start, s.start + s.data.shape[1]) if i in used)


@pytest.mark.parametrize("n_samples,n_train,n_test", [(1024 + 9 * 512, 8, 1), (250_000, 390, 96)])
def test_split_counts_and_no_leakage(n_samples, n_train, n_test):
    segs = sg.segment_recording(ramp_recording(n_samples))
    train, test = sg.split_dataset([segs])
    assert len(train[0]) == n_train and len(test[0]) == n_test
    assert shared_samples(train[0], test[0]) == 0
    assert [s.index for s in train[0]] == list(range(n_train))


def test_split_full_fraction_rejected():
    with pytest.raises(ValueError):
        sg.split_dataset([sg.segment_recording(ramp_recording(8000))], train_fraction=1.0)


def test_split_degenerate_recording_goes_to_train(caplog):
    segs = sg.segment_recording(ramp_recording(2048))
    with caplog.at_level(logging.WARNING):
        train, test = sg.split_dataset([segs])
    assert test == [] and len(train[0]) == 3
    assert "assigned to train" in caplog.text


def test_prepare_datasets_stats_come_from_train_only():
    recs = sg.synth_generate(SynthSpec(recordings_per_class=2, recording_length=12_000), seed=3)
    train, test = sg.prepare_datasets(recs, 4)
    train_keys = {(s.source_id, s.index) for s in train.segments}
    test_keys = {(s.source_id, s.index) for s in test.segments}
    assert set(train.norm_stats.provenance) == train_keys
    assert not train_keys & test_keys
    assert test.norm_stats is train.norm_stats
    train.check()
    test.check()
    # windows never cross the split or a recording boundary
    for ds in (train, test):
        keys = {(s.source_id, s.index) for s in ds.segments}
        for w in ds.windows:
            assert all((w.source_id, w.center_index + d) in keys for d in range(-2, 3))


# ---------------------------------------------------------------- synthetic data

def test_synth_determinism():
    spec = SynthSpec(recordings_per_class=1, recording_length=5000)
    a = sg.synth_generate(spec, seed=7)
    b = sg.synth_generate(spec, seed=7)
    assert all(x.channels.tobytes() == y.channels.tobytes() for x, y in zip(a, b))
    c = sg.synth_generate(spec, seed=8)
    assert a[0].channels.tobytes() != c[0].channels.tobytes()


def test_synth_rejects_short_modulation():
    with pytest.raises(sg.SynthSpecError):
        SynthSpec(modulation_periods=(4.0, 1.0))


def test_synth_confusable_pair_variance_matches():
    # channel 1 mixes in a random per-recording inter-channel phase, so only
    # channel 0 has a class-determined energy; it must not separate the pair
    spec = SynthSpec(noise=0.0, recordings_per_class=20)
    recs = sg.synth_generate(spec, seed=0, clean=True)
    var = {}
    for k in (0, 1):
        segs = [s for r in recs if r.label == k for s in sg.segment_recording(r)]
        var[k] = np.mean([s.data[0].var() for s in segs])
    assert abs(var[0] - var[1]) / var[0] < 0.01, var


def envelope_period_fit(window, candidates, seg_len=1024, hop=512):
    """Envelope period (samples) whose sinusoid pair best explains |x|^2 in least squares.

    Window samples are mapped back to recording time, since the five segments
    overlap.  Works with less than one envelope cycle, unlike an FFT peak.
    """
    power = window[0].astype(np.float64) ** 2
    n_seg = power.size // seg_len
    t = (np.arange(n_seg)[:, None] * hop + np.arange(seg_len)[None, :]).ravel()
    best, best_res = None, np.inf
    for period in candidates:
        cols = [np.ones_like(t, dtype=float)]
        for h in (1, 2):
            cols += [np.sin(2 * np.pi * h * t / period), np.cos(2 * np.pi * h * t / period)]
        design = np.stack(cols, axis=1)
        _, res, *_ = np.linalg.lstsq(design, power, rcond=None)
        # carrier ripple is at twice the carrier frequency, far above this band
        if res.size and res[0] < best_res:
            best, best_res = period, res[0]
    return best


def test_synth_windows_reveal_class_modulation():
    spec = SynthSpec(noise=0.0, recordings_per_class=2)
    recs = sg.synth_generate(spec, seed=1, clean=True)
    for r in recs:
        pair = r.label - r.label % 2
        candidates = [sg.synth_class_params(spec, pair + i)[1] for i in (0, 1)]
        wins = sg.build_windows(sg.segment_recording(r))
        for w in wins[::5]:
            found = envelope_period_fit(w.data, candidates)
            assert found == sg.synth_class_params(spec, r.label)[1], (r.label, w.center_index)


# ---------------------------------------------------------------- TRAW

def test_traw_round_trip(tmp_path):
    rec = Recording("x", 25_000, np.random.default_rng(0).standard_normal((2, 2048)).astype(np.float32), 3)
    path = sg.write_recording(rec, tmp_path / "x.traw")
    back = sg.load_recording(path)
    assert back.channels.tobytes() == rec.channels.tobytes()
    assert back.n_samples == 2048 and back.label == 3 and back.sample_rate_hz == 25_000
    assert path.stat().st_size == 24 + 4 * 2 * 2048


def test_traw_header_layout(tmp_path):
    rec = Recording("x", 12_000, np.zeros((3, 5), np.float32))
    raw = sg.write_recording(rec, tmp_path / "x.traw").read_bytes()
    assert raw[:8] == b"TRAW0001"
    assert int.from_bytes(raw[8:12], "little") == 3
    assert int.from_bytes(raw[12:16], "little") == 5
    assert int.from_bytes(raw[16:20], "little") == 12_000
    assert int.from_bytes(raw[20:24], "little", signed=True) == -1


def test_traw_truncated(tmp_path):
    rec = Recording("x", 100, np.ones((2, 100), np.float32))
    path = sg.write_recording(rec, tmp_path / "x.traw")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(sg.TrawSizeError, match=r"expected 824 bytes.*got 814"):
        sg.load_recording(path)


def test_traw_bad_magic_and_nonfinite(tmp_path):
    path = tmp_path / "bad.traw"
    path.write_bytes(b"NOTRAW!!" + bytes(16))
    with pytest.raises(sg.TrawHeaderError):
        sg.load_recording(path)
    rec = Recording("y", 100, np.ones((2, 4), np.float32))
    good = sg.write_recording(rec, tmp_path / "y.traw")
    raw = bytearray(good.read_bytes())
    raw[24:28] = np.array([np.nan], "<f4").tobytes()
    good.write_bytes(bytes(raw))
    with pytest.raises(sg.TrawValueError):
        sg.load_recording(good)


def test_csv_conversion(tmp_path):
    csv_path = tmp_path / "rec.csv"
    rows = ["a,b"] + [f"{i},{-i}" for i in range(2048)]
    csv_path.write_text("\n".join(rows) + "\n")
    out = sg.convert_csv_to_traw(csv_path, tmp_path / "rec.traw", 25_000, label=1)
    rec = sg.load_recording(out)
    assert rec.channels.shape == (2, 2048)
    np.testing.assert_array_equal(rec.channels[1], -np.arange(2048))
