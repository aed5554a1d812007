"""Recordings, overlapping segmentation, temporal windows and synthetic data.

A recording is a C x L sample matrix.  Segments are 2 x 1024 slices taken
with 50 % overlap; a temporal window is the concatenation of five
consecutive segments (i-2 .. i+2) and carries the centre segment's label.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SEG_LEN = 1024
WINDOW_SEGMENTS = 5
HALF_WINDOW = WINDOW_SEGMENTS // 2


class ChannelCountError(ValueError):
    pass


class EmptySegmentationError(ValueError):
    pass


class WindowAssemblyError(ValueError):
    pass


@dataclass
class Recording:
    id: str
    sample_rate_hz: int
    channels: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 2 or self.channels.shape[0] < 1 or self.channels.shape[1] < 1:
            raise ValueError(f"recording {self.id!r}: channels must be a non-empty C x L matrix")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"recording {self.id!r}: sample rate must be positive")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError(f"recording {self.id!r}: non-finite samples")

    @property
    def n_samples(self):
        return self.channels.shape[1]


@dataclass
class Segment:
    source_id: str
    index: int
    data: np.ndarray
    label: int
    start: int = 0  # first raw-sample index, for overlap audits


@dataclass
class TemporalWindow:
    source_id: str
    center_index: int
    data: np.ndarray
    label: int


def segment_count(n_samples, seg_len=SEG_LEN, hop=SEG_LEN // 2):
    if n_samples < seg_len:
        return 0
    return (n_samples - seg_len) // hop + 1


def hop_length(seg_len, overlap_fraction):
    return max(int(round(seg_len * (1.0 - overlap_fraction))), 1)


def segment_recording(rec: Recording, seg_len=SEG_LEN, overlap_fraction=0.5, channels=(0, 1)):
    """Cut a recording into overlapping 2-channel segments."""
    if rec.channels.shape[0] < 2:
        raise ChannelCountError(f"recording {rec.id!r} has {rec.channels.shape[0]} channel(s); 2 required")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must lie in [0, 1)")
    n = rec.n_samples
    if n < seg_len:
        raise EmptySegmentationError(
            f"recording {rec.id!r} has {n} samples, shorter than one {seg_len}-sample segment")
    hop = hop_length(seg_len, overlap_fraction)
    data = rec.channels[list(channels)]
    label = -1 if rec.label is None else int(rec.label)
    return [
        Segment(rec.id, j, data[:, j * hop:j * hop + seg_len].copy(), label, start=j * hop)
        for j in range(segment_count(n, seg_len, hop))
    ]


def build_windows(segments):
    """One window per centre i with 2 <= i <= N-3; boundary segments are dropped."""
    if not segments:
        return []
    sources = {s.source_id for s in segments}
    if len(sources) > 1:
        raise WindowAssemblyError(f"segments come from several recordings: {sorted(sources)}")
    idx = [s.index for s in segments]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise WindowAssemblyError(f"segment indices of {segments[0].source_id!r} are not consecutive")
    out = []
    for c in range(HALF_WINDOW, len(segments) - HALF_WINDOW):
        parts = segments[c - HALF_WINDOW:c + HALF_WINDOW + 1]
        out.append(TemporalWindow(segments[c].source_id, segments[c].index,
                                  np.concatenate([p.data for p in parts], axis=1), segments[c].label))
    return out


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    provenance: tuple = ()  # (source_id, index) pairs the stats were fit on

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


def fit_normalizer(train_segments, epsilon=1e-8) -> NormStats:
    """Per-channel z-score statistics from training segments only."""
    if not train_segments:
        raise ValueError("cannot fit a normalizer on an empty training set")
    stack = np.stack([s.data for s in train_segments]).astype(np.float64)
    mean = stack.mean(axis=(0, 2))
    std = stack.std(axis=(0, 2))
    if np.any(std < epsilon):
        log.warning("channel(s) %s have zero variance; std clamped to %g",
                    np.flatnonzero(std < epsilon).tolist(), epsilon)
        std = np.maximum(std, epsilon)
    prov = tuple((s.source_id, s.index) for s in train_segments)
    return NormStats(mean, std, prov)


def apply_normalizer(item, stats: NormStats):
    """Return a normalised copy of a Segment or TemporalWindow."""
    mean = stats.mean[:, None]
    std = stats.std[:, None]
    data = ((item.data.astype(np.float64) - mean) / std).astype(np.float32)
    if isinstance(item, Segment):
        return Segment(item.source_id, item.index, data, item.label, item.start)
    if isinstance(item, TemporalWindow):
        return TemporalWindow(item.source_id, item.center_index, data, item.label)
    raise TypeError(f"cannot normalise {type(item).__name__}")


# --------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    segments: list
    windows: list
    num_classes: int
    norm_stats: NormStats | None = None
    domain_tag: str = "source"

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise ValueError("domain_tag must be 'source' or 'target'")

    def __len__(self):
        return len(self.segments)

    def _seg_lookup(self):
        return {(s.source_id, s.index): s for s in self.segments}

    def segment_arrays(self):
        x = np.stack([s.data for s in self.segments]) if self.segments else np.zeros((0, 2, SEG_LEN), np.float32)
        y = np.array([s.label for s in self.segments], dtype=np.int64)
        return x, y

    def paired_arrays(self):
        """(centre segments, windows, labels) aligned row by row.

        Only segments that are window centres appear, so segment models and
        window models are trained and evaluated on the same time steps.
        """
        lookup = self._seg_lookup()
        if not self.windows:
            return (np.zeros((0, 2, SEG_LEN), np.float32),
                    np.zeros((0, 2, SEG_LEN * WINDOW_SEGMENTS), np.float32),
                    np.zeros(0, np.int64))
        x = np.stack([lookup[(w.source_id, w.center_index)].data for w in self.windows])
        w = np.stack([w.data for w in self.windows])
        y = np.array([w.label for w in self.windows], dtype=np.int64)
        return x, w, y

    def check(self):
        lookup = self._seg_lookup()
        for w in self.windows:
            seg = lookup.get((w.source_id, w.center_index))
            if seg is None:
                raise ValueError(f"window centre {(w.source_id, w.center_index)} has no segment")
            if seg.label != w.label:
                raise ValueError(f"window {(w.source_id, w.center_index)} label differs from its centre")
        labels = [s.label for s in self.segments]
        if labels and (min(labels) < 0 or max(labels) >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.norm_stats is not None and np.any(self.norm_stats.std <= 0):
            raise ValueError("norm_stats std must be positive")


def _group_by_source(segments):
    groups = {}
    for s in segments:
        groups.setdefault(s.source_id, []).append(s)
    return [sorted(groups[k], key=lambda s: s.index) for k in sorted(groups)]


def split_dataset(segments_per_recording, train_fraction=0.8, min_side=1):
    """Contiguous per-recording split: first ceil(f*N) segments train, rest test.

    When consecutive segments overlap, the first test segment shares raw
    samples with the last training segment and is dropped.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}; the test set would be empty")
    train, test = [], []
    for segs in segments_per_recording:
        segs = sorted(segs, key=lambda s: s.index)
        n = len(segs)
        n_train = math.ceil(train_fraction * n)
        head, tail = segs[:n_train], segs[n_train:]
        if tail and head and tail[0].start < head[-1].start + head[-1].data.shape[1]:
            tail = tail[1:]
        if len(head) < min_side or len(tail) < min_side:
            if segs:
                log.warning("recording %r (%d segments) too short to split; assigned to train",
                            segs[0].source_id, n)
            train.append(segs)
            continue
        train.append(head)
        test.append(tail)
    return train, test


def build_dataset(segment_groups, num_classes, stats: NormStats | None = None, domain_tag="source"):
    """Normalise segment groups (one per recording) and rebuild their windows."""
    segments, windows = [], []
    for group in segment_groups:
        if stats is not None:
            group = [apply_normalizer(s, stats) for s in group]
        segments.extend(group)
        windows.extend(build_windows(group))
    ds = LabeledDataset(segments, windows, num_classes, stats, domain_tag)
    return ds


def prepare_datasets(recordings, num_classes, train_fraction=0.8, seg_len=SEG_LEN,
                     overlap_fraction=0.5, domain_tag="source"):
    """Segment, split, fit normalisation on train and build (train, test)."""
    recordings = sorted(recordings, key=lambda r: r.id)
    groups = [segment_recording(r, seg_len, overlap_fraction) for r in recordings]
    train_groups, test_groups = split_dataset(groups, train_fraction)
    stats = fit_normalizer([s for g in train_groups for s in g])
    train = build_dataset(train_groups, num_classes, stats, domain_tag)
    test = build_dataset(test_groups, num_classes, stats, domain_tag)
    return train, test


def prepare_unlabeled(recordings, num_classes, seg_len=SEG_LEN, overlap_fraction=0.5, domain_tag="target"):
    """Segment a domain without splitting; normalisation is fit on that domain itself."""
    recordings = sorted(recordings, key=lambda r: r.id)
    groups = [segment_recording(r, seg_len, overlap_fraction) for r in recordings]
    stats = fit_normalizer([s for g in groups for s in g])
    return build_dataset(groups, num_classes, stats, domain_tag)


# --------------------------------------------------------------------------
# synthetic temporal-context data


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Amplitude-modulated carriers whose class cue lives in a slow envelope.

    Classes are arranged in confusable pairs sharing a carrier frequency.  The
    two members of a pair differ only in the period of their modulation
    envelope, both longer than one segment, so a single segment sees a short
    arc of the envelope while a five-segment window sees whole cycles.
    """

    num_classes: int = 4
    recordings_per_class: int = 10
    recording_length: int = 25_000
    sample_rate_hz: int = 25_000
    noise: float = 0.15
    seg_len: int = SEG_LEN
    carrier_hz: tuple = (1100.0, 2300.0)
    modulation_periods: tuple = (4.0, 6.0)  # in segment lengths, per pair member
    modulation_depth: float = 0.9
    gain_jitter: float = 0.0
    carrier_shift_hz: float = 0.0
    channel_mix: float = 0.6

    def __post_init__(self):
        if self.num_classes < 2:
            raise SynthSpecError("num_classes must be >= 2")
        if min(self.modulation_periods) <= 1.0:
            raise SynthSpecError(
                "every modulation period must exceed one segment length, otherwise single "
                "segments already contain the whole envelope")
        if len(set(self.modulation_periods)) != len(self.modulation_periods):
            raise SynthSpecError("modulation periods within a pair must differ")
        if self.recording_length < self.seg_len:
            raise SynthSpecError("recording_length shorter than one segment")


def synth_class_params(spec: SynthSpec, k: int):
    """(carrier Hz, modulation period in samples) for class k."""
    n_per = len(spec.modulation_periods)
    carrier = spec.carrier_hz[(k // n_per) % len(spec.carrier_hz)] + spec.carrier_shift_hz
    carrier += 150.0 * (k // (n_per * len(spec.carrier_hz)))
    period = spec.modulation_periods[k % n_per] * spec.seg_len
    return carrier, period


def synth_generate(spec: SynthSpec = SynthSpec(), seed=0, clean=False):
    """Deterministic list of labelled 2-channel recordings."""
    rng = np.random.default_rng(seed)
    t = np.arange(spec.recording_length, dtype=np.float64)
    recs = []
    for k in range(spec.num_classes):
        carrier, period = synth_class_params(spec, k)
        for r in range(spec.recordings_per_class):
            phase_env = rng.uniform(0, 2 * np.pi)
            phase_car = rng.uniform(0, 2 * np.pi, size=2)
            gain = 1.0 + spec.gain_jitter * rng.uniform(-1, 1)
            env = 1.0 + spec.modulation_depth * np.sin(2 * np.pi * t / period + phase_env)
            c0 = np.sin(2 * np.pi * carrier * t / spec.sample_rate_hz + phase_car[0])
            c1 = np.sin(2 * np.pi * carrier * t / spec.sample_rate_hz + phase_car[1])
            ch0 = gain * env * c0
            ch1 = gain * env * (spec.channel_mix * c1 + (1 - spec.channel_mix) * c0)
            sig = np.stack([ch0, ch1])
            noise = rng.standard_normal(sig.shape)
            if not clean:
                sig = sig + spec.noise * noise
            recs.append(Recording(f"synth-c{k:02d}-r{r:03d}", spec.sample_rate_hz, sig.astype(np.float32), k))
    return recs


# --------------------------------------------------------------------------
# TRAW raw format
#
# 24-byte header: b"TRAW0001", u32 channels, u32 samples/channel,
# u32 sample rate, i32 label (-1 unlabeled); then channel-major LE float32.

TRAW_MAGIC = b"TRAW0001"
TRAW_HEADER = struct.Struct("<8sIIIi")


class TrawFormatError(ValueError):
    pass


class TrawHeaderError(TrawFormatError):
    pass


class TrawSizeError(TrawFormatError):
    pass


class TrawValueError(TrawFormatError):
    pass


def write_recording(rec: Recording, path):
    path = Path(path)
    c, n = rec.channels.shape
    label = -1 if rec.label is None else int(rec.label)
    with open(path, "wb") as fh:
        fh.write(TRAW_HEADER.pack(TRAW_MAGIC, c, n, int(rec.sample_rate_hz), label))
        fh.write(np.ascontiguousarray(rec.channels, dtype="<f4").tobytes())
    return path


def load_recording(path, format="traw", sample_rate_hz=None, label=None) -> Recording:
    path = Path(path)
    if format == "csv":
        return load_csv_recording(path, sample_rate_hz or 1, label)
    if format != "traw":
        raise ValueError(f"unknown recording format {format!r}")
    raw = path.read_bytes()
    if len(raw) < TRAW_HEADER.size:
        raise TrawHeaderError(f"{path}: {len(raw)} bytes, shorter than the {TRAW_HEADER.size}-byte header")
    magic, c, n, rate, lab = TRAW_HEADER.unpack_from(raw)
    if magic != TRAW_MAGIC:
        raise TrawHeaderError(f"{path}: bad magic {magic!r}, expected {TRAW_MAGIC!r}")
    if c == 0 or n == 0 or rate == 0:
        raise TrawHeaderError(f"{path}: header has zero channels, samples or sample rate")
    expected = TRAW_HEADER.size + 4 * c * n
    if len(raw) != expected:
        raise TrawSizeError(f"{path}: expected {expected} bytes for {c} x {n} samples, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=TRAW_HEADER.size).reshape(c, n).astype(np.float32)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise TrawValueError(f"{path}: non-finite sample at channel {bad[0]}, index {bad[1]}")
    return Recording(path.stem, int(rate), data, None if lab < 0 else int(lab))


def load_csv_recording(path, sample_rate_hz, label=None) -> Recording:
    """CSV with a header row and one column per channel."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise TrawFormatError(f"{path}: CSV needs a header row and at least one sample row")
    width = len(rows[0])
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise TrawFormatError(f"{path}: line {i} has {len(row)} columns, header has {width}")
    try:
        data = np.array(rows[1:], dtype=np.float64).T
    except ValueError as exc:
        raise TrawValueError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise TrawValueError(f"{path}: non-finite samples")
    return Recording(path.stem, int(sample_rate_hz), data.astype(np.float32), label)


def convert_csv_to_traw(csv_path, traw_path, sample_rate_hz, label=None):
    rec = load_csv_recording(csv_path, sample_rate_hz, label)
    return write_recording(rec, traw_path)
